"""Distillation and segmentation losses with analytic logit gradients.

The distillation side decomposes plain KL knowledge distillation into a
binary target-class term (TCKD) and a renormalized non-target term (NCKD):

    KD = KL(p_T || p_S) = TCKD + (1 - p_t_T) * NCKD

Decoupled class distillation (DCD) keeps both terms only for the moving
class and the NCKD term alone elsewhere; the weighted variant (WDCD)
divides each cell's DCD by the frame-level frequency of its label, which
up-weights the rare moving cells.  The student's own loss is weighted
cross-entropy plus Lovasz-softmax.

All math runs in float64.  Every frame-level loss returns both its value
and the exact gradient with respect to the student logits, zero at
invalid cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bev import CellLabelGrid
from .errors import EmptyFrame, ShapeMismatch
from .kitti_io import CLASS_MOVING, NUM_CLASSES

TCKD_SCOPES = ("moving", "all", "none")


@dataclass(frozen=True)
class LogitGrid:
    """Unnormalized per-cell class scores with a validity mask."""

    scores: np.ndarray  # (H, W, C) float64
    valid: np.ndarray   # (H, W) bool

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if scores.ndim != 3:
            raise ValueError("scores must be (H, W, C)")
        if valid.shape != scores.shape[:2]:
            raise ValueError("valid mask must match the grid shape")
        if not np.isfinite(scores).all():
            raise ValueError("logits must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.scores.shape


@dataclass(frozen=True)
class DistillConfig:
    """Every knob of the distillation loss family.

    ``weight_floor=None`` means 1 / (number of valid cells), resolved per
    frame.  ``tckd_scope`` selects which labels receive the binary
    target-class term: only the moving class (the decoupled default),
    every class (plain decoupled KD), or none.
    """

    temperature: float = 1.0
    beta: float = 1.0
    gamma: float = 0.25
    moving_class: int = CLASS_MOVING
    weight_floor: float | None = None
    prob_floor: float = 1e-12
    tckd_scope: str = "moving"
    reduction: str = "mean_over_valid"

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if not 0 <= self.moving_class < NUM_CLASSES:
            raise ValueError("moving_class must be a valid class id")
        if self.weight_floor is not None and self.weight_floor <= 0:
            raise ValueError("weight_floor must be positive")
        if self.prob_floor <= 0:
            raise ValueError("prob_floor must be positive")
        if self.tckd_scope not in TCKD_SCOPES:
            raise ValueError(f"tckd_scope must be one of {TCKD_SCOPES}")
        if self.reduction != "mean_over_valid":
            raise ValueError("only mean_over_valid reduction is supported")


@dataclass(frozen=True)
class FrameClassWeights:
    """Per-class share of valid cells in one frame, floored."""

    w: np.ndarray  # (C,) float64


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray  # same shape as the student logits
    parts: dict[str, float] = field(default_factory=dict)


def softmax_probs(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, max-shifted for stability."""
    zt = np.asarray(z, dtype=np.float64) / temperature
    zt = zt - zt.max(axis=-1, keepdims=True)
    e = np.exp(zt)
    return e / e.sum(axis=-1, keepdims=True)


def target_split(p: np.ndarray, t: int) -> tuple[float, float]:
    """Binary split (p_t, 1 - p_t) of a probability vector."""
    pt = float(p[t])
    return pt, 1.0 - pt


def nontarget_probs(z: np.ndarray, t: int, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the classes other than t (the target logit is excluded)."""
    z = np.asarray(z, dtype=np.float64)
    rest = np.delete(z, t, axis=-1)
    return softmax_probs(rest, temperature)


def _kl_terms(q: np.ndarray, p_floored: np.ndarray) -> np.ndarray:
    """q * log(q / p_floored) elementwise, with the q = 0 limit exactly 0."""
    logq = np.zeros_like(q)
    np.log(q, out=logq, where=q > 0.0)
    return q * (logq - np.log(p_floored))


def _kl(q: np.ndarray, p: np.ndarray, prob_floor: float) -> float:
    """KL(q || p); only the second argument's log is floored."""
    q = np.asarray(q, dtype=np.float64)
    p = np.maximum(np.asarray(p, dtype=np.float64), prob_floor)
    return float(_kl_terms(q, p).sum())


def kd_kl(
    z_teacher: np.ndarray,
    z_student: np.ndarray,
    temperature: float = 1.0,
    prob_floor: float = 1e-12,
) -> float:
    """Plain knowledge distillation: KL between full softened distributions."""
    return _kl(
        softmax_probs(z_teacher, temperature),
        softmax_probs(z_student, temperature),
        prob_floor,
    )


def tckd(
    z_teacher: np.ndarray,
    z_student: np.ndarray,
    t: int,
    temperature: float = 1.0,
    prob_floor: float = 1e-12,
) -> float:
    """Binary KL over the (target, non-target) probability split."""
    qt, qn = target_split(softmax_probs(z_teacher, temperature), t)
    pt, pn = target_split(softmax_probs(z_student, temperature), t)
    return _kl(np.array([qt, qn]), np.array([pt, pn]), prob_floor)


def nckd(
    z_teacher: np.ndarray,
    z_student: np.ndarray,
    t: int,
    temperature: float = 1.0,
    prob_floor: float = 1e-12,
) -> float:
    """KL over the renormalized non-target distributions."""
    return _kl(
        nontarget_probs(z_teacher, t, temperature),
        nontarget_probs(z_student, t, temperature),
        prob_floor,
    )


def dcd(
    z_teacher: np.ndarray,
    z_student: np.ndarray,
    t: int,
    cfg: DistillConfig,
) -> float:
    """Decoupled class distillation for one cell.

    Moving-labeled cells get TCKD + beta * NCKD, every other label only
    beta * NCKD (scope configurable via ``cfg.tckd_scope``).
    """
    tau, floor = cfg.temperature, cfg.prob_floor
    value = cfg.beta * nckd(z_teacher, z_student, t, tau, floor)
    if _tckd_applies(np.array([t]), cfg)[0]:
        value += tckd(z_teacher, z_student, t, tau, floor)
    return value


def _tckd_applies(t: np.ndarray, cfg: DistillConfig) -> np.ndarray:
    if cfg.tckd_scope == "all":
        return np.ones(t.shape, dtype=bool)
    if cfg.tckd_scope == "none":
        return np.zeros(t.shape, dtype=bool)
    return t == cfg.moving_class


def frame_weights(labels: CellLabelGrid, cfg: DistillConfig) -> FrameClassWeights:
    """Share of valid cells per class, floored at cfg.weight_floor."""
    valid = labels.valid
    total = int(valid.sum())
    if total == 0:
        raise EmptyFrame("no valid cells in frame")
    counts = np.bincount(labels.labels[valid].ravel(), minlength=NUM_CLASSES)
    floor = cfg.weight_floor if cfg.weight_floor is not None else 1.0 / total
    return FrameClassWeights(w=np.maximum(counts / total, floor))


def _check_pair(a: LogitGrid, b: LogitGrid | None, labels: CellLabelGrid) -> None:
    if a.scores.shape[:2] != labels.labels.shape:
        raise ShapeMismatch("logit grid and label grid disagree in shape")
    if not np.array_equal(a.valid, labels.valid):
        raise ShapeMismatch("logit and label validity masks differ")
    if b is not None:
        if b.scores.shape != a.scores.shape:
            raise ShapeMismatch("teacher and student logit shapes differ")
        if not np.array_equal(b.valid, a.valid):
            raise ShapeMismatch("teacher and student validity masks differ")


def wdcd_frame(
    z_teacher: LogitGrid,
    z_student: LogitGrid,
    labels: CellLabelGrid,
    cfg: DistillConfig,
) -> LossResult:
    """Weighted decoupled class distillation over one frame.

    value = mean over valid cells of DCD(cell) / w[label(cell)], scaled by
    temperature^2 so gradient magnitudes stay comparable across
    temperatures.  The gradient with respect to the student logits is
    analytic and exactly zero at invalid cells.
    """
    _check_pair(z_student, z_teacher, labels)
    valid = labels.valid
    m = int(valid.sum())
    if m == 0:
        raise EmptyFrame("no valid cells in frame")
    tau = cfg.temperature
    zt = z_teacher.scores[valid] / tau
    zs = z_student.scores[valid] / tau
    t = labels.labels[valid].astype(np.int64)
    rows = np.arange(m)

    q = softmax_probs(zt)            # teacher, full
    p = softmax_probs(zs)            # student, full
    qt = q[rows, t]
    pt = p[rows, t]

    # non-target renormalized distributions, computed with the target
    # logit masked out
    zt_masked = zt.copy()
    zt_masked[rows, t] = -np.inf
    zs_masked = zs.copy()
    zs_masked[rows, t] = -np.inf
    qh = _masked_softmax(zt_masked)
    ph = _masked_softmax(zs_masked)

    floor = cfg.prob_floor
    ph_f = np.maximum(ph, floor)
    nckd_cells = _kl_terms(qh, ph_f).sum(axis=1)

    pt_f = np.maximum(pt, floor)
    pn_f = np.maximum(1.0 - pt, floor)
    tckd_cells = _kl_terms(qt, pt_f) + _kl_terms(1.0 - qt, pn_f)
    use_tckd = _tckd_applies(t, cfg)

    dcd_cells = cfg.beta * nckd_cells + np.where(use_tckd, tckd_cells, 0.0)
    w = frame_weights(labels, cfg).w
    cell_scale = 1.0 / w[t]
    scale = tau * tau
    value = float((dcd_cells * cell_scale).mean() * scale)

    # gradient, per valid cell, with respect to the raw student logits
    # NCKD: d/dzs_j = (1/tau) (ph_j - qh_j) away from the prob floor
    live = ph > floor
    s = (qh * live).sum(axis=1, keepdims=True)
    g = (ph * s - qh * live) / tau * cfg.beta
    # TCKD depends on zs only through pt
    dtckd_dpt = -qt / pt_f * (pt > floor) + (1.0 - qt) / pn_f * ((1.0 - pt) > floor)
    coef = np.where(use_tckd, dtckd_dpt, 0.0) * pt / tau
    g -= coef[:, None] * p
    g[rows, t] += coef
    g *= (cell_scale * scale / m)[:, None]

    grad = np.zeros_like(z_student.scores)
    grad[valid] = g
    return LossResult(value=value, grad=grad)


def _masked_softmax(z_masked: np.ndarray) -> np.ndarray:
    """Softmax where -inf entries get exactly zero probability."""
    zmax = z_masked.max(axis=-1, keepdims=True)
    e = np.exp(z_masked - zmax)
    e[~np.isfinite(z_masked)] = 0.0
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(
    z_student: LogitGrid,
    labels: CellLabelGrid,
    class_weights: np.ndarray,
    prob_floor: float = 1e-12,
) -> LossResult:
    """Mean over valid cells of -class_weights[label] * log p_label."""
    _check_pair(z_student, None, labels)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (NUM_CLASSES,):
        raise ShapeMismatch("class_weights must have one entry per class")
    valid = labels.valid
    m = int(valid.sum())
    if m == 0:
        raise EmptyFrame("no valid cells in frame")
    z = z_student.scores[valid]
    t = labels.labels[valid].astype(np.int64)
    rows = np.arange(m)
    p = softmax_probs(z)
    pt = p[rows, t]
    cw = class_weights[t]
    pt_f = np.maximum(pt, prob_floor)
    value = float(-(cw * np.log(pt_f)).mean())

    live = (pt > prob_floor) * cw / m
    g = p * live[:, None]
    g[rows, t] -= live
    grad = np.zeros_like(z_student.scores)
    grad[valid] = g
    return LossResult(value=value, grad=grad)


def lovasz_softmax(
    z_student: LogitGrid,
    labels: CellLabelGrid,
    classes: tuple[int, ...] | None = None,
) -> LossResult:
    """Lovasz extension of the per-class Jaccard loss over valid cells.

    For each class c present in the labels (optionally restricted to
    ``classes``): errors m_i = 1 - p_c where the label is c, else p_c;
    sorted descending (stable); the extension weights are the successive
    differences of 1 - intersection/union over error prefixes.  The loss
    is the mean over included classes, and the gradient scatters the
    prefix weights back through the sort.
    """
    _check_pair(z_student, None, labels)
    valid = labels.valid
    m = int(valid.sum())
    if m == 0:
        raise EmptyFrame("no valid cells in frame")
    z = z_student.scores[valid]
    t = labels.labels[valid].astype(np.int64)
    p = softmax_probs(z)

    present = np.unique(t)
    if classes is not None:
        present = np.array([c for c in present if c in classes], dtype=np.int64)
    if present.size == 0:
        return LossResult(value=0.0, grad=np.zeros_like(z_student.scores))

    total = 0.0
    gp = np.zeros_like(p)  # gradient in probability space
    for c in present:
        pc = p[:, c]
        gt = (t == c).astype(np.float64)
        errors = np.where(gt > 0.5, 1.0 - pc, pc)
        order = np.argsort(-errors, kind="stable")
        e_sorted = errors[order]
        g_sorted = gt[order]
        gts = g_sorted.sum()
        intersection = gts - np.cumsum(g_sorted)
        union = gts + np.cumsum(1.0 - g_sorted)
        jaccard = 1.0 - intersection / union
        delta = np.diff(jaccard, prepend=0.0)
        total += float(e_sorted @ delta)
        sign = np.where(g_sorted > 0.5, -1.0, 1.0)
        gp_c = np.zeros(m)
        gp_c[order] = sign * delta
        gp[:, c] = gp_c
    k = present.size
    value = total / k
    gp /= k

    # chain through the softmax: dL/dz_j = p_j * (gp_j - sum_c gp_c p_c)
    inner = (gp * p).sum(axis=1, keepdims=True)
    g = p * (gp - inner)
    grad = np.zeros_like(z_student.scores)
    grad[valid] = g
    return LossResult(value=value, grad=grad)


def total_loss(
    z_student: LogitGrid,
    z_teacher: LogitGrid | None,
    labels: CellLabelGrid,
    cfg: DistillConfig,
    class_weights: np.ndarray,
    lovasz_classes: tuple[int, ...] | None = None,
) -> LossResult:
    """Student loss (wce + lovasz) plus gamma-weighted distillation.

    With gamma = 0 (or no teacher) this reduces exactly to the student
    loss; gradients of the parts sum linearly.
    """
    if z_teacher is None and cfg.gamma != 0.0:
        raise ValueError("a teacher grid is required when gamma > 0")
    wce = weighted_cross_entropy(z_student, labels, class_weights, cfg.prob_floor)
    ls = lovasz_softmax(z_student, labels, lovasz_classes)
    value = wce.value + ls.value
    grad = wce.grad + ls.grad
    parts = {"wce": wce.value, "lovasz": ls.value, "wdcd": 0.0}
    if z_teacher is not None and cfg.gamma != 0.0:
        kd = wdcd_frame(z_teacher, z_student, labels, cfg)
        value += cfg.gamma * kd.value
        grad += cfg.gamma * kd.grad
        parts["wdcd"] = kd.value
    return LossResult(value=value, grad=grad, parts=parts)
