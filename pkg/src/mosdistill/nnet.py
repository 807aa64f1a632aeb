"""Hand-differentiated BEV segmentation networks.

No autograd: every layer implements forward and backward explicitly and is
validated against central finite differences.  Tensors are plain numpy
arrays shaped (C, H, W).

The decoder upsampling is a dynamic-sampling module: a per-pixel linear
layer predicts bounded coordinate offsets which are pixel-shuffled to the
output resolution and added to a regular base grid before bilinear
resampling.  With its linear branch at zero it degenerates to plain
bilinear upsampling, which is also how it is initialized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IoFailure, ShapeMismatch

CKPT_MAGIC = b"KDCK"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# layers


class Conv2d:
    """Cross-correlation with square kernel, zero padding (k-1)//2."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int = 3,
        stride: int = 1,
        rng: np.random.Generator | None = None,
    ) -> None:
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride = kernel, stride
        self.padding = (kernel - 1) // 2
        bound = np.sqrt(6.0 / (c_in * kernel * kernel))
        if rng is None:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            w = rng.uniform(-bound, bound, size=(c_out, c_in, kernel, kernel))
        self.params = {"w": w, "b": np.zeros(c_out)}

    def out_shape(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return ((h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        if x.shape[0] != self.c_in:
            raise ShapeMismatch(f"expected {self.c_in} input channels, got {x.shape[0]}")
        k, s, p = self.kernel, self.stride, self.padding
        h, w = x.shape[1:]
        ho, wo = self.out_shape(h, w)
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        wt = self.params["w"]
        y = np.broadcast_to(self.params["b"][:, None, None], (self.c_out, ho, wo)).copy()
        for di in range(k):
            for dj in range(k):
                xs = xp[:, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s]
                y += np.tensordot(wt[:, :, di, dj], xs, axes=1)
        return y, xp

    def backward(self, gout: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict]:
        xp = cache
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = gout.shape[1:]
        wt = self.params["w"]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wt)
        gb = gout.sum(axis=(1, 2))
        for di in range(k):
            for dj in range(k):
                sl = np.s_[:, di : di + (ho - 1) * s + 1 : s, dj : dj + (wo - 1) * s + 1 : s]
                gw[:, :, di, dj] = np.tensordot(gout, xp[sl], axes=([1, 2], [1, 2]))
                gxp[sl] += np.tensordot(wt[:, :, di, dj].T, gout, axes=1)
        if p:
            gx = gxp[:, p:-p, p:-p]
        else:
            gx = gxp
        return gx, {"w": gw, "b": gb}


class ReLU:
    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mask = x > 0
        return x * mask, mask

    def backward(self, gout: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, dict]:
        return gout * mask, {}


def bilinear_upsample(x: np.ndarray, scale: int) -> np.ndarray:
    """Plain bilinear upsample, separable reference implementation.

    Pixel centers sit at integer + 0.5; output pixel (i, j) samples the
    input at ((i + 0.5)/scale, (j + 0.5)/scale), clamped to the span of
    the input pixel centers (border replication).
    """
    _, h, w = x.shape
    rows = _axis_weights(h, scale)
    cols = _axis_weights(w, scale)
    i0, i1, ti = rows
    out = x[:, i0, :] * (1.0 - ti)[None, :, None] + x[:, i1, :] * ti[None, :, None]
    j0, j1, tj = cols
    out = out[:, :, j0] * (1.0 - tj)[None, None, :] + out[:, :, j1] * tj[None, None, :]
    return out


def _axis_weights(n: int, scale: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(n * scale) + 0.5) / scale
    pos = np.clip(pos, 0.5, n - 0.5)
    f = pos - 0.5
    lo = np.clip(np.floor(f), 0, max(n - 2, 0)).astype(np.int64)
    t = f - lo
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, t


class DySample:
    """Content-aware upsampler: offset-shifted bilinear resampling.

    A linear layer maps the C input channels to 2*s^2 offset channels,
    scaled by ``offset_factor`` and pixel-shuffled to two (row, col)
    offset maps at the output resolution.  Sampling positions are the
    regular base grid plus these offsets, clamped to the input's pixel
    center span.  Zero linear weights reproduce bilinear upsampling
    exactly, which is the initial state.
    """

    def __init__(self, c_in: int, scale: int = 2, offset_factor: float = 0.25) -> None:
        if scale < 2:
            raise ValueError("scale must be >= 2")
        if offset_factor < 0:
            raise ValueError("offset factor must be non-negative")
        self.c_in, self.scale, self.offset_factor = c_in, scale, offset_factor
        self.params = {
            "linear_w": np.zeros((2 * scale * scale, c_in)),
            "linear_b": np.zeros(2 * scale * scale),
        }

    def _positions(self, x: np.ndarray):
        s = self.scale
        _, h, w = x.shape
        raw = (
            np.tensordot(self.params["linear_w"], x, axes=1)
            + self.params["linear_b"][:, None, None]
        )
        offsets = _pixel_shuffle(self.offset_factor * raw, s)  # (2, sH, sW)
        base_y = ((np.arange(h * s) + 0.5) / s)[:, None]
        base_x = ((np.arange(w * s) + 0.5) / s)[None, :]
        raw_y = base_y + offsets[0]
        raw_x = base_x + offsets[1]
        free_y = (raw_y > 0.5) & (raw_y < h - 0.5)
        free_x = (raw_x > 0.5) & (raw_x < w - 0.5)
        pos_y = np.clip(raw_y, 0.5, h - 0.5)
        pos_x = np.clip(raw_x, 0.5, w - 0.5)
        return raw, pos_y, pos_x, free_y, free_x, raw_y, raw_x

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        if x.shape[0] != self.c_in:
            raise ShapeMismatch(f"expected {self.c_in} input channels, got {x.shape[0]}")
        _, h, w = x.shape
        _, pos_y, pos_x, free_y, free_x, _, _ = self._positions(x)
        fy = pos_y - 0.5
        fx = pos_x - 0.5
        r0 = np.clip(np.floor(fy), 0, max(h - 2, 0)).astype(np.int64)
        c0 = np.clip(np.floor(fx), 0, max(w - 2, 0)).astype(np.int64)
        ty = fy - r0
        tx = fx - c0
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        v00 = x[:, r0, c0]
        v01 = x[:, r0, c1]
        v10 = x[:, r1, c0]
        v11 = x[:, r1, c1]
        top = v00 * (1.0 - tx) + v01 * tx
        bot = v10 * (1.0 - tx) + v11 * tx
        y = top * (1.0 - ty) + bot * ty
        cache = (x, r0, r1, c0, c1, ty, tx, free_y, free_x)
        return y, cache

    def backward(self, gout: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict]:
        x, r0, r1, c0, c1, ty, tx, free_y, free_x = cache
        c, _, w = x.shape
        s = self.scale

        w00 = (1.0 - ty) * (1.0 - tx)
        w01 = (1.0 - ty) * tx
        w10 = ty * (1.0 - tx)
        w11 = ty * tx
        gx = np.zeros_like(x)
        flat = gx.reshape(c, -1)
        idx00 = (r0 * w + c0).ravel()
        idx01 = (r0 * w + c1).ravel()
        idx10 = (r1 * w + c0).ravel()
        idx11 = (r1 * w + c1).ravel()
        for idx, wgt in ((idx00, w00), (idx01, w01), (idx10, w10), (idx11, w11)):
            contrib = (gout * wgt).reshape(c, -1)
            np.add.at(flat, (slice(None), idx), contrib)

        v00 = x[:, r0, c0]
        v01 = x[:, r0, c1]
        v10 = x[:, r1, c0]
        v11 = x[:, r1, c1]
        # derivative of the bilinear value wrt the sampling position
        dy = ((v10 - v00) * (1.0 - tx) + (v11 - v01) * tx)
        dx = ((v01 - v00) * (1.0 - ty) + (v11 - v10) * ty)
        g_pos_y = (gout * dy).sum(axis=0) * free_y
        g_pos_x = (gout * dx).sum(axis=0) * free_x

        g_offsets = np.stack([g_pos_y, g_pos_x])
        g_raw = self.offset_factor * _pixel_unshuffle(g_offsets, s)
        gw = np.tensordot(g_raw, x, axes=([1, 2], [1, 2]))
        gb = g_raw.sum(axis=(1, 2))
        gx += np.tensordot(self.params["linear_w"].T, g_raw, axes=1)
        return gx, {"linear_w": gw, "linear_b": gb}


def _pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    """(G*s*s, H, W) -> (G, s*H, s*W); channel g*s*s + di*s + dj lands at
    output pixel (h*s + di, w*s + dj)."""
    gs2, h, w = x.shape
    g = gs2 // (s * s)
    return (
        x.reshape(g, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(g, h * s, w * s)
    )


def _pixel_unshuffle(y: np.ndarray, s: int) -> np.ndarray:
    g, hs, ws = y.shape
    h, w = hs // s, ws // s
    return (
        y.reshape(g, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(g * s * s, h, w)
    )


# ---------------------------------------------------------------------------
# network assembly


@dataclass
class Network:
    """Ordered stack of layers with flat, name-addressed parameters."""

    descriptor: str
    layers: list[tuple[str, object]]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            for pname, arr in layer.params.items():
                out[f"{name}.{pname}"] = arr
        return out

    def load_parameters(self, params: dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(params) != set(own):
            raise ShapeMismatch("parameter names do not match the architecture")
        for name, layer in self.layers:
            for pname in layer.params:
                src = np.asarray(params[f"{name}.{pname}"], dtype=np.float64)
                if src.shape != layer.params[pname].shape:
                    raise ShapeMismatch(f"bad shape for parameter {name}.{pname}")
                layer.params[pname] = src.copy()

    def num_parameters(self) -> int:
        return sum(a.size for a in self.parameters().values())

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        caches = []
        for _, layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, gout: np.ndarray, caches: list) -> tuple[np.ndarray, dict]:
        grads: dict[str, np.ndarray] = {}
        for (name, layer), cache in zip(reversed(self.layers), reversed(caches)):
            gout, pgrads = layer.backward(gout, cache)
            for pname, g in pgrads.items():
                grads[f"{name}.{pname}"] = g
        return gout, grads

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward(x)
        return y


def parse_descriptor(descriptor: str) -> tuple[str, int, int]:
    """Parse ``student:in=8,base=16`` / ``teacher:in=8,base=32``."""
    try:
        kind, rest = descriptor.split(":", 1)
        fields = dict(item.split("=") for item in rest.split(","))
        c_in = int(fields["in"])
        base = int(fields["base"])
    except (ValueError, KeyError) as exc:
        raise FormatError(f"bad architecture descriptor {descriptor!r}") from exc
    if kind not in ("student", "teacher") or c_in < 1 or base < 1:
        raise FormatError(f"bad architecture descriptor {descriptor!r}")
    return kind, c_in, base


def build_network(descriptor: str, seed: int = 0) -> Network:
    """Instantiate a network from its descriptor string.

    The student encodes at three resolutions and upsamples back with two
    dynamic-sampling stages; the teacher doubles every width and adds one
    stride-1 encoder stage, giving it a genuine capacity margin.
    """
    kind, c_in, b = parse_descriptor(descriptor)
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, object]] = []

    def conv(name, ci, co, k=3, s=1):
        layers.append((name, Conv2d(ci, co, kernel=k, stride=s, rng=rng)))
        if name != "head":
            layers.append((name + "_relu", ReLU()))

    conv("enc0", c_in, b)
    if kind == "teacher":
        conv("enc0b", b, b)
    conv("enc1", b, 2 * b, s=2)
    conv("enc2", 2 * b, 4 * b, s=2)
    layers.append(("up0", DySample(4 * b, scale=2)))
    conv("dec0", 4 * b, 2 * b)
    layers.append(("up1", DySample(2 * b, scale=2)))
    conv("dec1", 2 * b, b)
    conv("head", b, 4, k=1)
    return Network(descriptor=descriptor, layers=layers)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    """SGD with classic momentum, coupled weight decay, per-epoch lr decay."""

    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.99
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape mismatch for {name}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v + g + self.weight_decay * p
            self.velocity[name] = v
            p -= self.lr * v

    def end_epoch(self) -> None:
        self.lr *= self.lr_decay


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: SgdState,
) -> None:
    """One in-place update: v <- m*v + g + wd*p; p <- p - lr*v."""
    state.step(params, grads)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, net: Network) -> None:
    """Versioned binary container; parameters stored float32 LE.

    Layout: magic ``KDCK``, u16 version, u32 descriptor length, descriptor
    utf-8, u32 parameter count, then per parameter u32 name length, name,
    u32 rank, u32 dims, raw float32 data.  All integers little-endian.
    """
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    desc = net.descriptor.encode("utf-8")
    chunks.append(struct.pack("<I", len(desc)))
    chunks.append(desc)
    params = net.parameters()
    chunks.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Network:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        out = data[off : off + n]
        off += n
        return out

    if take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<H", take(2))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", take(4))
    descriptor = take(dlen).decode("utf-8")
    (n_params,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params[name] = arr
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    net = build_network(descriptor)
    net.load_parameters(params)
    return net
