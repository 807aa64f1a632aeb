"""Operator command-line surface.

Subcommands: synth-gen, project, train, eval, export-logits, verify,
bench.  Exit codes are a stable contract: 0 success, 1 config or usage,
2 data parse failure, 3 numeric failure.  All outputs are deterministic
given config + seed (bench latencies excepted, being wall-clock
measurements).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import bev, nnet, pipeline, teacher, verify
from .config import RunConfig, documented_defaults
from .errors import (
    ConfigError,
    FormatError,
    IoFailure,
    LabelCountMismatch,
    LengthMismatch,
    MalformedCalib,
    MalformedLabel,
    MalformedPoseLine,
    MalformedScan,
    MosDistillError,
    NonFiniteLoss,
    ShapeMismatch,
)
from .metrics import write_metrics
from .synthbench import export_kitti_sequence

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARSE = 2
EXIT_NUMERIC = 3

_PARSE_ERRORS = (
    MalformedScan,
    MalformedLabel,
    LabelCountMismatch,
    MalformedPoseLine,
    MalformedCalib,
    FormatError,
    ShapeMismatch,
    LengthMismatch,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit 1, not argparse's 2
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration file (key=value lines)")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--threads", type=int, default=1, help="frame-level parallelism")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mosdistill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic KITTI-layout sequence")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--sequence", default="00", help="sequence name under sequences/")

    p = sub.add_parser("project", help="project a sequence to motion tensors")
    _add_common(p)
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true", help="write grayscale renders")

    p = sub.add_parser("train", help="train the student network")
    _add_common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--out-ckpt", required=True)
    p.add_argument(
        "--teacher",
        default="none",
        help="none | synth | directory of .logits files",
    )
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--log", help="write per-epoch log lines to this file")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a sequence")
    _add_common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--metrics-out", help="write the key=value metrics report here")

    p = sub.add_parser("export-logits", help="run a net over a sequence, save logits")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify", help="run the numeric verification suites")
    p.add_argument(
        "suite", choices=[*verify.ALL_SUITES, "all"], help="which suite to run"
    )

    p = sub.add_parser("bench", help="projection and inference throughput")
    _add_common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--frames", type=int, default=20, help="timed frames (cycled)")
    p.add_argument("--out", help="write the key=value report here")

    p = sub.add_parser("dump-config", help="print every config key with its default")
    return parser


# ---------------------------------------------------------------------------
# subcommand bodies


def cmd_synth_gen(args) -> int:
    cfg = _load_config(args)
    seq_dir = Path(args.out) / "sequences" / args.sequence
    n = export_kitti_sequence(cfg.scene(), seq_dir)
    print(f"wrote {n} frames to {seq_dir}")
    return EXIT_OK


def cmd_project(args) -> int:
    cfg = _load_config(args)
    clouds, classes, poses = pipeline.load_sequence(args.seq)
    samples = pipeline.build_samples(clouds, classes, poses, cfg, threads=args.threads)
    out = Path(args.out)
    (out / "motion").mkdir(parents=True, exist_ok=True)
    (out / "cell_labels").mkdir(parents=True, exist_ok=True)
    (out / "cell_valid").mkdir(parents=True, exist_ok=True)
    window, split = cfg.window()
    grid = cfg.bev_grid()
    meta = {
        "mode": grid.mode,
        "n_radial": grid.n_radial,
        "n_angular": grid.n_angular,
        "r_max": grid.r_max,
        "z_min": grid.z_min,
        "z_max": grid.z_max,
        "window": window,
        "split": split,
        "channels": pipeline.input_channels(cfg),
    }
    write_metrics(meta, out / "meta.txt")
    for sample in samples:
        fid = sample.frame_id
        np.save(out / "motion" / f"{fid:06d}.npy", sample.motion.channels.astype(np.float32))
        np.save(out / "cell_labels" / f"{fid:06d}.npy", sample.labels.labels)
        np.save(out / "cell_valid" / f"{fid:06d}.npy", sample.labels.valid)
        if args.render:
            rdir = out / "render"
            rdir.mkdir(exist_ok=True)
            bev.write_pgm(sample.height.values, rdir / f"{fid:06d}_height.pgm")
            for k in range(sample.motion.channels.shape[0]):
                bev.write_pgm(
                    sample.motion.channels[k], rdir / f"{fid:06d}_ch{k:02d}.pgm"
                )
    print(f"projected {len(samples)} frames to {out}")
    return EXIT_OK


def _resolve_teacher(args, cfg: RunConfig, samples) -> RunConfig:
    if args.teacher == "none":
        cfg.set("distill.gamma", "0")
        return cfg
    if args.teacher == "synth":
        pipeline.attach_synth_teacher(
            samples,
            cfg.get_float("teacher.kappa"),
            cfg.get_float("teacher.sigma"),
            seed=cfg.get_int("train.seed"),
        )
        return cfg
    pipeline.attach_file_teacher(samples, args.teacher)
    return cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    clouds, classes, poses = pipeline.load_sequence(args.seq)
    samples = pipeline.build_samples(clouds, classes, poses, cfg, threads=args.threads)
    if not samples:
        raise ConfigError("sequence too short for the configured window")
    train, heldout = pipeline.split_train_heldout(
        samples, cfg.get_float("train.val_fraction")
    )
    cfg = _resolve_teacher(args, cfg, train)
    epochs = args.epochs if args.epochs is not None else cfg.get_int("train.epochs")
    net = nnet.build_network(
        pipeline.student_descriptor(cfg), seed=cfg.get_int("train.seed")
    )
    lines: list[str] = []

    def progress(line: str) -> None:
        print(line)
        lines.append(line)

    pipeline.train_student(net, train, heldout, cfg, epochs, progress)
    nnet.save_checkpoint(args.out_ckpt, net)
    if args.log:
        Path(args.log).write_text("\n".join(lines) + "\n")
    print(f"saved checkpoint to {args.out_ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    net = nnet.load_checkpoint(args.ckpt)
    clouds, classes, poses = pipeline.load_sequence(args.seq)
    samples = pipeline.build_samples(clouds, classes, poses, cfg, threads=args.threads)
    report = pipeline.evaluate(net, samples, threads=args.threads)
    for key in sorted(report):
        print(f"{key}={report[key]}")
    if args.metrics_out:
        write_metrics(report, args.metrics_out)
    return EXIT_OK


def cmd_export_logits(args) -> int:
    cfg = _load_config(args)
    net = nnet.load_checkpoint(args.ckpt)
    clouds, classes, poses = pipeline.load_sequence(args.seq)
    samples = pipeline.build_samples(clouds, classes, poses, cfg, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        grid = pipeline.predict_logits(net, sample)
        teacher.write_logits(grid, out / teacher.logits_filename(sample.frame_id))
    print(f"exported {len(samples)} logit grids to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    names = list(verify.ALL_SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for result in verify.run_suites(names):
        print(result.format())
        for line in result.details:
            print(f"  {line}")
        ok = ok and result.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    clouds, classes, poses = pipeline.load_sequence(args.seq)
    window, _ = cfg.window()
    idxs = pipeline.usable_frames(len(clouds), window)
    if not idxs:
        raise ConfigError("sequence too short for the configured window")
    net = nnet.build_network(
        pipeline.student_descriptor(cfg), seed=cfg.get_int("train.seed")
    )
    proj_ms: list[float] = []
    infer_ms: list[float] = []
    for k in range(args.frames):
        i = idxs[k % len(idxs)]
        t0 = time.perf_counter()
        sample = pipeline.build_sample(
            clouds, classes, poses, i, cfg.bev_grid(), *cfg.window(),
            cfg.get_str("bev.aggregate"),
            cfg.get_bool("bev.per_frame_residuals"),
            cfg.get_bool("bev.appearance_channels"),
        )
        t1 = time.perf_counter()
        pipeline.predict_logits(net, sample)
        t2 = time.perf_counter()
        proj_ms.append((t1 - t0) * 1e3)
        infer_ms.append((t2 - t1) * 1e3)

    def stats(prefix: str, values: list[float]) -> dict[str, float]:
        arr = np.array(values)
        return {
            f"{prefix}_ms_mean": float(arr.mean()),
            f"{prefix}_ms_median": float(np.median(arr)),
            f"{prefix}_ms_p99": float(np.percentile(arr, 99)),
            f"{prefix}_fps": float(1e3 / arr.mean()),
        }

    report: dict[str, object] = {
        "frames": args.frames,
        "points_per_frame": int(np.mean([len(c) for c in clouds])),
        **stats("projection", proj_ms),
        **stats("inference", infer_ms),
    }
    for key in sorted(report):
        print(f"{key}={report[key]}")
    if args.out:
        write_metrics(report, args.out)
    return EXIT_OK


def cmd_dump_config(_args) -> int:
    print(documented_defaults(), end="")
    return EXIT_OK


_COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "project": cmd_project,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-logits": cmd_export_logits,
    "verify": cmd_verify,
    "bench": cmd_bench,
    "dump-config": cmd_dump_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _PARSE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, IoFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MosDistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
