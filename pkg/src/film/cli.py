"""``film`` command line: train, interpolate, eval, mine, synth, histogram, selfcheck.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import film

logger = logging.getLogger("film")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flags or unusable input; reported with exit code 2."""


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _versions() -> dict[str, str]:
    import matplotlib
    import PIL
    import scipy

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "pillow": PIL.__version__, "matplotlib": matplotlib.__version__, "film": film.__version__}


class Manifest:
    """Run record written as ``key = value`` lines."""

    def __init__(self, command: str, argv: Sequence[str], seed: Optional[int]):
        self.command = command
        self.argv = list(argv)
        self.seed = seed
        self.config: dict[str, object] = {}
        self.artifacts: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def lines(self) -> list[str]:
        out = [f"command = {self.command}", f"argv = {' '.join(self.argv)}", f"seed = {self.seed}"]
        out += [f"config.{k} = {v}" for k, v in self.config.items()]
        out += [f"artifact.{k} = {v}" for k, v in sorted(self.artifacts.items())]
        out += [f"timing.{k} = {v:.3f}" for k, v in self.timings.items()]
        out += [f"version.{k} = {v}" for k, v in _versions().items()]
        return out

    def write(self, path) -> Path:
        self.timings["total_s"] = time.perf_counter() - self._t0
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n", encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def reflect_pad(image: np.ndarray, divisor: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom and right edges up to multiples of ``divisor``."""
    h, w = image.shape[:2]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return image, (h, w)
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode=mode), (h, w)


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_model(path: Path):
    from film.checkpoint import CorruptCheckpointError
    from film.train import load_model

    _require_file(path, "checkpoint")
    try:
        return load_model(path)
    except (CorruptCheckpointError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def _load_dataset(path: Path, blend: Optional[str] = None):
    from film.data import load_dataset

    if not path.is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    try:
        records = load_dataset(path, blend)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset at {path} is unreadable: {exc}") from exc
    if not records:
        raise UsageError(f"dataset at {path} has no records")
    return records


def _frame_name(i: int, n: int) -> str:
    return f"frame_{i:0{max(3, len(str(n)))}d}.png"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _read_loss_csv(path: Path, before_step: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if int(r[0]) < before_step]


def cmd_train(args) -> int:
    from film.config import ConfigError, format_config, load_config
    from film.plotting import plot_loss_curve
    from film.train import NumericalError, TrainState, fit, load_checkpoint, save_checkpoint

    out = Path(args.out)
    if args.resume:
        state = load_checkpoint(_require_file(Path(args.resume), "checkpoint"))
        if args.config:
            model_cfg, train_cfg = load_config(_require_file(Path(args.config), "config file"))
            if args.seed is not None:
                train_cfg = train_cfg.replace(seed=args.seed)
            if (model_cfg, train_cfg) != (state.model.config, state.train_config):
                raise UsageError("--config does not match the configuration stored in the checkpoint")
        elif args.seed is not None and args.seed != state.train_config.seed:
            raise UsageError("--seed does not match the seed stored in the checkpoint")
    else:
        if not args.config:
            raise UsageError("train needs --config (or --resume)")
        try:
            model_cfg, train_cfg = load_config(_require_file(Path(args.config), "config file"))
        except ConfigError as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from exc
        if args.seed is not None:
            train_cfg = train_cfg.replace(seed=args.seed)
        state = TrainState.create(model_cfg, train_cfg)
    dataset = _load_dataset(Path(args.data))
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train", args.argv, state.train_config.seed)
    for line in format_config(state.model.config, state.train_config).splitlines():
        key, value = line.split(" = ", 1)
        manifest.config[key] = value
    manifest.config["resume_from"] = args.resume or ""
    manifest.config["stop_step"] = args.steps if args.steps is not None else state.train_config.steps

    loss_path = out / "loss.csv"
    previous = _read_loss_csv(loss_path, state.step) if args.resume else []
    start = state.step
    t0 = time.perf_counter()
    try:
        fit(state, dataset, steps=args.steps, checkpoint_dir=out)
    except NumericalError as exc:
        diag = out / "diagnostics.txt"
        diag.write_text("".join(f"{k} = {v}\n" for k, v in {"error": str(exc), **exc.diagnostics}.items()),
                        encoding="utf-8")
        save_checkpoint(out / "ckpt_failed", state)
        manifest.artifacts["diagnostics"] = str(diag)
        manifest.write(out / "manifest.txt")
        print(f"numerical failure: {exc} (diagnostics in {diag})", file=sys.stderr)
        return EXIT_NUMERIC
    manifest.timings["train_s"] = time.perf_counter() - t0

    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        writer.writerows(previous)
        for step, value, lr in state.history:
            writer.writerow([step, repr(value), repr(lr)])
    rows = previous + [[str(s), repr(v), repr(lr)] for s, v, lr in state.history]
    if rows:
        plot_loss_curve([int(r[0]) for r in rows], [float(r[1]) for r in rows], out / "loss.png",
                        lrs=[float(r[2]) for r in rows])
        manifest.artifacts["loss_plot"] = str(out / "loss.png")
    final = save_checkpoint(out / "ckpt_final", state)
    manifest.artifacts.update({"checkpoint": str(final), "loss_csv": str(loss_path)})
    manifest.write(out / "manifest.txt")
    print(f"trained steps {start}..{state.step}; checkpoint {final}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    from film.autodiff import Tensor, no_grad
    from film.data import read_image, write_image
    from film.flowviz import flow_to_color, write_flow
    from film.model import interpolate_recursive

    if args.times < 1:
        raise UsageError("--times must be >= 1")
    model = _load_model(Path(args.checkpoint))
    frames = []
    for p in (args.frame0, args.frame1):
        try:
            frames.append(read_image(_require_file(Path(p), "input frame")))
        except OSError as exc:
            raise UsageError(f"cannot read {p}: {exc}") from exc
    levels = args.levels or model.config.levels
    if levels != model.config.levels and not model.config.share_weights:
        raise UsageError("--levels differs from training but the model does not share weights")
    divisor = 2 ** (levels - 1)
    (a, (h, w)), (b, (h1, w1)) = (reflect_pad(f, divisor) for f in frames)
    if (h, w) != (h1, w1) or a.shape != b.shape:
        raise UsageError(f"input frames differ in shape: {frames[0].shape} vs {frames[1].shape}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("interpolate", args.argv, args.seed)
    manifest.config.update({"checkpoint": args.checkpoint, "times": args.times, "levels": levels,
                            "input_shape": f"{h}x{w}", "padded_shape": f"{a.shape[0]}x{a.shape[1]}"})
    t0 = time.perf_counter()
    mids = interpolate_recursive(a, b, model, args.times, levels)
    manifest.timings["interpolate_s"] = time.perf_counter() - t0
    for i, m in enumerate(mids, 1):
        path = out / _frame_name(i, len(mids))
        write_image(path, m[:h, :w])
        manifest.artifacts[f"frame_{i:03d}"] = str(path)
    if args.dump_flows:
        dtype = model.params.dtype
        with no_grad():
            res = model.forward(Tensor(a[None].astype(dtype)), Tensor(b[None].astype(dtype)), levels)
        for name, flows in (("to0", res.flows_to0), ("to1", res.flows_to1)):
            flow = flows[0].data[0, :h, :w]
            write_flow(out / f"flow_{name}.flo", flow)
            write_image(out / f"flow_{name}.png", flow_to_color(flow))
            manifest.artifacts[f"flow_{name}"] = str(out / f"flow_{name}.flo")
    manifest.write(out / "manifest.txt")
    print(f"wrote {len(mids)} frame(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from film.metrics import evaluate_dataset
    from film.plotting import plot_eval

    model = _load_model(Path(args.checkpoint))
    records = _load_dataset(Path(args.data), args.blend)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("eval", args.argv, args.seed)
    manifest.config.update({"checkpoint": args.checkpoint, "data": args.data, "blend": args.blend or "",
                            "levels": args.levels or model.config.levels})
    t0 = time.perf_counter()
    report = evaluate_dataset(model, records, levels=args.levels)
    manifest.timings["eval_s"] = time.perf_counter() - t0
    report.write_csv(report_path)
    summary = report_path.with_name(report_path.stem + "_summary.csv")
    report.write_summary(summary)
    plot = plot_eval(report, report_path.with_suffix(".png"))
    manifest.artifacts.update({"report": str(report_path), "summary": str(summary), "plot": str(plot)})
    manifest.write(report_path.with_name(report_path.stem + "_manifest.txt"))
    fmt = lambda v: "NA" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"{len(report.rows)} samples, {report.skipped} skipped; "
          f"mean PSNR {fmt(report.mean_psnr)} dB, mean SSIM {fmt(report.mean_ssim)}")
    return EXIT_OK


def _write_histogram(motions, out: Path, bin_width: float, manifest: Manifest) -> None:
    from film.metrics import motion_histogram, write_histogram

    for p in write_histogram(motion_histogram(motions, bin_width), out):
        manifest.artifacts[p.name.replace(".", "_")] = str(p)


def cmd_mine(args) -> int:
    from film.data import list_sequences, mine_brackets
    from film.plotting import plot_bracket_counts

    root = Path(args.frames)
    if not root.is_dir():
        raise UsageError(f"frame directory not found: {root}")
    try:
        strides = tuple(int(s) for s in args.strides.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --strides {args.strides!r}") from exc
    if any(s < 1 for s in strides):
        raise UsageError("strides must be positive")
    out = Path(args.out)
    manifest = Manifest("mine", args.argv, args.seed)
    manifest.config.update({"frames": str(root), "strides": args.strides, "radius": args.radius,
                            "block": args.block, "keep_low_confidence": args.keep_low_confidence})
    t0 = time.perf_counter()
    result = mine_brackets(list_sequences(root), out, strides=strides, radius=args.radius, block=args.block,
                           skip_low_confidence=not args.keep_low_confidence)
    manifest.timings["mine_s"] = time.perf_counter() - t0
    manifest.artifacts.update({"index": str(out / "index.csv"), "bracket_counts": str(out / "bracket_counts.csv")})
    manifest.artifacts["bracket_plot"] = str(plot_bracket_counts(result.counts, out / "bracket_counts.png"))
    _write_histogram([r["motion_px"] for r in result.rows], out, args.bin_width, manifest)
    manifest.write(out / "manifest.txt")
    print(f"mined {len(result.rows)} triplets "
          f"({result.out_of_range} out of range, {result.low_confidence} low confidence, "
          f"{result.unreadable} unreadable)")
    for label, n in result.counts.items():
        print(f"  {label}: {n}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from film.data import generate_synthetic_triplets, write_dataset

    lo, hi = args.disparity
    try:
        records = generate_synthetic_triplets(args.count, args.size, (lo, hi), rng=args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    manifest = Manifest("synth", args.argv, args.seed or 0)
    manifest.config.update({"count": args.count, "size": args.size, "disparity": f"{lo} {hi}"})
    manifest.artifacts["index"] = str(write_dataset(out, records))
    manifest.write(out / "manifest.txt")
    print(f"wrote {len(records)} synthetic triplets to {out}")
    return EXIT_OK


def cmd_histogram(args) -> int:
    from film.data import read_index

    index = Path(args.data) / "index.csv"
    _require_file(index, "dataset index")
    rows = read_index(index)
    motions = []
    for row in rows:
        if row["motion_px"] in (None, "", "NA"):
            raise UsageError(f"record {row['path']} has no motion magnitude")
        motions.append(float(row["motion_px"]))
    out = Path(args.out)
    manifest = Manifest("histogram", args.argv, args.seed)
    manifest.config.update({"data": args.data, "bin_width": args.bin_width})
    _write_histogram(motions, out, args.bin_width, manifest)
    manifest.write(out / "manifest.txt")
    print(f"histogram of {len(motions)} triplets written to {out}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from film.selfcheck import SUITES, run_selfcheck

    names = args.suite or list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    ok = run_selfcheck(names)
    print("selfcheck passed" if ok else "selfcheck FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="film", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    parser.add_argument("--version", action="version", version=f"film {film.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="seed for every random stream")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a model on a triplet dataset")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory holding index.csv")
    p.add_argument("--out", required=True, help="run directory for checkpoints, loss.csv and manifest")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="stop after this global step (default: configured total)")

    p = add("interpolate", cmd_interpolate, "synthesize 2^k - 1 in-between frames")
    p.add_argument("checkpoint")
    p.add_argument("frame0")
    p.add_argument("frame1")
    p.add_argument("--out", required=True)
    p.add_argument("--times", type=int, default=1, help="recursion depth k")
    p.add_argument("--levels", type=int, help="pyramid levels at inference (default: as trained)")
    p.add_argument("--dump-flows", action="store_true", help="also write the finest midpoint flows")

    p = add("eval", cmd_eval, "score midpoint interpolation on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="per-sample CSV path")
    p.add_argument("--levels", type=int)
    p.add_argument("--blend", help="restrict to a bracket blend such as 0-40")

    p = add("mine", cmd_mine, "mine bracketed triplets from frame sequences")
    p.add_argument("frames", help="directory of sequences (sub-directories of frames)")
    p.add_argument("--out", required=True)
    p.add_argument("--strides", default="1,2,4")
    p.add_argument("--radius", type=int, default=32)
    p.add_argument("--block", type=int, default=16)
    p.add_argument("--bin-width", type=float, default=10.0)
    p.add_argument("--keep-low-confidence", action="store_true")

    p = add("synth", cmd_synth, "generate a synthetic sprite dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--disparity", type=float, nargs=2, default=(0.0, 8.0), metavar=("LO", "HI"))

    p = add("histogram", cmd_histogram, "motion-magnitude histogram of a dataset")
    p.add_argument("data")
    p.add_argument("--out", required=True)
    p.add_argument("--bin-width", type=float, default=10.0)

    p = add("selfcheck", cmd_selfcheck, "run gradient and oracle suites")
    p.add_argument("--suite", action="append", help="suite to run (repeatable; default all)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
