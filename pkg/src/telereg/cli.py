"""``telereg`` command line: shapes, datasets, training, evaluation, stress tests, plots.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
writes a ``run.json`` manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("telereg")

SHAPE_SUFFIXES = (".xyz", ".pcf")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(quiet: bool, json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if quiet else logging.INFO)


class RunManifest:
    """Collects what a command did; written as ``run.json`` when the command ends."""

    def __init__(self, command: str, args: argparse.Namespace, path: Path, seed=None):
        self.path = path
        self.data = {
            "command": command,
            "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"},
            "seed": seed,
            "code_version": __version__,
            "inputs": [],
            "outputs": [],
            "started": datetime.now(timezone.utc).isoformat(),
            "status": "running",
        }
        self._t0 = time.perf_counter()

    def add(self, key: str, path) -> None:
        self.data[key].append(str(Path(path).resolve()))

    def finish(self, status: str, error: str | None = None) -> None:
        self.data["status"] = status
        self.data["wall_clock_s"] = round(time.perf_counter() - self._t0, 3)
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        if error:
            self.data["error"] = error
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --- commands -------------------------------------------------------------


def cmd_make_shapes(args, manifest: RunManifest) -> None:
    from .pointcloud import save_cloud
    from .shapes import CATEGORIES, make_shape
    from .datagen import SHAPE_POINTS, derive_seed

    categories = CATEGORIES if args.category == "all" else (args.category,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cat in categories:
        for i in range(args.count):
            rng = np.random.default_rng(derive_seed(args.seed, cat, i))
            path = out / f"{cat}_{i:04d}.xyz"
            save_cloud(path, make_shape(cat, rng, SHAPE_POINTS))
            manifest.add("outputs", path)
    log.info("wrote %d shapes to %s", len(categories) * args.count, out)


def _load_shapes(shape_dir: Path) -> list:
    from .datagen import SHAPE_POINTS
    from .pointcloud import load_cloud

    if not shape_dir.is_dir():
        raise FileNotFoundError(f"shape directory {shape_dir} does not exist")
    files = sorted(p for p in shape_dir.iterdir() if p.suffix in SHAPE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no .xyz or .pcf shapes in {shape_dir}")
    shapes = []
    for f in files:
        try:
            pc = load_cloud(f)
        except (OSError, ValueError) as exc:
            raise ValueError(f"cannot read shape {f}: {exc}") from exc
        if len(pc) != SHAPE_POINTS:
            raise ValueError(f"shape {f} has {len(pc)} points, expected {SHAPE_POINTS}")
        shapes.append((f.stem, pc))
    return shapes


def cmd_gen_data(args, manifest: RunManifest) -> None:
    from .dataset import build_dataset

    shape_dir = Path(args.shapes)
    shapes = _load_shapes(shape_dir)
    manifest.add("inputs", shape_dir)
    result = build_dataset(
        shapes, args.out, args.category, args.count, args.seed, eta=args.overlap, split_ratios=args.split
    )
    manifest.add("outputs", Path(args.out) / "manifest.json")
    if not result["samples"]:
        raise RuntimeError("no pairs could be generated from the given shapes")
    log.info("wrote %d of %d requested pairs to %s", len(result["samples"]), args.count, args.out)


def cmd_train(args, manifest: RunManifest) -> None:
    from .trainer import TrainConfig, train

    config = TrainConfig.from_json(args.config)
    manifest.data["seed"] = config.seed
    manifest.data["train_config"] = config.to_dict()
    manifest.add("inputs", args.data)
    manifest.add("inputs", args.config)
    result = train(args.data, config, args.out, resume_from=args.resume)
    manifest.add("outputs", result.final_checkpoint)
    manifest.add("outputs", Path(args.out) / "train_log.csv")
    if result.final_eval:
        log.info("final eval: %s", {k: v for k, v in result.final_eval.items() if k != "category"})


def _eval_samples(args, model):
    from .dataset import list_samples, read_pair

    refs = list_samples(args.data, args.split)
    if not refs:
        raise RuntimeError(f"split {args.split!r} of {args.data} is empty")
    return [(r.sample_id, read_pair(r.path)) for r in refs]


def cmd_eval(args, manifest: RunManifest) -> None:
    from .checkpoint import load_model
    from .evaluation import evaluate, write_per_sample_csv
    from .metrics import write_eval_csv
    from .trainer import Sample

    model, ckpt = load_model(args.checkpoint)
    manifest.data["seed"] = ckpt.get("seed")
    manifest.add("inputs", args.data)
    manifest.add("inputs", args.checkpoint)
    pairs = _eval_samples(args, model)
    samples = [Sample.from_pair(sid, pair, model.config) for sid, pair in pairs]
    results = evaluate(model, samples, flow=args.flow, oracle_registration=args.oracle_registration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_per_sample_csv(out / "eval_samples.csv", results)
    rows = write_eval_csv(out / "eval.csv", results.by_category())
    manifest.add("outputs", out / "eval.csv")
    manifest.add("outputs", out / "eval_samples.csv")
    log.info("average: %s", {k: round(v, 4) for k, v in rows[-1].items() if isinstance(v, float)})


def cmd_stress(args, manifest: RunManifest) -> None:
    from .checkpoint import load_model
    from .evaluation import stress_settings, stress_sweep, write_stress_csv

    if not args.noise and not args.outliers:
        raise RuntimeError("give at least one --noise level or --outliers count")
    model, _ = load_model(args.checkpoint)
    manifest.add("inputs", args.data)
    manifest.add("inputs", args.checkpoint)
    pairs = _eval_samples(args, model)
    settings = stress_settings(args.noise or (), args.outliers or (), args.filter)
    rows = stress_sweep(model, pairs, settings, seed=args.seed, flow=args.flow)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_stress_csv(out / "stress.csv", rows)
    manifest.add("outputs", out / "stress.csv")


def cmd_plot(args, manifest: RunManifest) -> None:
    from .plotting import plot_runs

    for r in args.runs:
        manifest.add("inputs", r)
    merged = plot_runs(args.runs, args.out, metric=args.metric)
    manifest.add("outputs", args.out)
    manifest.add("outputs", merged)


# --- parser ---------------------------------------------------------------


def _split_ratios(text: str):
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or any(p < 0 for p in parts) or abs(sum(parts) - 1) > 1e-9:
        raise argparse.ArgumentTypeError("split must be three nonnegative ratios summing to 1")
    return parts


def _eta(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 0.8:
        raise argparse.ArgumentTypeError("overlap must lie in [0, 0.8]")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("value must be >= 0")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("value must be >= 0")
    return v


def _plot_file(text: str) -> str:
    if Path(text).suffix not in (".png", ".svg", ".pdf"):
        raise argparse.ArgumentTypeError("--out must end in .png, .svg or .pdf")
    return text


def build_parser() -> argparse.ArgumentParser:
    from .shapes import CATEGORIES

    parser = argparse.ArgumentParser(prog="telereg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    parser.add_argument("--json-logs", action="store_true", help="log one JSON object per line")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-shapes", help="write procedural canonical shapes (16384-point .xyz)")
    p.add_argument("--out", required=True)
    p.add_argument("--category", default="all", choices=("all",) + CATEGORIES)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_shapes)

    p = sub.add_parser("gen-data", help="crop scan pairs from canonical shapes")
    p.add_argument("--shapes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--overlap", type=_eta, default=None, help="target overlap IoU in [0, 0.8]")
    p.add_argument("--split", type=_split_ratios, default=(0.8, 0.1, 0.1), help="train,val,test ratios")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train both networks on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("eval", "evaluate a checkpoint"), ("stress", "noise / outlier stress sweep")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--flow", choices=("both", "cr", "rc"), default="cr")
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name == "eval":
            p.add_argument("--oracle-registration", action="store_true", help="score ground-truth transforms")
            p.set_defaults(func=cmd_eval)
        else:
            p.add_argument("--noise", type=_nonneg_float, nargs="+", default=None)
            p.add_argument("--outliers", type=_nonneg_int, nargs="+", default=None)
            p.add_argument("--filter", action="store_true", help="also run each outlier count with radius filtering")
            p.add_argument("--seed", type=int, default=0)
            p.set_defaults(func=cmd_stress)

    p = sub.add_parser("plot", help="chart stress / eval / training-log CSVs")
    p.add_argument("--runs", nargs="+", required=True, help="CSV files or run directories")
    p.add_argument("--out", required=True, type=_plot_file)
    p.add_argument("--metric", default="e_theta")
    p.set_defaults(func=cmd_plot)
    return parser


def _manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command == "plot":
        return out.with_name(out.stem + ".run.json")
    return out / "run.json"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.quiet, args.json_logs)
    manifest = RunManifest(args.command, args, _manifest_path(args), seed=getattr(args, "seed", None))
    try:
        args.func(args, manifest)
    except Exception as exc:  # every runtime failure maps to exit code 1
        log.error("%s failed: %s", args.command, exc)
        log.debug("traceback", exc_info=True)
        try:
            manifest.finish("failed", str(exc))
        except OSError:
            pass
        return 1
    manifest.finish("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
