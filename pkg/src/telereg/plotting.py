"""Static charts and merged CSVs from evaluation, stress and training-log files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import STRESS_CSV_HEADER  # noqa: E402
from .metrics import EVAL_CSV_HEADER  # noqa: E402
from .trainer import LOG_COLUMNS  # noqa: E402

SCHEMAS = {
    "stress": tuple(STRESS_CSV_HEADER),
    "train_log": tuple(LOG_COLUMNS),
    "eval": tuple(EVAL_CSV_HEADER),
}
# file looked up when a run directory rather than a CSV is given
DEFAULT_FILES = ("stress.csv", "train_log.csv", "eval.csv")


class SchemaError(ValueError):
    pass


def resolve_csv(path) -> Path:
    path = Path(path)
    if path.is_dir():
        for name in DEFAULT_FILES:
            if (path / name).exists():
                return path / name
        raise SchemaError(f"{path}: no {', '.join(DEFAULT_FILES)} found")
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def read_table(path) -> tuple[str, list[dict]]:
    """Return ``(schema name, rows)``; unknown headers raise ``SchemaError``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        rows = list(reader)
    for name, cols in SCHEMAS.items():
        if header == cols:
            return name, rows
    closest = min(SCHEMAS.items(), key=lambda kv: len(set(kv[1]) ^ set(header)))
    missing = [c for c in closest[1] if c not in header]
    extra = [c for c in header if c not in closest[1]]
    raise SchemaError(
        f"{path}: columns {list(header)} match no known schema; "
        f"closest is {closest[0]!r} (missing {missing}, unexpected {extra})"
    )


def _labels(paths: list[Path]) -> list[str]:
    labels = []
    for p in paths:
        base = p.parent.name or p.stem
        label = base if base not in labels else f"{base}:{p.stem}"
        k = 2
        while label in labels:
            label = f"{base}#{k}"
            k += 1
        labels.append(label)
    return labels


def _plot_stress(ax_by_kind, label, rows, metric):
    for kind, ax in ax_by_kind.items():
        for flt in ("0", "1"):
            pts = sorted((float(r["value"]), float(r[metric])) for r in rows if r["setting"] == kind and r["filter"] == flt)
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=label + (" (filtered)" if flt == "1" else ""))


def plot_runs(inputs, out, metric: str = "e_theta") -> Path:
    """Render one chart for all inputs and write ``<out stem>.csv`` next to it.

    All inputs must share a schema. Returns the merged CSV path.
    """
    if not inputs:
        raise ValueError("no input runs given")
    paths = [resolve_csv(p) for p in inputs]
    tables = [read_table(p) for p in paths]
    kinds = {k for k, _ in tables}
    if len(kinds) > 1:
        desc = ", ".join(f"{p} ({k})" for p, (k, _) in zip(paths, tables))
        raise SchemaError(f"inputs mix schemas: {desc}")
    kind = kinds.pop()
    if kind != "train_log" and metric not in SCHEMAS[kind]:
        raise SchemaError(f"metric {metric!r} is not a column of {kind} files")
    labels = _labels(paths)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)

    if kind == "stress":
        settings = sorted({r["setting"] for _, rows in tables for r in rows})
        fig, axes = plt.subplots(1, len(settings), figsize=(5 * len(settings), 4), squeeze=False)
        ax_by_kind = dict(zip(settings, axes[0]))
        for label, (_, rows) in zip(labels, tables):
            _plot_stress(ax_by_kind, label, rows, metric)
        for s, ax in ax_by_kind.items():
            ax.set_xlabel("noise level" if s == "noise" else "outlier count")
            ax.set_ylabel(metric)
            ax.legend()
    elif kind == "train_log":
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, (_, rows) in zip(labels, tables):
            ax.plot([int(r["iteration"]) for r in rows], [float(r["total"]) for r in rows], label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.set_yscale("log")
        ax.legend()
    else:
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(tables)
        for i, (label, (_, rows)) in enumerate(zip(labels, tables)):
            xs = [j + i * width for j in range(len(rows))]
            ax.bar(xs, [float(r[metric]) for r in rows], width=width, label=label)
        ax.set_xticks(range(len(tables[0][1])), [r["category"] for r in tables[0][1]], rotation=30)
        ax.set_ylabel(metric)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out, metadata={"Software": None} if out.suffix == ".png" else None)
    plt.close(fig)

    merged = out.with_suffix(".csv")
    with open(merged, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("run",) + SCHEMAS[kind])
        for label, (_, rows) in zip(labels, tables):
            for r in rows:
                writer.writerow([label] + [r[c] for c in SCHEMAS[kind]])
    return merged
