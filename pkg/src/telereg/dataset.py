"""On-disk dataset layout.

::

    <root>/manifest.json
    <root>/<sample_id>/part1.xyz, part2.xyz, gt.xyz
    <root>/<sample_id>/missing_{cr1,cr2,rc1,rc2}_{128,512,2048}.xyz
    <root>/<sample_id>/meta.json

Transforms in ``meta.json`` use the ``{"q": [w, x, y, z], "t": [x, y, z]}``
schema. Everything written here is a pure function of the inputs and seed.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import (
    CropSpec,
    GenConfig,
    ScanPair,
    UngeneratableShapeError,
    derive_seed,
    generate_pair,
    generate_pair_overlap,
)
from .geometry import RigidTransform
from .pointcloud import read_xyz, write_xyz

log = logging.getLogger(__name__)

FORMAT = "telereg-dataset/1"
MISSING_KEYS = ("cr1", "cr2", "rc1", "rc2")
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


def _missing_attr(key: str) -> str:
    return {"cr1": "gt_missing_cr_1", "cr2": "gt_missing_cr_2", "rc1": "gt_missing_rc_1", "rc2": "gt_missing_rc_2"}[key]


def write_pair(sample_dir, pair: ScanPair, levels=(128, 512, 2048), extra: dict | None = None) -> None:
    sample_dir = Path(sample_dir)
    sample_dir.mkdir(parents=True, exist_ok=True)
    write_xyz(sample_dir / "part1.xyz", pair.p1)
    write_xyz(sample_dir / "part2.xyz", pair.p2)
    write_xyz(sample_dir / "gt.xyz", pair.gt_shape)
    for key in MISSING_KEYS:
        for n, cloud in zip(levels, getattr(pair, _missing_attr(key))):
            write_xyz(sample_dir / f"missing_{key}_{n}.xyz", cloud)
    meta = {
        "category": pair.category,
        "shape_id": pair.shape_id,
        "seed": int(pair.seed),
        "overlap_iou": float(pair.overlap_iou),
        "levels": list(levels),
        "m1": pair.m1.to_dict(),
        "m2": pair.m2.to_dict(),
        "m12_gt": pair.m12_gt.to_dict(),
        "m21_gt": pair.m21_gt.to_dict(),
        "r1o_gt": [float(v) for v in pair.r1o_gt],
        "r2o_gt": [float(v) for v in pair.r2o_gt],
        "crop1": pair.crop1.to_dict(),
        "crop2": pair.crop2.to_dict(),
        "provenance": {k: [int(i) for i in v] for k, v in pair.provenance.items()},
    }
    if extra:
        meta.update(extra)
    (sample_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def read_pair(sample_dir) -> ScanPair:
    sample_dir = Path(sample_dir)
    try:
        meta = json.loads((sample_dir / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"{sample_dir}: missing meta.json") from exc
    levels = meta["levels"]
    missing = {
        key: [read_xyz(sample_dir / f"missing_{key}_{n}.xyz") for n in levels] for key in MISSING_KEYS
    }
    return ScanPair(
        p1=read_xyz(sample_dir / "part1.xyz"),
        p2=read_xyz(sample_dir / "part2.xyz"),
        gt_shape=read_xyz(sample_dir / "gt.xyz"),
        m1=RigidTransform.from_dict(meta["m1"]),
        m2=RigidTransform.from_dict(meta["m2"]),
        m12_gt=RigidTransform.from_dict(meta["m12_gt"]),
        m21_gt=RigidTransform.from_dict(meta["m21_gt"]),
        r1o_gt=np.array(meta["r1o_gt"]),
        r2o_gt=np.array(meta["r2o_gt"]),
        gt_missing_cr_1=missing["cr1"],
        gt_missing_cr_2=missing["cr2"],
        gt_missing_rc_1=missing["rc1"],
        gt_missing_rc_2=missing["rc2"],
        overlap_iou=float(meta["overlap_iou"]),
        crop1=CropSpec.from_dict(meta["crop1"]),
        crop2=CropSpec.from_dict(meta["crop2"]),
        provenance={k: np.array(v, dtype=np.int64) for k, v in meta["provenance"].items()},
        category=meta["category"],
        shape_id=meta["shape_id"],
        seed=int(meta["seed"]),
    )


@dataclass(frozen=True)
class SampleRef:
    sample_id: str
    split: str
    path: Path


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{root}: no manifest.json")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise DatasetError(f"{path}: unsupported format {manifest.get('format')!r}")
    return manifest


def list_samples(root, split: str | None = None) -> list[SampleRef]:
    root = Path(root)
    manifest = read_manifest(root)
    refs = [SampleRef(s["id"], s["split"], root / s["id"]) for s in manifest["samples"]]
    if split is not None:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        refs = [r for r in refs if r.split == split]
    return refs


def _assign_split(seed: int, sample_id: str, ratios) -> str:
    u = derive_seed(seed, "split", sample_id) / float(2**63)
    acc = 0.0
    for name, r in zip(SPLITS, ratios):
        acc += r
        if u < acc:
            return name
    return SPLITS[-1]


def _generate_one(job):
    shape_id, shape, category, seed, eta, config = job
    rng = np.random.default_rng(seed)
    meta = {"category": category, "shape_id": shape_id, "seed": seed}
    try:
        if eta is None:
            return generate_pair(shape, rng, config, **meta)
        return generate_pair_overlap(shape, eta, rng, config, **meta)
    except UngeneratableShapeError as exc:
        return str(exc)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("TELEREG_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def build_dataset(
    shapes: list[tuple[str, np.ndarray]],
    out_dir,
    category: str,
    count: int,
    seed: int,
    eta: float | None = None,
    split_ratios=(0.8, 0.1, 0.1),
    config: GenConfig = GenConfig(),
    workers: int | None = None,
) -> dict:
    """Generate ``count`` scan pairs (cycling over ``shapes``) and write the layout.

    Shapes that cannot satisfy the crop constraints are skipped with a warning.
    Per-sample seeds come from ``derive_seed(seed, shape_id, k)``, so the
    output does not depend on the worker count.
    """
    if not shapes:
        raise DatasetError("no input shapes")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for k in range(count):
        shape_id, shape = shapes[k % len(shapes)]
        jobs.append((shape_id, shape, category, derive_seed(seed, shape_id, k), eta, config))

    workers = num_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, jobs, chunksize=4))
    else:
        results = [_generate_one(job) for job in jobs]

    samples = []
    for k, (job, result) in enumerate(zip(jobs, results)):
        if isinstance(result, str):
            log.warning("skipping shape %s (sample %d): %s", job[0], k, result)
            continue
        sample_id = f"{k:05d}_{job[0]}"
        extra = {"eta": eta} if eta is not None else None
        write_pair(out_dir / sample_id, result, config.levels, extra)
        samples.append({"id": sample_id, "split": _assign_split(seed, sample_id, split_ratios)})

    manifest = {
        "format": FORMAT,
        "category": category,
        "seed": int(seed),
        "count_requested": int(count),
        "eta": eta,
        "levels": list(config.levels),
        "n_points": config.n_points,
        "samples": samples,
        "splits": {s: [x["id"] for x in samples if x["split"] == s] for s in SPLITS},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
