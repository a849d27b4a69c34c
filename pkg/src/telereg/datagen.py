"""Synthetic scan pairs with ground truth, plus noise / outlier stress procedures.

A scan pair is made by cutting two spheres out of a canonical shape,
farthest-point downsampling each cut, centering it and rotating it randomly.
Ground-truth transforms follow ``M_k = R_k T_k`` (center, then rotate) and
the relative transforms ``M21 = M1 M2^-1`` (registers part 2 onto part 1)
and ``M12 = M2 M1^-1``.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, compose, quat_conjugate, quat_to_matrix, random_rotation
from .pointcloud import as_cloud, bounding_sphere, fps_indices, voxel_iou

log = logging.getLogger(__name__)

SHAPE_POINTS = 16384
LEVELS = (128, 512, 2048)
OVERLAP_CENTERS = (np.array([0.0, 0.75, 0.0]), np.array([0.0, -0.75, 0.0]))


class UngeneratableShapeError(RuntimeError):
    pass


class InvalidStressSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_points: int = 2048
    levels: tuple = LEVELS
    min_part_points: int = 4096
    min_center_distance: float = 0.3
    radius_range: tuple = (0.3, 1.3)
    max_attempts: int = 200
    iou_resolution: int = 32


@dataclass(frozen=True, eq=False)
class CropSpec:
    center: np.ndarray
    radius: float

    def to_dict(self):
        return {"center": [float(v) for v in self.center], "radius": float(self.radius)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], dtype=np.float64), float(d["radius"]))


@dataclass(eq=False)
class ScanPair:
    """One sample. Parts and missing-part levels are expressed in their part's frame.

    ``gt_missing_cr_k`` is the complement of crop ``k`` alone; ``gt_missing_rc_k``
    is the complement of both crops together. Index arrays record provenance
    as row indices into ``gt_shape``.
    """

    p1: np.ndarray
    p2: np.ndarray
    gt_shape: np.ndarray
    m1: RigidTransform
    m2: RigidTransform
    m12_gt: RigidTransform
    m21_gt: RigidTransform
    r1o_gt: np.ndarray
    r2o_gt: np.ndarray
    gt_missing_cr_1: list
    gt_missing_cr_2: list
    gt_missing_rc_1: list
    gt_missing_rc_2: list
    overlap_iou: float
    crop1: CropSpec
    crop2: CropSpec
    provenance: dict = field(default_factory=dict)
    category: str = ""
    shape_id: str = ""
    seed: int = 0


def derive_seed(global_seed: int, *keys) -> int:
    """Stable 63-bit seed from a global seed and identifying keys.

    Independent of process, worker count and ``PYTHONHASHSEED``.
    """
    text = "/".join([str(int(global_seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1


def _random_unit(rng: np.random.Generator, size=None) -> np.ndarray:
    shape = (3,) if size is None else (size, 3)
    v = rng.standard_normal(shape)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    norm = np.where(norm < 1e-12, 1.0, norm)
    return v / norm


def crop_by_sphere(shape, spec: CropSpec) -> tuple[np.ndarray, np.ndarray]:
    shape = as_cloud(shape, allow_empty=True)
    mask = crop_mask(shape, spec)
    return shape[mask], shape[~mask]


def crop_mask(shape, spec: CropSpec) -> np.ndarray:
    return np.linalg.norm(shape - spec.center, axis=1) <= spec.radius


def _counts_ok(mask1, mask2, config: GenConfig) -> bool:
    limit = config.min_part_points
    finest = max(config.levels)
    for m in (mask1, mask2):
        if m.sum() <= limit or (~m).sum() <= limit:
            return False
    return (~(mask1 | mask2)).sum() >= finest


def _overlap_counts_ok(mask1, mask2, config: GenConfig) -> bool:
    # fixed centers make high overlap incompatible with large complements;
    # complements only need to be nonempty here
    if mask1.sum() <= config.min_part_points or mask2.sum() <= config.min_part_points:
        return False
    return bool((~mask1).any() and (~mask2).any() and (~(mask1 | mask2)).any())


def _check_shape(shape) -> np.ndarray:
    shape = as_cloud(shape)
    if len(shape) < 2 * 4096:
        raise UngeneratableShapeError(f"shape has only {len(shape)} points")
    return shape


def generate_pair(shape, rng: np.random.Generator, config: GenConfig = GenConfig(), **meta) -> ScanPair:
    """Crop two spheres centered on the bounding sphere and build a scan pair.

    Rejection-samples crop spheres until the centers are at least
    ``min_center_distance`` apart, both crops and both complements have more
    than ``min_part_points`` points, and the region outside both crops holds
    enough points for the finest missing-part level.
    """
    shape = _check_shape(shape)
    bs_center, bs_radius = bounding_sphere(shape)
    lo, hi = config.radius_range
    for _ in range(config.max_attempts):
        c1 = bs_center + bs_radius * _random_unit(rng)
        c2 = bs_center + bs_radius * _random_unit(rng)
        r1, r2 = rng.uniform(lo, hi, size=2)
        if np.linalg.norm(c1 - c2) < config.min_center_distance:
            continue
        s1, s2 = CropSpec(c1, float(r1)), CropSpec(c2, float(r2))
        mask1, mask2 = crop_mask(shape, s1), crop_mask(shape, s2)
        if not _counts_ok(mask1, mask2, config):
            continue
        iou = voxel_iou(shape[mask1], shape[mask2], config.iou_resolution)
        return _assemble(shape, mask1, mask2, s1, s2, iou, rng, config, meta)
    raise UngeneratableShapeError(f"no valid crop pair after {config.max_attempts} attempts")


def iou_band(eta: float) -> tuple[float, float]:
    return 0.9 * eta, 1.1 * eta


def generate_pair_overlap(shape, eta: float, rng: np.random.Generator, config: GenConfig = GenConfig(), **meta) -> ScanPair:
    """Scan pair whose crops (fixed centers at y = +-0.75) have voxel IoU in [0.9 eta, 1.1 eta]."""
    if not 0.0 <= eta <= 0.8:
        raise ValueError(f"eta must lie in [0, 0.8], got {eta}")
    shape = _check_shape(shape)
    lo, hi = config.radius_range
    band_lo, band_hi = iou_band(eta)
    for _ in range(config.max_attempts):
        r1, r2 = rng.uniform(lo, hi, size=2)
        s1 = CropSpec(OVERLAP_CENTERS[0].copy(), float(r1))
        s2 = CropSpec(OVERLAP_CENTERS[1].copy(), float(r2))
        mask1, mask2 = crop_mask(shape, s1), crop_mask(shape, s2)
        if not _overlap_counts_ok(mask1, mask2, config):
            continue
        iou = voxel_iou(shape[mask1], shape[mask2], config.iou_resolution)
        if eta == 0.0:
            if iou != 0.0:
                continue
        elif not band_lo <= iou <= band_hi:
            continue
        return _assemble(shape, mask1, mask2, s1, s2, iou, rng, config, meta)
    raise UngeneratableShapeError(f"no crop pair with IoU in [{band_lo:.3f}, {band_hi:.3f}] after {config.max_attempts} attempts")


def _fps_subset(shape, mask, n, rng) -> np.ndarray:
    """Indices into ``shape`` of an FPS sample of the masked region, selection-ordered.

    A region with fewer than ``n`` points is taken whole and its FPS order
    repeated to length ``n``; only overlap-controlled pairs can hit this.
    """
    region = np.flatnonzero(mask)
    start = int(rng.integers(len(region)))
    k = min(n, len(region))
    order = region[fps_indices(shape[region], k, start)]
    return order if k == n else np.resize(order, n)


def _assemble(shape, mask1, mask2, s1, s2, iou, rng, config: GenConfig, meta) -> ScanPair:
    n = config.n_points
    finest = max(config.levels)
    idx1 = _fps_subset(shape, mask1, n, rng)
    idx2 = _fps_subset(shape, mask2, n, rng)

    transforms = []
    for idx in (idx1, idx2):
        centroid = shape[idx].mean(axis=0)
        q = random_rotation(rng)
        # M = R T: translate the part to the origin, then rotate about it
        transforms.append(RigidTransform(q, -(quat_to_matrix(q) @ centroid)))
    m1, m2 = transforms

    miss1 = _fps_subset(shape, ~mask1, finest, rng)
    miss2 = _fps_subset(shape, ~mask2, finest, rng)
    miss12 = _fps_subset(shape, ~(mask1 | mask2), finest, rng)

    def levels(m, idx):
        return [m.apply(shape[idx[:k]]) for k in config.levels]

    return ScanPair(
        p1=m1.apply(shape[idx1]),
        p2=m2.apply(shape[idx2]),
        gt_shape=shape,
        m1=m1,
        m2=m2,
        m12_gt=compose(m2, m1.inverse()),
        m21_gt=compose(m1, m2.inverse()),
        r1o_gt=quat_conjugate(m1.q),
        r2o_gt=quat_conjugate(m2.q),
        gt_missing_cr_1=levels(m1, miss1),
        gt_missing_cr_2=levels(m2, miss2),
        gt_missing_rc_1=levels(m1, miss12),
        gt_missing_rc_2=levels(m2, miss12),
        overlap_iou=float(iou),
        crop1=s1,
        crop2=s2,
        provenance={
            "part1": idx1,
            "part2": idx2,
            "missing_cr1": miss1,
            "missing_cr2": miss2,
            "missing_rc": miss12,
        },
        **meta,
    )


# --- stress procedures ----------------------------------------------------


def add_noise(pc, zeta: float, rng: np.random.Generator) -> np.ndarray:
    """Add an independent uniform [0, zeta] offset to every coordinate."""
    if zeta < 0:
        raise InvalidStressSpecError("noise level must be >= 0")
    pc = as_cloud(pc)
    return pc + rng.uniform(0.0, zeta, size=pc.shape)


def add_outliers(pc, k: int, rng: np.random.Generator, return_indices: bool = False):
    """Displace ``k`` distinct points by a random direction and a length in [0.1, 0.5]."""
    pc = as_cloud(pc)
    if k < 0 or k > len(pc):
        raise InvalidStressSpecError(f"cannot displace {k} of {len(pc)} points")
    out = pc.copy()
    idx = np.sort(rng.choice(len(pc), size=k, replace=False)) if k else np.empty(0, np.int64)
    if k:
        lengths = rng.uniform(0.1, 0.5, size=k)
        out[idx] += _random_unit(rng, k) * lengths[:, None]
    return (out, idx) if return_indices else out


def radius_outlier_filter(pc, radius: float = 0.05, min_neighbors: int = 4, return_mask: bool = False):
    """Keep points with at least ``min_neighbors`` other points within ``radius``."""
    if radius <= 0 or min_neighbors < 1:
        raise InvalidStressSpecError("radius must be > 0 and min_neighbors >= 1")
    pc = as_cloud(pc, allow_empty=True)
    if len(pc) == 0:
        mask = np.zeros(0, dtype=bool)
    else:
        counts = cKDTree(pc).query_ball_point(pc, r=radius, return_length=True) - 1
        mask = counts >= min_neighbors
    return (pc[mask], mask) if return_mask else pc[mask]


@dataclass(frozen=True)
class StressSpec:
    noise_level: float = 0.0
    outlier_count: int = 0
    filter_enabled: bool = False
    filter_radius: float = 0.05
    filter_min_neighbors: int = 4

    def __post_init__(self):
        if self.noise_level < 0 or self.outlier_count < 0:
            raise InvalidStressSpecError("noise level and outlier count must be >= 0")

    def apply(self, pc, rng: np.random.Generator) -> np.ndarray:
        out = add_noise(pc, self.noise_level, rng) if self.noise_level > 0 else as_cloud(pc)
        if self.outlier_count:
            out = add_outliers(out, self.outlier_count, rng)
        if self.filter_enabled:
            out = radius_outlier_filter(out, self.filter_radius, self.filter_min_neighbors)
        return out
