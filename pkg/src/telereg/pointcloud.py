"""Point-cloud values and the sampling / normalization / set operations on them.

A point cloud is an ``(N, 3)`` float array. Clouds are ordered: union keeps
``a`` before ``b`` and FPS returns points in selection order, so the first
``k`` points of an FPS result are themselves the FPS result for ``k``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

PCF_MAGIC = b"PCF1"


class DegenerateInputError(ValueError):
    pass


class InsufficientPointsError(ValueError):
    pass


def as_cloud(pc, allow_empty: bool = False) -> np.ndarray:
    pc = np.asarray(pc, dtype=np.float64)
    if pc.ndim != 2 or pc.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (N, 3), got {pc.shape}")
    if not allow_empty and len(pc) == 0:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pc)):
        raise ValueError("point cloud has non-finite coordinates")
    return pc


@dataclass(frozen=True, eq=False)
class Normalization:
    """Records ``normalized = (original - center) * scale``."""

    center: np.ndarray
    scale: float

    def apply(self, pc) -> np.ndarray:
        return (np.asarray(pc, dtype=np.float64) - self.center) * self.scale

    def invert(self, pc) -> np.ndarray:
        return np.asarray(pc, dtype=np.float64) / self.scale + self.center


def normalize_unit_cube(pc) -> tuple[np.ndarray, Normalization]:
    """Center the bounding box at the origin and scale its longest side to 1."""
    pc = as_cloud(pc)
    lo, hi = pc.min(axis=0), pc.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateInputError("cloud has zero extent")
    norm = Normalization(center=(lo + hi) / 2.0, scale=1.0 / extent)
    return norm.apply(pc), norm


def center_at_origin(pc) -> tuple[np.ndarray, np.ndarray]:
    pc = as_cloud(pc)
    offset = pc.mean(axis=0)
    return pc - offset, offset


@numba.njit(cache=True)
def _fps_kernel(points, n, start):
    m = points.shape[0]
    xs = points[:, 0].copy()
    ys = points[:, 1].copy()
    zs = points[:, 2].copy()
    out = np.empty(n, np.int64)
    # squared distance to the selected set; -1 marks selected points
    dist = np.full(m, np.inf)
    cur = start
    for k in range(n):
        out[k] = cur
        dist[cur] = -1.0
        px, py, pz = xs[cur], ys[cur], zs[cur]
        best = -1.0
        best_i = -1
        for i in range(m):
            di = dist[i]
            if di < 0.0:
                continue
            dx = xs[i] - px
            dy = ys[i] - py
            dz = zs[i] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < di:
                di = d
                dist[i] = d
            if di > best:
                best = di
                best_i = i
        cur = best_i
    return out


def fps_indices(pc, n: int, start: int = 0) -> np.ndarray:
    """Indices chosen by farthest-point sampling, in selection order.

    Ties go to the lowest index, so the result is a deterministic function of
    ``(pc, n, start)``.
    """
    pc = np.ascontiguousarray(pc, dtype=np.float64)
    if n > len(pc):
        raise InsufficientPointsError(f"cannot sample {n} points from a cloud of {len(pc)}")
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= start < len(pc):
        raise IndexError(f"start index {start} out of range")
    return _fps_kernel(pc, int(n), int(start))


def downsample_fps(pc, n: int, seed: int | None = None, *, start: int | None = None) -> np.ndarray:
    """Farthest-point downsample to exactly ``n`` points.

    The first point is ``start`` if given, otherwise drawn from ``seed``
    (index 0 when both are None).
    """
    pc = as_cloud(pc)
    if n > len(pc):
        raise InsufficientPointsError(f"cannot sample {n} points from a cloud of {len(pc)}")
    if start is None:
        start = 0 if seed is None else int(np.random.default_rng(seed).integers(len(pc)))
    return pc[fps_indices(pc, n, start)]


def union(a, b) -> np.ndarray:
    a = as_cloud(a)
    b = as_cloud(b)
    return np.concatenate([a, b], axis=0)


def voxel_keys(pc, resolution: int = 32) -> np.ndarray:
    """Sorted unique linear indices of voxels occupied in a grid over [-1, 1]^3."""
    pc = as_cloud(pc, allow_empty=True)
    cells = np.floor((pc + 1.0) * 0.5 * resolution).astype(np.int64)
    cells = np.clip(cells, 0, resolution - 1)
    keys = (cells[:, 0] * resolution + cells[:, 1]) * resolution + cells[:, 2]
    return np.unique(keys)


def voxel_iou(a, b, resolution: int = 32) -> float:
    ka = voxel_keys(a, resolution)
    kb = voxel_keys(b, resolution)
    union_size = len(np.union1d(ka, kb))
    if union_size == 0:
        return 1.0
    return len(np.intersect1d(ka, kb, assume_unique=True)) / union_size


@numba.njit(cache=True)
def _badoiu_clarkson(points, center, iterations):
    m = points.shape[0]
    best_c = center.copy()
    best_r2 = np.inf
    c = center.copy()
    for it in range(1, iterations + 2):
        far = 0
        far_d2 = -1.0
        for i in range(m):
            dx = points[i, 0] - c[0]
            dy = points[i, 1] - c[1]
            dz = points[i, 2] - c[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 > far_d2:
                far_d2 = d2
                far = i
        if far_d2 < best_r2:
            best_r2 = far_d2
            best_c[:] = c
        for k in range(3):
            c[k] += (points[far, k] - c[k]) / (it + 1)
    return best_c, np.sqrt(best_r2)


def bounding_sphere(pc, iterations: int = 200) -> tuple[np.ndarray, float]:
    """Approximate minimal enclosing sphere.

    Ritter's two-pass guess seeds a Badoiu-Clarkson refinement (step toward
    the farthest point with a shrinking step); the best center seen wins and
    the radius is the true max distance from it, so every point is contained.
    """
    pc = as_cloud(pc)
    if len(pc) == 1:
        return pc[0].copy(), 0.0
    p = pc[0]
    q = pc[np.argmax(((pc - p) ** 2).sum(1))]
    r = pc[np.argmax(((pc - q) ** 2).sum(1))]
    center, radius = _badoiu_clarkson(np.ascontiguousarray(pc), (q + r) / 2.0, int(iterations))
    return center, float(radius)


# --- file formats ---------------------------------------------------------


def write_xyz(path, pc) -> None:
    pc = as_cloud(pc, allow_empty=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        # tolist() yields Python floats, whose repr is the shortest round-trip form
        fh.writelines(f"{x!r} {y!r} {z!r}\n" for x, y, z in pc.tolist())


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            rows.append([float(v) for v in parts])
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_pcf(path, pc) -> None:
    """Binary format: b"PCF1", little-endian u32 count, count*3 float32."""
    pc = as_cloud(pc, allow_empty=True)
    with open(path, "wb") as fh:
        fh.write(PCF_MAGIC)
        fh.write(struct.pack("<I", len(pc)))
        fh.write(pc.astype("<f4").tobytes(order="C"))


def read_pcf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != PCF_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    (count,) = struct.unpack("<I", data[4:8])
    body = data[8:]
    if len(body) != count * 12:
        raise ValueError(f"{path}: expected {count * 12} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(np.float64)


def load_cloud(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".pcf":
        return read_pcf(path)
    return read_xyz(path)


def save_cloud(path, pc) -> None:
    path = Path(path)
    if path.suffix == ".pcf":
        write_pcf(path, pc)
    else:
        write_xyz(path, pc)
