"""Procedural canonical shapes (boxes, cylinders and furniture-like composites).

These stand in for exported CAD models so the whole pipeline runs without
external data. Every shape is a surface sample of ``n`` points normalized to
the unit cube.
"""

from __future__ import annotations

import numpy as np

from .pointcloud import normalize_unit_cube

CATEGORIES = ("box", "cylinder", "table", "chair", "lamp", "plane")


class _Part:
    def area(self) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError


class _Box(_Part):
    def __init__(self, center, size):
        self.center = np.asarray(center, dtype=np.float64)
        self.size = np.asarray(size, dtype=np.float64)

    def area(self):
        sx, sy, sz = self.size
        return 2 * (sx * sy + sy * sz + sx * sz)

    def sample(self, rng, n):
        sx, sy, sz = self.size
        face_areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = rng.uniform(-0.5, 0.5, size=(n, 3))
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -0.5, 0.5)
        pts[np.arange(n), axis] = sign
        return pts * self.size + self.center


class _Cylinder(_Part):
    """Capped cylinder along the y axis; ``top_radius`` allows a frustum."""

    def __init__(self, center, radius, height, top_radius=None, caps=True):
        self.center = np.asarray(center, dtype=np.float64)
        self.r0 = float(radius)
        self.r1 = float(radius if top_radius is None else top_radius)
        self.h = float(height)
        self.caps = caps

    def _areas(self):
        slant = np.hypot(self.h, self.r1 - self.r0)
        side = np.pi * (self.r0 + self.r1) * slant
        caps = np.pi * (self.r0**2 + self.r1**2) if self.caps else 0.0
        return side, caps

    def area(self):
        return float(sum(self._areas()))

    def sample(self, rng, n):
        side, caps = self._areas()
        n_side = rng.binomial(n, side / (side + caps)) if caps > 0 else n
        theta = rng.uniform(0, 2 * np.pi, n)
        # area-uniform height on a frustum: radius varies linearly with v
        u = rng.uniform(0, 1, n_side)
        if abs(self.r1 - self.r0) < 1e-9:
            v = u
        else:
            r0, r1 = self.r0, self.r1
            v = (np.sqrt(r0**2 + u * (r1**2 - r0**2)) - r0) / (r1 - r0)
        r_side = self.r0 + (self.r1 - self.r0) * v
        y_side = (v - 0.5) * self.h
        n_cap = n - n_side
        top = rng.uniform(0, 1, n_cap) < self.r1**2 / (self.r0**2 + self.r1**2 + 1e-12)
        r_cap = np.sqrt(rng.uniform(0, 1, n_cap)) * np.where(top, self.r1, self.r0)
        y_cap = np.where(top, 0.5 * self.h, -0.5 * self.h)
        r = np.concatenate([r_side, r_cap])
        y = np.concatenate([y_side, y_cap])
        pts = np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)
        return pts + self.center


def _sample_parts(parts: list[_Part], rng: np.random.Generator, n: int) -> np.ndarray:
    areas = np.array([p.area() for p in parts])
    counts = rng.multinomial(n, areas / areas.sum())
    return np.concatenate([p.sample(rng, int(c)) for p, c in zip(parts, counts) if c > 0])


def _box(rng):
    return [_Box([0, 0, 0], rng.uniform([0.4, 0.3, 0.2], [1.0, 0.8, 0.6]))]


def _cylinder(rng):
    return [_Cylinder([0, 0, 0], rng.uniform(0.15, 0.35), rng.uniform(0.6, 1.0), top_radius=rng.uniform(0.1, 0.35))]


def _table(rng):
    w, d = rng.uniform(0.8, 1.0), rng.uniform(0.4, 0.7)
    h, t, leg = rng.uniform(0.4, 0.7), rng.uniform(0.04, 0.08), rng.uniform(0.04, 0.08)
    parts = [_Box([0, h, 0], [w, t, d])]
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts.append(_Box([sx * (w - leg) / 2, h / 2, sz * (d - leg) / 2], [leg, h, leg]))
    return parts


def _chair(rng):
    w, d = rng.uniform(0.4, 0.55), rng.uniform(0.4, 0.55)
    h, back, t, leg = rng.uniform(0.35, 0.5), rng.uniform(0.35, 0.6), 0.05, rng.uniform(0.04, 0.06)
    parts = [
        _Box([0, h, 0], [w, t, d]),
        _Box([0, h + back / 2, -(d - t) / 2], [w, back, t]),
    ]
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts.append(_Box([sx * (w - leg) / 2, h / 2, sz * (d - leg) / 2], [leg, h, leg]))
    return parts


def _lamp(rng):
    base_h, pole_h = rng.uniform(0.03, 0.08), rng.uniform(0.5, 0.9)
    shade_h = rng.uniform(0.2, 0.35)
    arm = rng.uniform(0.0, 0.25)
    return [
        _Cylinder([0, base_h / 2, 0], rng.uniform(0.15, 0.25), base_h),
        _Cylinder([0, base_h + pole_h / 2, 0], 0.025, pole_h, caps=False),
        _Box([arm / 2, base_h + pole_h, 0], [arm + 0.03, 0.03, 0.03]),
        _Cylinder([arm, base_h + pole_h - shade_h / 3, 0], rng.uniform(0.15, 0.25), shade_h, top_radius=rng.uniform(0.05, 0.12)),
    ]


def _plane(rng):
    length, body = rng.uniform(0.8, 1.0), rng.uniform(0.06, 0.1)
    span, chord = rng.uniform(0.7, 1.0), rng.uniform(0.15, 0.25)
    wing_pos = rng.uniform(-0.1, 0.1)
    fuselage = _Cylinder([0, 0, 0], body, length, top_radius=body * 0.6)
    # fuselage runs along y; wings span x, tail fin sticks out in z
    return [
        fuselage,
        _Box([0, wing_pos, 0], [span, chord, 0.03]),
        _Box([0, -length / 2 + 0.06, 0], [span * 0.35, 0.08, 0.02]),
        _Box([0, -length / 2 + 0.06, 0.1], [0.02, 0.1, 0.2]),
    ]


_BUILDERS = {
    "box": _box,
    "cylinder": _cylinder,
    "table": _table,
    "chair": _chair,
    "lamp": _lamp,
    "plane": _plane,
}


def make_shape(category: str, rng: np.random.Generator, n: int = 16384) -> np.ndarray:
    """Surface sample of a random instance of ``category``, normalized to the unit cube."""
    try:
        builder = _BUILDERS[category]
    except KeyError:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}") from None
    pts = _sample_parts(builder(rng), rng, n)
    return normalize_unit_cube(pts)[0]
