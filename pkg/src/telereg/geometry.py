"""Quaternion and rigid-transform algebra.

Conventions
-----------
- Quaternions are stored as float64 arrays in (w, x, y, z) order, both in
  memory and on disk.
- A rigid transform maps a point ``x`` to ``R x + t``; ``compose(a, b)``
  applies ``b`` first, so ``compose(a, b).apply(x) == a.apply(b.apply(x))``.
- ``q`` and ``-q`` are the same rotation. Every distance below respects this.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class DegenerateQuaternionError(ValueError):
    pass


class InvalidRotationError(ValueError):
    pass


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = math.sqrt(q.dot(q))
    if not np.isfinite(norm) or norm < 1e-12:
        raise DegenerateQuaternionError(f"cannot normalize quaternion {q}")
    return q / norm


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (rotation ``b`` followed by ``a``)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m) -> np.ndarray:
    """Convert a proper rotation matrix to a unit quaternion with ``w >= 0``.

    Uses Shepperd's branch selection on the largest diagonal term so the
    result stays accurate near 180 degree rotations.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidRotationError(f"expected a finite 3x3 matrix, got shape {m.shape}")
    if np.abs(m @ m.T - np.eye(3)).max() > 1e-5 or abs(np.linalg.det(m) - 1.0) > 1e-5:
        raise InvalidRotationError("matrix is not a proper rotation")

    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = 2.0 * math.sqrt(trace + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def _as_quat(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape == (3, 3):
        return matrix_to_quat(r)
    return quat_normalize(r)


def dist_q(q1, q2) -> float:
    """Sign-invariant quaternion distance, ``min(|q1 - q2|, |q1 + q2|)``."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    return float(min(np.linalg.norm(q1 - q2), np.linalg.norm(q1 + q2)))


def dist_r(r1, r2) -> float:
    """Rotation distance; each argument may be a 3x3 matrix or a quaternion."""
    return dist_q(_as_quat(r1), _as_quat(r2))


def angle_deg(q1, q2) -> float:
    """Angle in degrees of the rotation taking ``q1`` to ``q2``, in [0, 180]."""
    q1 = quat_normalize(q1)
    q2 = quat_normalize(q2)
    # parts of q1^-1 q2, grouped so that q2 = +-q1 gives an exactly zero vector;
    # atan2 keeps small angles accurate where acos of a near-1 cosine does not
    aw, ax, ay, az = q1.tolist()
    bw, bx, by, bz = q2.tolist()
    w = aw * bw + ax * bx + ay * by + az * bz
    vx = (aw * bx - bw * ax) - (ay * bz - az * by)
    vy = (aw * by - bw * ay) - (az * bx - ax * bz)
    vz = (aw * bz - bw * az) - (ax * by - ay * bx)
    return math.degrees(2.0 * math.atan2(math.sqrt(vx * vx + vy * vy + vz * vz), abs(w)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform sample on SO(3) via a normalized 4-D Gaussian."""
    while True:
        q = rng.standard_normal(4)
        if np.linalg.norm(q) > 1e-8:
            return quat_normalize(q)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation ``q`` (w, x, y, z) followed by translation ``t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotation(cls, q) -> RigidTransform:
        return cls(q, np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return self._rot.copy()

    @cached_property
    def _rot(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.t
        return m

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self._rot.T + self.t

    def inverse(self) -> RigidTransform:
        q_inv = quat_conjugate(self.q)
        return RigidTransform(q_inv, -(quat_to_matrix(q_inv) @ self.t))

    def params(self) -> np.ndarray:
        """The 12 free parameters: row-major rotation matrix then translation."""
        return np.concatenate([self.rotation_matrix.ravel(), self.t])

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        return cls(np.array(d["q"], dtype=np.float64), np.array(d["t"], dtype=np.float64))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> RigidTransform:
        return cls.from_dict(json.loads(s))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a * b``: apply ``b`` then ``a``."""
    return RigidTransform(quat_multiply(a.q, b.q), a.rotation_matrix @ b.t + a.t)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def apply(t: RigidTransform, points) -> np.ndarray:
    return t.apply(points)


def dist_m(m1: RigidTransform, m2: RigidTransform) -> float:
    """Quaternion distance plus mean squared translation error over the three axes."""
    return dist_q(m1.q, m2.q) + float(np.mean((m1.t - m2.t) ** 2))


def random_transform(rng: np.random.Generator, translation_bound: float = 0.0) -> RigidTransform:
    q = random_rotation(rng)
    if translation_bound == 0:
        t = np.zeros(3)
    else:
        t = rng.uniform(-translation_bound, translation_bound, size=3)
    return RigidTransform(q, t)
