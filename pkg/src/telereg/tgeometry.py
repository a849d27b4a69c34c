"""Batched torch counterparts of the quaternion / transform algebra.

Quaternions are ``(..., 4)`` tensors in (w, x, y, z) order, transforms are
``(q, t)`` tuples with ``t`` of shape ``(..., 3)``. Conventions match
``telereg.geometry``.
"""

from __future__ import annotations

import torch

_EPS = 1e-12


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.vector_norm(q, dim=-1, keepdim=True).clamp_min(_EPS)


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices ``(..., 3, 3)`` of unit quaternions."""
    w, x, y, z = q.unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def rotate(q: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Rotate ``(B, N, 3)`` points by ``(B, 4)`` quaternions."""
    return pts @ quat_to_matrix(q).transpose(-1, -2)


def transform(q: torch.Tensor, t: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    return rotate(q, pts) + t.unsqueeze(-2)


def compose(qa, ta, qb, tb):
    """``a o b`` (``b`` first) as a ``(q, t)`` tuple."""
    q = quat_multiply(qa, qb)
    t = (quat_to_matrix(qa) @ tb.unsqueeze(-1)).squeeze(-1) + ta
    return q, t


def dist_q(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    # vector_norm has a zero subgradient at 0, so exact matches stay finite
    d_minus = torch.linalg.vector_norm(q1 - q2, dim=-1)
    d_plus = torch.linalg.vector_norm(q1 + q2, dim=-1)
    return torch.minimum(d_minus, d_plus)


def dist_m(q1, t1, q2, t2) -> torch.Tensor:
    """Rotation distance plus mean squared translation error."""
    return dist_q(q1, q2) + ((t1 - t2) ** 2).mean(-1)
