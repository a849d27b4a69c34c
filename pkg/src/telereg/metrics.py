"""Point-set distances and the registration / completion error measures.

EMD here is the mean Euclidean length of matched pairs under the optimal
bijection, so values do not depend on cardinality. ``emd_exact`` solves the
assignment with a Hungarian-type solver and serves as the oracle;
``emd_approx`` runs an epsilon-scaling auction and is what training uses.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numba
import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .geometry import RigidTransform, angle_deg
from .plans import planned

DEFAULT_AUCTION_PHASES = 6
_AUCTION_FACTOR = 8.0
EXACT_LIMIT = 512


class UnequalSizeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MatchPlan:
    """``a[i]`` is matched to ``b[assignment[i]]``."""

    assignment: np.ndarray
    cost: float


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"incompatible point arrays {a.shape} and {b.shape}")
    if len(a) != len(b):
        raise UnequalSizeError(f"EMD needs equal cardinalities, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise ValueError("empty point sets")
    return a, b


def chamfer(a, b) -> float:
    """Symmetric chamfer distance with squared nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs nonempty clouds")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def emd_exact(a, b) -> tuple[float, MatchPlan]:
    a, b = _check_pair(a, b)
    if len(a) > EXACT_LIMIT:
        raise ValueError(f"emd_exact is limited to {EXACT_LIMIT} points, got {len(a)}")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(len(a), dtype=np.int64)
    assignment[rows] = cols
    value = float(cost[rows, cols].mean())
    return value, MatchPlan(assignment, value)


@numba.njit(cache=True)
def _auction_kernel(a, b, phases, factor):
    n = a.shape[0]
    cost = np.empty((n, n))
    cmax = 0.0
    for i in range(n):
        for j in range(n):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            dz = a[i, 2] - b[j, 2]
            c = math.sqrt(dx * dx + dy * dy + dz * dz)
            cost[i, j] = c
            if c > cmax:
                cmax = c
    assign = np.arange(n)
    if cmax == 0.0 or n == 1:
        return assign
    prices = np.zeros(n)
    owner = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    eps = cmax / 4.0
    for phase in range(phases):
        owner[:] = -1
        assign[:] = -1
        for i in range(n):
            queue[i] = n - 1 - i
        top = n
        while top > 0:
            top -= 1
            i = queue[top]
            best = -1e300
            second = -1e300
            best_j = 0
            for j in range(n):
                v = -cost[i, j] - prices[j]
                if v > best:
                    second = best
                    best = v
                    best_j = j
                elif v > second:
                    second = v
            prices[best_j] += best - second + eps
            prev = owner[best_j]
            if prev >= 0:
                assign[prev] = -1
                queue[top] = prev
                top += 1
            owner[best_j] = i
            assign[i] = best_j
        eps /= factor
    return assign


def auction_assignment(a, b, iterations: int = DEFAULT_AUCTION_PHASES) -> np.ndarray:
    """Near-optimal assignment by Bertsekas' auction with epsilon scaling.

    ``iterations`` is the number of epsilon phases; epsilon starts at a quarter
    of the largest pairwise distance and shrinks by 8x per phase. The mean
    matched distance is within the final epsilon of optimal.
    """
    a, b = _check_pair(a, b)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    return _auction_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b), int(iterations), _AUCTION_FACTOR)


def emd_approx(a, b, iterations: int = DEFAULT_AUCTION_PHASES) -> float:
    a, b = _check_pair(a, b)
    perm = auction_assignment(a, b, iterations)
    return float(np.linalg.norm(a - b[perm], axis=1).mean())


def emd_loss(a: torch.Tensor, b: torch.Tensor, iterations: int = DEFAULT_AUCTION_PHASES) -> torch.Tensor:
    """Batched, differentiable auction EMD for ``(B, n, 3)`` tensors; returns ``(B,)``.

    The assignment is computed without gradient; the returned cost is the mean
    matched distance under that assignment, so gradients flow to both inputs.
    """
    if a.shape != b.shape:
        raise UnequalSizeError(f"EMD needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    a_np = a.detach().to(torch.float64).cpu().numpy()
    b_np = b.detach().to(torch.float64).cpu().numpy()
    perms = [
        planned(lambda i=i: auction_assignment(a_np[i], b_np[i], iterations))
        for i in range(a.shape[0])
    ]
    idx = torch.as_tensor(np.stack(perms), device=a.device)
    matched = torch.gather(b, 1, idx.unsqueeze(-1).expand(-1, -1, 3))
    return torch.linalg.vector_norm(a - matched, dim=-1).mean(-1)


def emd(a, b) -> float:
    """Metric-grade EMD: exact up to ``EXACT_LIMIT`` points, fine auction beyond."""
    a, b = _check_pair(a, b)
    if len(a) <= EXACT_LIMIT:
        return emd_exact(a, b)[0]
    return emd_approx(a, b, iterations=DEFAULT_AUCTION_PHASES + 1)


def d_emd_multilevel(gen: Sequence, gt: Sequence) -> float:
    if len(gen) != len(gt):
        raise ValueError(f"level count mismatch: {len(gen)} vs {len(gt)}")
    for g, t in zip(gen, gt):
        if len(g) != len(t):
            raise UnequalSizeError(f"level cardinality mismatch: {len(g)} vs {len(t)}")
    return float(np.mean([emd(g, t) for g, t in zip(gen, gt)]))


def d_cd_multilevel(gen: Sequence, gt: Sequence) -> float:
    if len(gen) != len(gt):
        raise ValueError(f"level count mismatch: {len(gen)} vs {len(gt)}")
    return float(np.mean([chamfer(g, t) for g, t in zip(gen, gt)]))


# --- evaluation records ---------------------------------------------------


@dataclass
class EvalRecord:
    e_theta: float = 0.0
    e_t: float = 0.0
    e_emd_g: float = 0.0
    e_emd_f: float = 0.0
    e_cd_g: float = 0.0
    e_cd_f: float = 0.0

    @classmethod
    def mean(cls, records: Sequence["EvalRecord"]) -> "EvalRecord":
        if not records:
            raise ValueError("no records to average")
        names = [f.name for f in fields(cls)]
        return cls(**{k: float(np.mean([getattr(r, k) for r in records])) for k in names})

    def as_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = tuple(f.name for f in fields(EvalRecord))
EVAL_CSV_HEADER = ("category",) + METRIC_NAMES + ("n_samples",)


def eval_registration(
    pred12: RigidTransform, pred21: RigidTransform, gt12: RigidTransform, gt21: RigidTransform
) -> tuple[float, float]:
    """Mean rotation angle error (degrees) and mean translation L2 error x 1e3."""
    e_theta = (angle_deg(pred12.q, gt12.q) + angle_deg(pred21.q, gt21.q)) / 2.0
    e_t = (np.linalg.norm(pred12.t - gt12.t) + np.linalg.norm(pred21.t - gt21.t)) / 2.0 * 1e3
    return float(e_theta), float(e_t)


def eval_completion(gen_levels, gen_full, gt_levels, gt_full) -> tuple[float, float, float, float]:
    """Completion errors over a pair of parts.

    Each argument holds one entry per part: ``gen_levels[k]`` is the level
    triple generated for part ``k`` and ``gen_full[k]`` its full completion.
    Returns ``(e_emd_g, e_emd_f, e_cd_g, e_cd_f)``; EMD terms scaled by 1e3,
    chamfer terms by 1e4.
    """
    if not (len(gen_levels) == len(gen_full) == len(gt_levels) == len(gt_full)):
        raise ValueError("all inputs need one entry per part")
    k = len(gen_levels)
    e_emd_g = sum(d_emd_multilevel(g, t) for g, t in zip(gen_levels, gt_levels)) / k * 1e3
    e_emd_f = sum(emd(g, t) for g, t in zip(gen_full, gt_full)) / k * 1e3
    e_cd_g = sum(d_cd_multilevel(g, t) for g, t in zip(gen_levels, gt_levels)) / k * 1e4
    e_cd_f = sum(chamfer(g, t) for g, t in zip(gen_full, gt_full)) / k * 1e4
    return e_emd_g, e_emd_f, e_cd_g, e_cd_f


def category_table(records: dict[str, list[EvalRecord]]) -> list[dict]:
    """Per-category mean rows plus an ``average`` row over categories."""
    rows = []
    means = []
    for category in sorted(records):
        recs = records[category]
        m = EvalRecord.mean(recs)
        means.append(m)
        rows.append({"category": category, **m.as_dict(), "n_samples": len(recs)})
    if means:
        avg = EvalRecord.mean(means)
        total = sum(len(r) for r in records.values())
        rows.append({"category": "average", **avg.as_dict(), "n_samples": total})
    return rows


def write_eval_csv(path, records: dict[str, list[EvalRecord]]) -> list[dict]:
    rows = category_table(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_CSV_HEADER, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
