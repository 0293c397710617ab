# features/matching.py

"""
Optimal one-to-one assignment between predicted queries and ground-truth
material segments (Kuhn-Munkres with row/column potentials), and the
class-probability + Dice matching cost.
"""

import logging
from dataclasses import dataclass

import numpy as np

from util.errors import EmptyMatrixError, ShapeError, ValidationError
from util.numerics import check_finite

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray

    def __post_init__(self):
        if self.costs.ndim != 2:
            raise ShapeError(f"cost matrix must be 2-D, got {self.costs.shape}")
        if self.costs.size == 0:
            raise EmptyMatrixError("cost matrix is empty")
        check_finite(self.costs, "cost matrix")

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _kuhn_munkres(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Square min-cost assignment, O(n^3). Returns col_of_row and the row/column
    potentials u, v with a[i, j] - u[i] - v[j] >= 0, tight on the assignment.
    Potential-based formulation, 1-indexed internally.
    """
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            cols = np.nonzero(free)[0] + 1
            better = cur[cols - 1] < minv[cols]
            minv[cols[better]] = cur[cols - 1][better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def _pad_square(c: np.ndarray) -> np.ndarray:
    n_q, n_t = c.shape
    n = max(n_q, n_t)
    if n_q == n_t:
        return c.astype(np.float64, copy=True)
    padded = np.full((n, n), float(c.max()) + 1.0)
    padded[:n_q, :n_t] = c
    return padded


def _augment(row, tight, cols, match, seen) -> bool:
    for col in cols:
        if tight[row, col] and col not in seen:
            seen.add(col)
            if col not in match or _augment(match[col], tight, cols, match, seen):
                match[col] = row
                return True
    return False


def _has_perfect_matching(tight: np.ndarray, rows: list[int], cols: list[int]) -> bool:
    match = {}
    return all(_augment(r, tight, cols, match, set()) for r in rows)


def hungarian(c: CostMatrix) -> Assignment:
    """
    Globally optimal one-to-one assignment. Rectangular matrices are padded with
    max_entry + 1. Among optimal assignments the lexicographically smallest
    (query, target) pair list is returned.

    Every optimal assignment uses only edges with zero reduced cost under the
    optimal potentials, so the tie-break walks the rows in order and fixes each
    to the smallest tight column that still leaves a perfect matching of tight
    edges for the remaining rows.
    """
    costs = np.asarray(c.costs, dtype=np.float64)
    n_q, n_t = costs.shape
    a = _pad_square(costs)
    n = a.shape[0]
    _, u, v = _kuhn_munkres(a)
    tol = 1e-9 * (1.0 + float(np.abs(a).max()))
    tight = (a - u[:, None] - v[None, :]) <= tol

    cols_left = list(range(n))
    pairs = []
    for i in range(n):
        candidates = [j for j in cols_left if tight[i, j]]
        rest_rows = list(range(i + 1, n))
        chosen = None
        for j in candidates:
            rest_cols = [k for k in cols_left if k != j]
            if len(candidates) == 1 or _has_perfect_matching(tight, rest_rows, rest_cols):
                chosen = j
                break
        if chosen is None:
            raise RuntimeError("no optimal completion found; cost matrix is ill-conditioned")
        cols_left.remove(chosen)
        if i < n_q and chosen < n_t:
            pairs.append((i, chosen))

    total = float(sum(costs[i, j] for i, j in pairs))
    return Assignment(pairs=tuple(pairs), total_cost=total)


def dice(m: np.ndarray, r: np.ndarray) -> float:
    """Soft Dice 2|m.r| / (|m| + |r|); two empty masks count as a perfect match."""
    denom = float(m.sum() + r.sum())
    if denom == 0:
        return 1.0
    return 2.0 * float(np.sum(m * r)) / denom


def matching_cost(query_probs: np.ndarray, query_masks: np.ndarray, gt_segments, w_class: float = 1.0,
                  w_dice: float = 1.0) -> CostMatrix:
    """
    cost(q, t) = -w_class * p_q(class_t) + w_dice * (1 - Dice(m_q, r_t)).
    query_probs: (N_q, K) simplex rows. query_masks: (N_q, H, W) in [0, 1].
    gt_segments: list of (class_id, region) with region a boolean (H, W) array.
    """
    if query_probs.ndim != 2 or query_masks.ndim != 3 or query_probs.shape[0] != query_masks.shape[0]:
        raise ShapeError(f"query probs {query_probs.shape} and masks {query_masks.shape} are inconsistent")
    if np.any(query_probs < -SIMPLEX_TOL) or np.any(np.abs(query_probs.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValidationError("query probability rows must be simplex points")
    if not gt_segments:
        raise EmptyMatrixError("no ground-truth segments to match")
    K = query_probs.shape[1]
    n_q = query_probs.shape[0]
    costs = np.zeros((n_q, len(gt_segments)))
    for t, (class_id, region) in enumerate(gt_segments):
        if region.shape != query_masks.shape[1:]:
            raise ShapeError(f"segment region {region.shape} does not match masks {query_masks.shape[1:]}")
        if not 0 <= class_id < K:
            raise ValidationError(f"segment class {class_id} outside [0, {K})")
        r = region.astype(np.float64)
        for q in range(n_q):
            costs[q, t] = -w_class * query_probs[q, class_id] + w_dice * (1.0 - dice(query_masks[q], r))
    return CostMatrix(costs)


def segments_from_mask(mask: np.ndarray, ignore_label: int) -> list[tuple[int, np.ndarray]]:
    """One segment per material class present in the mask (material = stuff, so one region per class)."""
    return [(int(c), mask == c) for c in np.unique(mask) if c != ignore_label]
