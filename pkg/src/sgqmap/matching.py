"""Hierarchical bipartite matching: instance assignment, then point ordering.

Instance-level assignment minimizes class cost plus the best-ordering mean
Manhattan point distance.  Point-level assignment picks, for each matched
pair, the geometry-equivalent ordering of the ground truth (reversal for open
elements, cyclic shift and reversal for closed ones) closest to the
prediction.  Matching runs on plain numpy and is excluded from
differentiation; the losses treat it as a constant within a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import equivalent_permutations


@dataclass
class GroundTruth:
    class_id: int
    points: np.ndarray          # (n, 2) normalized
    closed: bool


@dataclass
class MatchResult:
    pred_to_gt: np.ndarray      # (N,) gt index or -1
    gt_to_pred: np.ndarray      # (G,) pred index
    orderings: list[np.ndarray]  # per gt, chosen point ordering
    total_cost: float


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every column (G) to a distinct row (M >= G).

    Returns (G,) row indices.  Jonker-Volgenant style shortest augmenting
    paths with potentials; ties resolve by scan order, so results are
    deterministic.  Non-finite costs are rejected.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    m, g = cost.shape
    if m < g:
        raise ValueError(f"need at least as many rows as columns, got {cost.shape}")
    # rows of `a` are the assigned side (the G columns of `cost`)
    a = cost.T
    n_rows, n_cols = g, m
    INF = np.inf
    u = np.zeros(n_rows + 1)
    v = np.zeros(n_cols + 1)
    match = np.full(n_cols + 1, n_rows, dtype=np.int64)   # col -> row
    for i in range(n_rows):
        match[n_cols] = i
        j0 = n_cols
        minv = np.full(n_cols + 1, INF)
        used = np.zeros(n_cols + 1, dtype=bool)
        way = np.zeros(n_cols + 1, dtype=np.int64)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[:n_cols]
            cur = a[i0, free] - u[i0] - v[:n_cols][free]
            idx = np.flatnonzero(free)
            better = cur < minv[idx]
            minv[idx[better]] = cur[better]
            way[idx[better]] = j0
            pos = np.argmin(minv[idx])
            delta = minv[idx][pos]
            j1 = idx[pos]
            upd = used
            u[match[upd]] += delta
            v[upd] -= delta
            minv[~upd] -= delta
            j0 = j1
            if match[j0] == n_rows:
                break
        while j0 != n_cols:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = np.full(n_rows, -1, dtype=np.int64)
    for j in range(n_cols):
        if match[j] != n_rows:
            row_to_col[match[j]] = j
    return row_to_col


def ordering_costs(pred_points: np.ndarray, gt: GroundTruth) -> np.ndarray:
    """(K,) mean per-point Manhattan distance for each equivalent ordering."""
    orders = equivalent_permutations(len(gt.points), gt.closed)
    permuted = gt.points[orders]                      # (K, n, 2)
    diff = np.abs(pred_points[None] - permuted)
    return diff.sum(axis=-1).mean(axis=-1)


def point_assignment(pred_points: np.ndarray, gt: GroundTruth) -> np.ndarray:
    """The equivalent GT ordering closest to the prediction (summed Manhattan)."""
    orders = equivalent_permutations(len(gt.points), gt.closed)
    costs = ordering_costs(pred_points, gt)
    return orders[int(np.argmin(costs))]


def instance_match_cost(class_probs: np.ndarray, pred_points: np.ndarray,
                        gt: GroundTruth, lambda_cls: float = 2.0,
                        lambda_pts: float = 5.0) -> float:
    """Pairwise cost: negative GT-class probability plus best-ordering
    mean Manhattan distance."""
    cls_cost = -float(class_probs[gt.class_id])
    pts_cost = float(ordering_costs(pred_points, gt).min())
    return lambda_cls * cls_cost + lambda_pts * pts_cost


def build_cost_matrix(class_probs: np.ndarray, pred_points: np.ndarray,
                      gts: list[GroundTruth], lambda_cls: float = 2.0,
                      lambda_pts: float = 5.0) -> np.ndarray:
    """(N, G) instance matching costs, vectorized over predictions."""
    n_pred = class_probs.shape[0]
    out = np.zeros((n_pred, len(gts)))
    for gi, gt in enumerate(gts):
        orders = equivalent_permutations(len(gt.points), gt.closed)
        permuted = gt.points[orders]                  # (K, n, 2)
        diff = np.abs(pred_points[:, None] - permuted[None])   # (N, K, n, 2)
        pts_cost = diff.sum(axis=-1).mean(axis=-1).min(axis=-1)
        out[:, gi] = -lambda_cls * class_probs[:, gt.class_id] + lambda_pts * pts_cost
    return out


def match_scene(class_probs: np.ndarray, pred_points: np.ndarray,
                gts: list[GroundTruth], lambda_cls: float = 2.0,
                lambda_pts: float = 5.0) -> MatchResult:
    """Instance assignment plus per-pair point orderings for one scene."""
    n_pred = class_probs.shape[0]
    if not gts:
        return MatchResult(np.full(n_pred, -1, dtype=np.int64),
                           np.zeros(0, dtype=np.int64), [], 0.0)
    if n_pred < len(gts):
        raise ValueError(f"{n_pred} predictions cannot cover {len(gts)} GT elements")
    cost = build_cost_matrix(class_probs, pred_points, gts,
                             lambda_cls, lambda_pts)
    gt_to_pred = hungarian(cost)
    pred_to_gt = np.full(n_pred, -1, dtype=np.int64)
    orderings = []
    total = 0.0
    for gi, pi in enumerate(gt_to_pred):
        pred_to_gt[pi] = gi
        orderings.append(point_assignment(pred_points[pi], gts[gi]))
        total += cost[pi, gi]
    return MatchResult(pred_to_gt, gt_to_pred, orderings, float(total))
