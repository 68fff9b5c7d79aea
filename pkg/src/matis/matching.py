"""Bipartite assignment and the set-prediction criterion.

``hungarian`` is a shortest-augmenting-path solver (O(n^2 m) for an n x m
problem with n <= m). The numpy criterion here is the reference
implementation: sums go through ``math.fsum`` so the loss does not depend
on proposal order. The differentiable training loss lives in
:mod:`matis.model` and is checked against this one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyMatrix, NonFiniteInput
from .structures import NO_OBJECT, FrameAnnotation, ProposalSet, RegionProposal

LOG_FLOOR = -100.0  # log(0) clamp, same convention as torch's BCELoss


@dataclass(frozen=True)
class MatchWeights:
    w_cls: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        ws = (self.w_cls, self.w_bce, self.w_dice)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("match weights must be >= 0 with at least one > 0")


def _assign_rows(cost: np.ndarray) -> np.ndarray:
    """Assign every row of an n x m matrix (n <= m) to a distinct column.

    Returns ``col_of_row``. Columns are scanned in increasing index and the
    first minimizer is kept, so ties prefer lower column indices.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> dict[int, int]:
    """Minimum-cost assignment of ground-truth columns to proposal rows.

    Returns ``{col: row}``. When there are more columns than rows only
    ``rows`` columns can be matched; the matched set is then the one that
    minimizes total cost. An empty column set yields ``{}``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionMismatch(f"cost matrix must be 2-D, got shape {cost.shape}")
    rows, cols = cost.shape
    if cols == 0:
        return {}
    if rows == 0:
        raise EmptyMatrix("no proposal rows to assign ground-truth columns to")
    if not np.isfinite(cost).all():
        raise NonFiniteInput("cost matrix has non-finite entries")
    if cols <= rows:
        row_of_col = _assign_rows(cost.T)
        return {c: int(r) for c, r in enumerate(row_of_col)}
    col_of_row = _assign_rows(cost)
    return {int(c): r for r, c in sorted(enumerate(col_of_row), key=lambda rc: rc[1])}


def assignment_cost(cost, assignment: dict[int, int]) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return math.fsum(cost[r, c] for c, r in assignment.items())


def _log(x):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(x), LOG_FLOOR)


def bce(soft: np.ndarray, target: np.ndarray) -> float:
    """Per-pixel mean binary cross-entropy."""
    p = np.asarray(soft, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    terms = -(y * _log(p) + (1.0 - y) * _log(1.0 - p))
    return math.fsum(terms) / terms.size


def dice_loss(soft: np.ndarray, target: np.ndarray) -> float:
    p = np.asarray(soft, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    num = 2.0 * math.fsum(p * y) + 1.0
    den = math.fsum(p) + math.fsum(y) + 1.0
    return 1.0 - num / den


def pair_cost(proposal: RegionProposal, gt: tuple, w: MatchWeights = MatchWeights()) -> float:
    cls, mask = gt
    mask = np.asarray(mask)
    if proposal.soft_mask.shape != mask.shape:
        raise DimensionMismatch(f"soft mask {proposal.soft_mask.shape} vs gt mask {mask.shape}")
    return (
        w.w_cls * -float(proposal.class_probs[cls])
        + w.w_bce * bce(proposal.soft_mask, mask)
        + w.w_dice * dice_loss(proposal.soft_mask, mask)
    )


def cost_matrix(proposals: ProposalSet, gt: FrameAnnotation, w: MatchWeights = MatchWeights()) -> np.ndarray:
    """All N x G pair costs at once; agrees with :func:`pair_cost` to rounding."""
    if proposals.dims != tuple(gt.dims):
        raise DimensionMismatch(f"proposal dims {proposals.dims} vs annotation dims {gt.dims}")
    n, g = proposals.n, len(gt.instances)
    if g == 0:
        return np.zeros((n, 0))
    p = proposals.soft_masks.reshape(n, -1)
    y = np.stack([m.ravel() for m in gt.masks]).astype(np.float64)
    npix = p.shape[1]
    log_p, log_q = _log(p), _log(1.0 - p)
    bce_m = -(log_p @ y.T + log_q @ (1.0 - y).T) / npix
    dice_m = 1.0 - (2.0 * (p @ y.T) + 1.0) / (p.sum(1)[:, None] + y.sum(1)[None, :] + 1.0)
    cls_m = -proposals.class_probs[:, gt.classes]
    return w.w_cls * cls_m + w.w_bce * bce_m + w.w_dice * dice_m


def set_criterion(proposals: ProposalSet, gt: FrameAnnotation, w: MatchWeights = MatchWeights()):
    """Hungarian-matched set loss for one frame.

    Returns ``(loss, assignment)`` where ``assignment`` maps gt instance
    index to proposal index. Matched proposals are pushed toward their gt
    class and mask; unmatched ones toward no-object with weight
    ``w.no_object_weight`` in the class-weighted mean.
    """
    cost = cost_matrix(proposals, gt, w)
    assignment = hungarian(cost)
    matched = {r: c for c, r in assignment.items()}
    logp = _log(proposals.class_probs)

    ce_terms, ce_weights = [], []
    for q in range(proposals.n):
        if q in matched:
            ce_terms.append(-logp[q, gt.classes[matched[q]]])
            ce_weights.append(1.0)
        else:
            ce_terms.append(w.no_object_weight * -logp[q, NO_OBJECT])
            ce_weights.append(w.no_object_weight)
    loss_cls = math.fsum(ce_terms) / math.fsum(ce_weights)

    # iterate matched pairs in gt order so the sums ignore proposal order
    pairs = sorted(assignment.items())
    if pairs:
        loss_bce = math.fsum(bce(proposals.soft_masks[r], gt.masks[c]) for c, r in pairs) / len(pairs)
        loss_dice = math.fsum(dice_loss(proposals.soft_masks[r], gt.masks[c]) for c, r in pairs) / len(pairs)
    else:
        loss_bce = loss_dice = 0.0
    loss = w.w_cls * loss_cls + w.w_bce * loss_bce + w.w_dice * loss_dice
    return loss, assignment
