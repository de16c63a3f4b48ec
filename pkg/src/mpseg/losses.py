"""Bipartite matching and the set-prediction losses.

Matching uses an exact Hungarian solve of the class+mask cost matrix.
Losses are dense (no point sampling): weighted cross-entropy over K+1
classes with a down-weighted no-object class, plus sigmoid BCE and
smooth dice on the matched masks. Auxiliary-query predictions skip
matching entirely and are scored against their assigned instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, bce_with_logits, logsumexp_lastdim, _sigmoid
from .decoder import LayerOutputs, binarize_masks

DICE_EPS = 1.0

MODES = ("per-layer-bipartite", "fixed-last-layer", "consistency-aux")


@dataclass
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1


@dataclass
class Assignment:
    query_to_gt: np.ndarray  # per query: GT index or -1
    total_cost: float

    def matched(self):
        rows = np.flatnonzero(self.query_to_gt >= 0)
        return rows, self.query_to_gt[rows]


def _solve_rows_leq_cols(cost: np.ndarray):
    """Potential-based Hungarian for n <= m; returns row -> col (all rows matched)."""
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)   # p[j]: row matched to column j (1-based, 0=none)
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = ~used[1:] & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free = ~used[1:]
            if free.any():
                idx = np.argmin(np.where(free, minv[1:], INF))
                delta = minv[idx + 1]
                j1 = idx + 1
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col


def hungarian(cost: np.ndarray) -> Assignment:
    """Exact minimum-cost one-to-one assignment of min(n, m) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ValueError(f"cost matrix must be 2-D and non-empty, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    n, m = cost.shape
    if n <= m:
        row_to_col = _solve_rows_leq_cols(cost)
    else:
        col_to_row = _solve_rows_leq_cols(cost.T)
        row_to_col = np.full(n, -1, dtype=np.intp)
        for col, row in enumerate(col_to_row):
            row_to_col[row] = col
    matched = row_to_col >= 0
    total = float(cost[np.flatnonzero(matched), row_to_col[matched]].sum())
    return Assignment(query_to_gt=row_to_col, total_cost=total)


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cost_matrix(mask_logit_values: np.ndarray, class_logit_values: np.ndarray,
                scene, w: LossWeights) -> np.ndarray:
    """(queries x GT) matching cost: -class prob + BCE + dice, dense."""
    n = mask_logit_values.shape[0]
    pred = mask_logit_values.reshape(n, -1)
    npix = pred.shape[1]
    gt = np.stack([inst.bits.reshape(-1).astype(np.float64)
                   for _, inst in scene.instances])
    if gt.shape[1] != npix:
        raise ValueError(f"prediction has {npix} pixels, GT has {gt.shape[1]}")
    cats = np.array([c for c, _ in scene.instances], dtype=np.intp)

    probs = _softmax_rows(class_logit_values)
    cls_term = -probs[:, cats]

    softplus_mean = (np.maximum(pred, 0.0) + np.log1p(np.exp(-np.abs(pred)))).mean(axis=1)
    bce = softplus_mean[:, None] - (pred @ gt.T) / npix

    p = _sigmoid(pred)
    inter = p @ gt.T
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (p.sum(axis=1)[:, None]
                                             + gt.sum(axis=1)[None, :] + DICE_EPS)
    return w.cls * cls_term + w.bce * bce + w.dice * dice


def mask_losses(pred_logits: Tensor, gt) -> tuple:
    """(bce, dice) scalars for one prediction against one binary mask."""
    t = gt.bits.reshape(-1).astype(np.float64)
    flat = pred_logits.reshape(-1)
    bce = bce_with_logits(flat, t).mean()
    p = flat.sigmoid()
    inter = (p * t).sum()
    dice = 1.0 - (2.0 * inter + DICE_EPS) / (p.sum() + float(t.sum()) + DICE_EPS)
    return bce, dice


def _batched_mask_loss(rows: Tensor, targets: np.ndarray):
    """Mean BCE and mean dice for row-aligned (M, P) predictions/targets."""
    bce = bce_with_logits(rows, targets).mean()
    p = rows.sigmoid()
    inter = (p * targets).sum_lastdim()
    psum = p.sum_lastdim()
    tsum = targets.sum(axis=1)
    dice_each = 1.0 - (2.0 * inter + DICE_EPS) / (psum + Tensor(tsum + DICE_EPS))
    return bce, dice_each.mean()


def _class_loss(cls_rows: Tensor, targets: np.ndarray, num_categories: int,
                no_object_weight: float) -> Tensor:
    lse = logsumexp_lastdim(cls_rows)
    picked = cls_rows.gather_cols(targets)
    ce_each = lse - picked
    wts = np.where(targets == num_categories, no_object_weight, 1.0)
    return (ce_each * wts).sum() / float(wts.sum())


def layer_losses(outputs: LayerOutputs, scene, mp_part, mode: str, weights: LossWeights):
    """Total loss over layers 0..L for both query parts.

    Returns (total scalar Tensor, per-layer Assignment list for the
    matching part). Modes: per-layer bipartite matching (default), a
    fixed matching computed at the last layer and reused everywhere, or
    default matching plus an adjacent-layer mask consistency term with
    the earlier layer detached.
    """
    if mode not in MODES:
        raise ValueError(f"unknown loss mode {mode!r} (choose from {MODES})")
    if mode != "per-layer-bipartite" and mp_part is not None:
        raise ValueError(f"mode {mode!r} is a baseline ablation; it cannot be "
                         f"combined with an auxiliary query part")
    n_match = outputs.n_match
    num_categories = outputs.class_logits[0].values.shape[1] - 1
    cats = np.array([c for c, _ in scene.instances], dtype=np.intp)
    gt_flat = np.stack([inst.bits.reshape(-1).astype(np.float64)
                        for _, inst in scene.instances])
    n_layers = len(outputs.mask_logits)
    match_rows_idx = np.arange(n_match)

    fixed = None
    if mode == "fixed-last-layer":
        ml, cl = outputs.mask_logits[-1], outputs.class_logits[-1]
        fixed = hungarian(cost_matrix(ml.values[:n_match], cl.values[:n_match],
                                      scene, weights))

    total = Tensor(0.0)
    assignments = []
    for i in range(n_layers):
        ml, cl = outputs.mask_logits[i], outputs.class_logits[i]
        flat = ml.reshape(ml.values.shape[0], -1)
        if fixed is not None:
            assign = fixed
        else:
            assign = hungarian(cost_matrix(ml.values[:n_match], cl.values[:n_match],
                                           scene, weights))
        assignments.append(assign)
        rows, gt_idx = assign.matched()

        targets = np.full(n_match, num_categories, dtype=np.intp)
        targets[rows] = cats[gt_idx]
        cls_match = cl.take_rows(match_rows_idx)
        ce = _class_loss(cls_match, targets, num_categories, weights.no_object)
        total = total + weights.cls * ce
        if rows.size:
            bce, dice = _batched_mask_loss(flat.take_rows(rows), gt_flat[gt_idx])
            total = total + weights.bce * bce + weights.dice * dice

        if mp_part is not None:
            mp_rows = n_match + np.arange(mp_part.num_queries)
            mp_targets = mp_part.gt_categories
            ce_mp = _class_loss(cl.take_rows(mp_rows), mp_targets, num_categories,
                                weights.no_object)
            bce_mp, dice_mp = _batched_mask_loss(flat.take_rows(mp_rows),
                                                 gt_flat[mp_part.instance_index])
            total = total + weights.cls * ce_mp + weights.bce * bce_mp \
                + weights.dice * dice_mp

        if mode == "consistency-aux" and i >= 1:
            prev_bits = binarize_masks(outputs.mask_logits[i - 1].values[:n_match])
            prev = prev_bits.reshape(n_match, -1).astype(np.float64)
            bce_aux, dice_aux = _batched_mask_loss(flat.take_rows(match_rows_idx), prev)
            total = total + weights.bce * bce_aux + weights.dice * dice_aux
    return total, assignments
