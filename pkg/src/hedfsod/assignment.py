"""Bipartite matching between predictions and ground-truth objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import Box, cxcywh_to_xyxy, generalized_box_iou_t, giou


@dataclass(frozen=True)
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)

    @property
    def pred_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [t for _, t in self.pairs]

    def total(self, costs: np.ndarray) -> float:
        return float(sum(costs[p, t] for p, t in self.pairs))


@dataclass(frozen=True)
class CostWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def _canonicalize(costs: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Move equal-cost ties toward lower prediction indices.

    Two exact-equality moves are applied until neither fires: hand a target
    from a matched prediction to a lower-index unmatched prediction with the
    same cost, and swap the targets of two matched predictions when the swap
    keeps the total and gives the lower prediction the lower target.
    """
    n_pred = costs.shape[0]
    assign = dict(zip(rows.tolist(), cols.tolist()))
    changed = True
    while changed:
        changed = False
        free = sorted(set(range(n_pred)) - assign.keys())
        for p in sorted(assign):
            t = assign[p]
            for q in free:
                if q >= p:
                    break
                if costs[q, t] == costs[p, t]:
                    del assign[p]
                    assign[q] = t
                    changed = True
                    break
            if changed:
                break
        if changed:
            continue
        preds = sorted(assign)
        for i, p in enumerate(preds):
            for q in preds[i + 1 :]:
                tp, tq = assign[p], assign[q]
                if tp > tq and costs[p, tq] + costs[q, tp] == costs[p, tp] + costs[q, tq]:
                    assign[p], assign[q] = tq, tp
                    changed = True
    order = sorted(assign)
    return np.array(order, dtype=np.int64), np.array([assign[p] for p in order], dtype=np.int64)


def hungarian(costs: np.ndarray | list) -> MatchResult:
    """Minimum-cost injective assignment of the smaller side into the larger.

    Rows are predictions, columns are targets. Raises ``ValueError`` on
    non-finite entries.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise ValueError("cost matrix contains non-finite entries")
    n_pred, n_tgt = costs.shape
    if n_pred == 0 or n_tgt == 0:
        return MatchResult(pairs=[], unmatched=list(range(n_pred)))
    rows, cols = linear_sum_assignment(costs)
    if n_pred > 1:
        rows, cols = _canonicalize(costs, rows, cols)
    matched = set(rows.tolist())
    return MatchResult(
        pairs=list(zip(rows.tolist(), cols.tolist())),
        unmatched=[i for i in range(n_pred) if i not in matched],
    )


def matching_cost(
    prob_target: float, pred_box: Box, gt_box: Box, weights: CostWeights = CostWeights()
) -> float:
    """Pairwise matching cost for a single prediction / ground-truth pair.

    ``prob_target`` is the predicted probability of the ground-truth category.
    """
    l1 = sum(abs(p - g) for p, g in zip(pred_box.as_tuple(), gt_box.as_tuple()))
    return weights.cls * (1.0 - prob_target) + weights.l1 * l1 + weights.giou * (1.0 - giou(pred_box, gt_box))


@torch.no_grad()
def cost_matrix(
    probs: torch.Tensor,
    boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_boxes: torch.Tensor,
    weights: CostWeights = CostWeights(),
) -> np.ndarray:
    """Vectorized :func:`matching_cost` for (N,C) probs, (N,4) boxes vs M targets."""
    cls = 1.0 - probs[:, gt_labels]
    l1 = torch.cdist(boxes, gt_boxes, p=1)
    g = generalized_box_iou_t(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes))
    c = weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - g)
    return c.detach().cpu().double().numpy()
