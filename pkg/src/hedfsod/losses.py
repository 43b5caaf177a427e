"""Training objectives: classification, box regression, matched and denoising losses.

All functions take raw per-query tensors so they can be used both by the
detector and directly in tests. Matching is computed outside autograd and
passed in as a :class:`~hedfsod.assignment.MatchResult`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .assignment import CostWeights, MatchResult, cost_matrix, hungarian
from .geometry import cxcywh_to_xyxy, elementwise_giou_t


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_box_l1: float = 5.0
    lambda_box_giou: float = 2.0
    lambda_dn: float = 1.0

    def __post_init__(self) -> None:
        for name, v in vars(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    """Weighted loss terms; tensors so ``total`` can be backpropagated."""

    cls: torch.Tensor
    box_l1: torch.Tensor
    box_giou: torch.Tensor
    dn: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def cls_loss(logits: torch.Tensor, target: int | None) -> torch.Tensor:
    """Sigmoid BCE summed over categories; ``target=None`` means background."""
    onehot = torch.zeros_like(logits)
    if target is not None:
        onehot[..., target] = 1.0
    return F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum")


def box_loss(pred: torch.Tensor, gt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(L1 over center-size coords, 1 - GIoU) for aligned boxes (..., 4)."""
    l1 = (pred - gt).abs().sum(-1)
    giou_term = 1.0 - elementwise_giou_t(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    return l1, giou_term


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def match_loss(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_boxes: torch.Tensor,
    match: MatchResult,
    w: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Loss for one image: matched pairs get class + box terms, the rest background.

    Args:
        logits: (N, C) per-query class logits.
        boxes: (N, 4) predicted center-size boxes.
        gt_labels: (M,) category indices.
        gt_boxes: (M, 4) center-size targets.
        match: pairing of query indices to target indices.
    """
    n, _ = logits.shape
    pred_idx = match.pred_indices
    tgt_idx = match.target_indices
    if any(p < 0 or p >= n for p in pred_idx) or any(t < 0 or t >= len(gt_labels) for t in tgt_idx):
        raise IndexError("match indices out of range")
    onehot = torch.zeros_like(logits)
    if pred_idx:
        onehot[pred_idx, gt_labels[tgt_idx]] = 1.0
    cls = w.lambda_cls * F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum")
    if pred_idx:
        l1, g = box_loss(boxes[pred_idx], gt_boxes[tgt_idx])
        l1 = w.lambda_box_l1 * l1.sum()
        g = w.lambda_box_giou * g.sum()
    else:
        l1 = g = _zero(logits)
    zero = _zero(logits)
    return LossBreakdown(cls=cls, box_l1=l1, box_giou=g, dn=zero, total=cls + l1 + g)


def hungarian_match(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_boxes: torch.Tensor,
    weights: CostWeights = CostWeights(),
) -> MatchResult:
    if len(gt_labels) == 0:
        return MatchResult(pairs=[], unmatched=list(range(logits.shape[0])))
    return hungarian(cost_matrix(logits.detach().sigmoid(), boxes.detach(), gt_labels, gt_boxes, weights))


def dn_group_loss(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_boxes: torch.Tensor,
    w: LossWeights = LossWeights(),
    identity: bool = False,
    cost_weights: CostWeights = CostWeights(),
) -> torch.Tensor:
    """Denoising loss of one noisy group against its clean source set.

    The group's predictions are paired with the clean targets either by a
    group-local Hungarian match or, with ``identity=True``, by position.
    """
    if logits.shape[0] != len(gt_labels):
        raise ValueError(f"denoising group has {logits.shape[0]} queries for {len(gt_labels)} targets")
    if len(gt_labels) == 0:
        return _zero(logits)
    if identity:
        m = len(gt_labels)
        match = MatchResult(pairs=[(i, i) for i in range(m)])
    else:
        match = hungarian_match(logits, boxes, gt_labels, gt_boxes, cost_weights)
    return match_loss(logits, boxes, gt_labels, gt_boxes, match, w).total


def dn_loss(
    branch_groups: Sequence[Sequence[tuple[torch.Tensor, torch.Tensor]]],
    gt_labels: torch.Tensor,
    gt_boxes: torch.Tensor,
    w: LossWeights = LossWeights(),
    identity: bool = False,
) -> torch.Tensor:
    """Denoising loss averaged across branches, summed over groups within a branch.

    ``branch_groups[b][g]`` is ``(logits, boxes)`` of group ``g`` in branch ``b``.
    A single branch reduces to the plain sum over groups.
    """
    if not branch_groups:
        raise ValueError("no denoising branches given")
    per_branch = []
    for groups in branch_groups:
        terms = [dn_group_loss(lg, bx, gt_labels, gt_boxes, w, identity) for lg, bx in groups]
        per_branch.append(torch.stack(terms).sum() if terms else gt_boxes.new_zeros(()))
    return torch.stack(per_branch).mean()


def combine_branch_losses(values: Sequence[torch.Tensor]) -> torch.Tensor:
    """Arithmetic mean across parallel branches."""
    return torch.stack(list(values)).mean()


def total_loss(match: LossBreakdown, dn: torch.Tensor, w: LossWeights = LossWeights()) -> LossBreakdown:
    """Single-layer total: matched loss plus weighted denoising loss."""
    dn_w = w.lambda_dn * dn
    return LossBreakdown(
        cls=match.cls,
        box_l1=match.box_l1,
        box_giou=match.box_giou,
        dn=dn_w,
        total=match.total + dn_w,
    )


def sum_breakdowns(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    """Deep supervision: add per-layer breakdowns field by field."""
    if not parts:
        raise ValueError("nothing to sum")
    fields = ("cls", "box_l1", "box_giou", "dn", "total")
    return LossBreakdown(**{f: torch.stack([getattr(p, f) for p in parts]).sum() for f in fields})
