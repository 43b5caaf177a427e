"""Bounding boxes, IoU/GIoU and the denoising box perturbation.

Boxes are normalized to the image extent. Internally they live in
center-size form ``(cx, cy, w, h)``; corner form ``(x1, y1, x2, y2)`` is
derived. Annotation files store COCO-style ``[x, y, width, height]`` in
absolute pixels, see :meth:`Box.from_coco` / :meth:`Box.to_coco`.

Scalar helpers operate on :class:`Box` values; the ``*_t`` helpers work on
batched torch tensors and are what the losses and the matcher use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

MIN_SIZE = 1e-6
# floor applied when a perturbed or predicted box would collapse
CLAMP_SIZE = 1e-3


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if self.w <= MIN_SIZE or self.h <= MIN_SIZE:
            raise InvalidBoxError(f"degenerate box size w={self.w}, h={self.h}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise InvalidBoxError(f"center ({self.cx}, {self.cy}) outside [0, 1]")
        if self.w > 1.0 or self.h > 1.0:
            raise InvalidBoxError(f"size ({self.w}, {self.h}) exceeds image extent")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float, scale: float = 1.0) -> "Box":
        """Build from corner coordinates; ``scale`` divides them (e.g. image size)."""
        x1, y1, x2, y2 = (v / scale for v in (x1, y1, x2, y2))
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_coco(cls, xywh: Sequence[float], width: float, height: float) -> "Box":
        x, y, bw, bh = xywh
        return cls((x + bw / 2) / width, (y + bh / 2) / height, bw / width, bh / height)

    def to_coco(self, width: float, height: float) -> list[float]:
        x1, y1, _, _ = self.corners()
        return [x1 * width, y1 * height, self.w * width, self.h * height]

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class DenoisingConfig:
    epsilon: float = 0.1
    groups: int = 2
    lambda_dn: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.lambda_dn < 0:
            raise ValueError(f"lambda_dn must be >= 0, got {self.lambda_dn}")


def _overlap(a: Sequence[float], b: Sequence[float]) -> tuple[float, float, float]:
    """Return (intersection, union, enclosing area) for two corner boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, enclose


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-form boxes in any common coordinate frame."""
    inter, union, _ = _overlap(a, b)
    return inter / union if union > 0 else 0.0


def giou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    inter, union, enclose = _overlap(a, b)
    iou = inter / union if union > 0 else 0.0
    # enclose >= union exactly; rounding can flip the sign of a zero gap
    return iou - max(enclose - union, 0.0) / enclose


def iou(a: Box, b: Box) -> float:
    return iou_xyxy(a.corners(), b.corners())


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: ``IoU - (enclosing - union) / enclosing``, in (-1, 1]."""
    return giou_xyxy(a.corners(), b.corners())


def _clamp_cxcywh(cx: float, cy: float, w: float, h: float) -> tuple[float, float, float, float]:
    return (
        min(max(cx, 0.0), 1.0),
        min(max(cy, 0.0), 1.0),
        min(max(w, CLAMP_SIZE), 1.0),
        min(max(h, CLAMP_SIZE), 1.0),
    )


def perturb_box(b: Box, cfg: DenoisingConfig, rng: np.random.Generator) -> Box:
    """Shift each center-size coordinate by an independent U(-eps, eps) draw.

    The result is clamped back into the valid box domain. Four draws are
    consumed even when ``epsilon == 0`` so stream positions do not depend on
    the noise level.
    """
    delta = (2.0 * rng.random(4) - 1.0) * cfg.epsilon
    if cfg.epsilon == 0:
        return b
    return Box(*_clamp_cxcywh(*(np.asarray(b.as_tuple()) + delta)))


# ---------------------------------------------------------------------------
# batched tensor versions


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), dim=-1)


def _area(xyxy: torch.Tensor) -> torch.Tensor:
    return (xyxy[..., 2] - xyxy[..., 0]) * (xyxy[..., 3] - xyxy[..., 1])


def box_iou_t(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pairwise IoU and union for corner boxes (N,4) x (M,4) -> (N,M)."""
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a)[:, None] + _area(b)[None, :] - inter
    return inter / union, union


def generalized_box_iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU for corner boxes (N,4) x (M,4) -> (N,M)."""
    iou_, union = box_iou_t(a, b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    enclose = wh[..., 0] * wh[..., 1]
    return iou_ - (enclose - union) / enclose


def elementwise_giou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU of aligned corner boxes (..., 4) x (..., 4) -> (...)."""
    lt = torch.max(a[..., :2], b[..., :2])
    rb = torch.min(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    elt = torch.min(a[..., :2], b[..., :2])
    erb = torch.max(a[..., 2:], b[..., 2:])
    ewh = (erb - elt).clamp(min=0)
    enclose = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclose - union) / enclose


def clamp_boxes_t(boxes: torch.Tensor) -> torch.Tensor:
    cxcy = boxes[..., :2].clamp(0.0, 1.0)
    wh = boxes[..., 2:].clamp(CLAMP_SIZE, 1.0)
    return torch.cat((cxcy, wh), dim=-1)


def perturb_boxes_t(boxes: torch.Tensor, epsilon: float, generator: torch.Generator | None) -> torch.Tensor:
    """Tensor form of :func:`perturb_box` for (..., 4) center-size boxes."""
    noise = torch.rand(boxes.shape, generator=generator, dtype=boxes.dtype, device=boxes.device)
    return clamp_boxes_t(boxes + (2 * noise - 1) * epsilon)
