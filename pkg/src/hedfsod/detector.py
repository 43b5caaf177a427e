"""End-to-end toy detector: patch embedding, encoder, hybrid decoder, heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .assignment import CostWeights, hungarian
from .decoder import (
    Attention,
    DecoderConfig,
    DenoisingTargets,
    FeedForward,
    HybridDecoder,
    LayerOutput,
    Proposals,
    aggregate,
)
from .geometry import CLAMP_SIZE, Box, DenoisingConfig, cxcywh_to_xyxy, generalized_box_iou_t
from .losses import (
    LossBreakdown,
    LossWeights,
    box_loss,
    combine_branch_losses,
    dn_loss,
    hungarian_match,
    match_loss,
    sum_breakdowns,
    total_loss,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 96
    patch_size: int = 8
    encoder_layers: int = 2
    num_categories: int = 6
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    denoising: DenoisingConfig = field(default_factory=DenoisingConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    cost: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")

    @property
    def d_model(self) -> int:
        return self.decoder.d_model

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class Detection:
    box: Box
    category: int
    score: float


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(self, x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h + pos, h + pos, h)
        return x + self.ffn(self.norm2(x))


def sine_position_2d(side: int, d_model: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (side*side, d_model)."""
    quarter = d_model // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys, xs = torch.meshgrid(torch.arange(side, dtype=torch.float32), torch.arange(side, dtype=torch.float32), indexing="ij")
    parts = []
    for coord in (ys.flatten(), xs.flatten()):
        ang = coord[:, None] * omega[None]
        parts += [ang.sin(), ang.cos()]
    pe = torch.cat(parts, dim=1)
    if pe.shape[1] < d_model:
        pe = torch.cat((pe, torch.zeros(pe.shape[0], d_model - pe.shape[1])), dim=1)
    return pe


# parameter-name prefixes of the backbone/encoder group
BACKBONE_PREFIXES = ("patch_embed.", "encoder.")


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, cfg.decoder.n_heads, cfg.decoder.ffn_dim) for _ in range(cfg.encoder_layers)
        )
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder = HybridDecoder(cfg.decoder, cfg.num_categories)
        self.register_buffer("pos", sine_position_2d(cfg.image_size // p, d), persistent=False)

    # encoder_norm sits between the encoder and the decoder; treat it as encoder
    def is_backbone_param(self, name: str) -> bool:
        return name.startswith(BACKBONE_PREFIXES) or name.startswith("encoder_norm.")

    def extract_tokens(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode (B, 3, H, W) images into tokens (B, T, d) plus their positions (T, d)."""
        if images.dim() == 3:
            images = images[None]
        s, p = self.cfg.image_size, self.cfg.patch_size
        if images.shape[1:] != (3, s, s):
            raise ValueError(f"expected images of shape (3, {s}, {s}), got {tuple(images.shape[1:])}")
        b = images.shape[0]
        patches = images.unfold(2, p, p).unfold(3, p, p)  # B,3,h,w,p,p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, -1, 3 * p * p)
        x = self.patch_embed(patches)
        pos = self.pos.to(x.dtype)
        for layer in self.encoder:
            x = layer(x, pos)
        return self.encoder_norm(x), pos

    def run_decoder(self, images: torch.Tensor, mode: str = "infer", **kw) -> list[LayerOutput]:
        return self.run(images, mode, **kw)[1]

    def run(self, images: torch.Tensor, mode: str = "infer", **kw) -> tuple[Proposals, list[LayerOutput]]:
        """Encoder proposals and the per-layer decoder outputs."""
        memory, pos = self.extract_tokens(images)
        proposals = self.decoder.propose(memory)
        return proposals, self.decoder.forward_hybrid(memory, pos[None], mode=mode, proposals=proposals, **kw)

    @torch.no_grad()
    def infer(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Aggregated (boxes, probs) for a batch, in eval mode."""
        outputs = self.run_decoder(images, mode="infer")
        if self.cfg.decoder.aggregate == "last":
            outputs = outputs[-1:]
        return aggregate(outputs, self.cfg.decoder.aggregate_space)

    def predict(self, image: torch.Tensor | np.ndarray, top_k: int = 100, score_threshold: float = 0.0) -> list[Detection]:
        if isinstance(image, np.ndarray):
            image = image_to_tensor(image)
        boxes, probs = self.infer(image[None] if image.dim() == 3 else image)
        return detections_from_outputs(boxes[0], probs[0], top_k, score_threshold)

    def predict_batch(
        self, images: torch.Tensor, top_k: int = 100, score_threshold: float = 0.0, batch_size: int = 64
    ) -> list[list[Detection]]:
        result = []
        for s in range(0, images.shape[0], batch_size):
            boxes, probs = self.infer(images[s : s + batch_size])
            result += [detections_from_outputs(b, p, top_k, score_threshold) for b, p in zip(boxes, probs)]
        return result

    def forward_train(
        self,
        images: torch.Tensor,
        labels: list[torch.Tensor],
        boxes: list[torch.Tensor],
        reinit_rng: np.random.Generator,
        dn_generator: torch.Generator | None,
    ) -> LossBreakdown:
        """Deep-supervised training loss averaged over the images of the batch."""
        c = self.cfg.num_categories
        for lb in labels:
            if len(lb) and (int(lb.min()) < 0 or int(lb.max()) >= c):
                raise ValueError("annotation references an unknown category")
        targets = DenoisingTargets.from_lists(labels, boxes)
        proposals, outputs = self.run(
            images,
            mode="train",
            targets=targets,
            dn_cfg=self.cfg.denoising,
            reinit_rng=reinit_rng,
            dn_generator=dn_generator,
        )
        return layered_loss(outputs, labels, boxes, self.cfg, proposals)


def _class_agnostic(proposals: Proposals) -> LayerOutput:
    return LayerOutput(layer_index=-1, logits=proposals.logits, boxes=proposals.boxes)


def layered_loss(
    outputs: list[LayerOutput],
    labels: list[torch.Tensor],
    boxes: list[torch.Tensor],
    cfg: ModelConfig,
    proposals: Proposals | None = None,
) -> LossBreakdown:
    """Sum over layers of matched loss plus weighted denoising loss, per image mean.

    Stacked layers contribute their own denoising loss; the denoising losses
    of the parallel branches are averaged into a single term. Encoder
    proposals, when given, add one class-agnostic matched term. Matching runs
    per (layer, image) outside autograd, then every term is evaluated in one
    batched pass. :func:`layered_loss_reference` is the loop form.
    """
    parts = _layered_sum(outputs, labels, boxes, cfg)
    if proposals is not None:
        enc = _layered_sum([_class_agnostic(proposals)], [torch.zeros_like(lb) for lb in labels], boxes, cfg)
        parts = {k: parts[k] + enc[k] for k in parts}
    n_img = len(labels)
    return LossBreakdown(**{k: v / max(n_img, 1) for k, v in parts.items()})


def _layered_sum(
    outputs: list[LayerOutput], labels: list[torch.Tensor], boxes: list[torch.Tensor], cfg: ModelConfig
) -> dict[str, torch.Tensor]:
    w = cfg.loss
    n_img = len(labels)
    logits = torch.stack([o.logits for o in outputs])  # L,B,N,C
    pboxes = torch.stack([o.boxes for o in outputs])  # L,B,N,4
    n_layers = logits.shape[0]

    onehot = torch.zeros_like(logits)
    idx_l, idx_b, idx_q, tgt = [], [], [], []
    with torch.no_grad():
        probs = logits.sigmoid()
        for b in range(n_img):
            if len(labels[b]) == 0:
                continue
            costs = _batched_costs(probs[:, b], pboxes[:, b], labels[b], boxes[b], cfg.cost)
            for layer in range(n_layers):
                m = hungarian(costs[layer])
                q, t = m.pred_indices, m.target_indices
                onehot[layer, b, q, labels[b][t]] = 1.0
                idx_l += [layer] * len(q)
                idx_b += [b] * len(q)
                idx_q += q
                tgt.append(boxes[b][t])
    cls = w.lambda_cls * F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum")
    if idx_q:
        l1, g = box_loss(pboxes[idx_l, idx_b, idx_q], torch.cat(tgt))
        box_l1 = w.lambda_box_l1 * l1.sum()
        box_giou = w.lambda_box_giou * g.sum()
    else:
        box_l1 = box_giou = logits.new_zeros(())

    dn = logits.new_zeros(())
    if outputs[0].dn_logits is not None:
        dn = _batched_dn_loss(outputs, labels, boxes, cfg)
    dn = w.lambda_dn * dn
    total = cls + box_l1 + box_giou + dn
    return dict(cls=cls, box_l1=box_l1, box_giou=box_giou, dn=dn, total=total)


def _layer_dn_weights(outputs: list[LayerOutput]) -> list[float]:
    n_par = sum(o.parallel for o in outputs)
    return [1.0 / n_par if o.parallel else 1.0 for o in outputs]


@torch.no_grad()
def _batched_costs(
    probs: torch.Tensor, pboxes: torch.Tensor, gt_labels: torch.Tensor, gt_boxes: torch.Tensor, cw: CostWeights
) -> np.ndarray:
    """Matching costs for a stack of prediction sets: (S,N,C),(S,N,4) -> (S,N,M)."""
    s, n, _ = pboxes.shape
    flat = pboxes.reshape(s * n, 4)
    l1 = torch.cdist(flat, gt_boxes, p=1)
    g = generalized_box_iou_t(cxcywh_to_xyxy(flat), cxcywh_to_xyxy(gt_boxes))
    cls = 1.0 - probs.reshape(s * n, -1)[:, gt_labels]
    c = cw.cls * cls + cw.l1 * l1 + cw.giou * (1.0 - g)
    return c.reshape(s, n, -1).double().numpy()


def _batched_dn_loss(
    outputs: list[LayerOutput], labels: list[torch.Tensor], boxes: list[torch.Tensor], cfg: ModelConfig
) -> torch.Tensor:
    w = cfg.loss
    layer_w = torch.tensor(_layer_dn_weights(outputs))
    dn_logits = torch.stack([o.dn_logits for o in outputs])  # L,B,G,M,C
    dn_boxes = torch.stack([o.dn_boxes for o in outputs])  # L,B,G,M,4
    n_layers, n_img, n_groups, m_pad, _ = dn_logits.shape
    onehot = torch.zeros_like(dn_logits)
    valid = torch.zeros(n_img, m_pad, dtype=dn_logits.dtype)
    idx = [[], [], [], []]
    tgt = []
    with torch.no_grad():
        probs = dn_logits.sigmoid()
        for b in range(n_img):
            k = len(labels[b])
            if k == 0:
                continue
            valid[b, :k] = 1.0
            if cfg.decoder.dn_identity_match:
                perms = np.tile(np.arange(k), (n_layers * n_groups, 1))
            else:
                costs = _batched_costs(
                    probs[:, b, :, :k].reshape(n_layers * n_groups, k, -1),
                    dn_boxes[:, b, :, :k].reshape(n_layers * n_groups, k, 4),
                    labels[b],
                    boxes[b],
                    cfg.cost,
                )
                perms = [None] * len(costs)
                for s, c in enumerate(costs):
                    m = hungarian(c)
                    perm = np.empty(k, dtype=np.int64)
                    perm[m.pred_indices] = m.target_indices
                    perms[s] = perm
            for s, perm in enumerate(perms):
                layer, g = divmod(s, n_groups)
                onehot[layer, b, g, np.arange(k), labels[b][perm]] = 1.0
                idx[0] += [layer] * k
                idx[1] += [b] * k
                idx[2] += [g] * k
                idx[3] += list(range(k))
                tgt.append(boxes[b][perm])
    bce = F.binary_cross_entropy_with_logits(dn_logits, onehot, reduction="none").sum(-1)  # L,B,G,M
    bce = bce * valid[None, :, None, :] * layer_w[:, None, None, None]
    loss = w.lambda_cls * bce.sum()
    if tgt:
        l1, g = box_loss(dn_boxes[tuple(idx)], torch.cat(tgt))
        wl = layer_w[idx[0]]
        loss = loss + (wl * (w.lambda_box_l1 * l1 + w.lambda_box_giou * g)).sum()
    return loss


def layered_loss_reference(
    outputs: list[LayerOutput],
    labels: list[torch.Tensor],
    boxes: list[torch.Tensor],
    cfg: ModelConfig,
    proposals: Proposals | None = None,
) -> LossBreakdown:
    """Loop composition of the per-image losses; same value as :func:`layered_loss`."""
    w = cfg.loss
    identity = cfg.decoder.dn_identity_match
    n_img = len(labels)
    per_layer = []
    parallel_dn = []
    for out in outputs:
        match_parts = []
        dn_terms = []
        for b in range(n_img):
            m = hungarian_match(out.logits[b], out.boxes[b], labels[b], boxes[b], cfg.cost)
            match_parts.append(match_loss(out.logits[b], out.boxes[b], labels[b], boxes[b], m, w))
            if out.dn_logits is not None:
                k = len(labels[b])
                branch = [[(out.dn_logits[b, g, :k], out.dn_boxes[b, g, :k]) for g in range(out.dn_logits.shape[1])]]
                dn_terms.append(dn_loss(branch, labels[b], boxes[b], w, identity))
        layer_match = sum_breakdowns(match_parts)
        dn = torch.stack(dn_terms).sum() if dn_terms else out.logits.new_zeros(())
        if out.parallel:
            parallel_dn.append(dn)
            per_layer.append(total_loss(layer_match, out.logits.new_zeros(()), w))
        else:
            per_layer.append(total_loss(layer_match, dn, w))
    if parallel_dn:
        per_layer.append(total_loss(_zero_breakdown(outputs[0].logits), combine_branch_losses(parallel_dn), w))
    if proposals is not None:
        enc = [
            match_loss(proposals.logits[b], proposals.boxes[b], torch.zeros_like(labels[b]), boxes[b],
                       hungarian_match(proposals.logits[b], proposals.boxes[b], torch.zeros_like(labels[b]), boxes[b], cfg.cost), w)
            for b in range(n_img)
        ]
        per_layer.append(total_loss(sum_breakdowns(enc), outputs[0].logits.new_zeros(()), w))
    total = sum_breakdowns(per_layer)
    return LossBreakdown(**{k: v / max(n_img, 1) for k, v in vars(total).items()})


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HWC uint8 or float image -> (3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()


def detections_from_outputs(
    boxes: torch.Tensor, probs: torch.Tensor, top_k: int, score_threshold: float
) -> list[Detection]:
    """Per query keep the best category; filter by score, cap at top_k, sort descending."""
    if top_k <= 0:
        return []
    scores, cats = probs.max(-1)
    order = torch.argsort(scores, descending=True, stable=True)
    dets = []
    for i in order.tolist():
        s = float(scores[i])
        if s < score_threshold:
            break
        cx, cy, w, h = (float(v) for v in boxes[i])
        w = min(max(w, CLAMP_SIZE), 1.0)
        h = min(max(h, CLAMP_SIZE), 1.0)
        dets.append(Detection(Box(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), w, h), int(cats[i]), s))
        if len(dets) == top_k:
            break
    return dets


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_detector(cfg: ModelConfig, seed: int) -> Detector:
    """Construct with a private RNG so global torch state is left alone."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Detector(cfg)
    return model


def _zero_breakdown(like: torch.Tensor) -> LossBreakdown:
    z = like.new_zeros(())
    return LossBreakdown(cls=z, box_l1=z, box_giou=z, dn=z, total=z)
