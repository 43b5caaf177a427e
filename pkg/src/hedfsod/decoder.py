"""Hybrid ensemble decoder.

The first ``num_stacked`` layers refine the queries sequentially. Every
remaining layer is applied independently to the output of the last stacked
layer, so the stack of ``num_layers`` weight sets turns into a shared trunk
followed by parallel branches. During training each branch may swap the
inherited denoising queries for freshly drawn ones with probability ``tau``.
Per-layer predictions are averaged at inference.

Every query carries a reference box. Object queries start from the
highest-scoring encoder proposals, denoising queries from their noisy
ground truth, and each layer predicts its box as a correction to the
reference it received. The corrected box becomes the next reference.
Cross-attention carries a Gaussian prior centred on the reference box
(``box_attention``), so each query reads mostly from the tokens it covers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import Box, DenoisingConfig, perturb_box, perturb_boxes_t

Mode = Literal["train", "infer"]

INHERITED = "inherited"
REINITIALIZED = "reinitialized"


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 6
    num_stacked: int = 1
    tau: float = 0.5
    num_queries: int = 30
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    # "all": average every layer (ensemble); "last": final layer only
    aggregate: Literal["all", "last"] = "all"
    aggregate_space: Literal["prob", "logit"] = "prob"
    dn_identity_match: bool = False
    # strength of the Gaussian prior pulling cross-attention into each reference box; 0 disables it
    box_attention: float = 4.0

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be positive")
        if not 0 <= self.num_stacked <= self.num_layers:
            raise ValueError(f"num_stacked={self.num_stacked} must lie in [0, num_layers={self.num_layers}]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.aggregate not in ("all", "last") or self.aggregate_space not in ("prob", "logit"):
            raise ValueError("unknown aggregation setting")
        if self.box_attention < 0:
            raise ValueError("box_attention must be non-negative")

    @property
    def num_parallel(self) -> int:
        return self.num_layers - self.num_stacked

    @property
    def structure(self) -> str:
        return f"{self.num_stacked}+{self.num_parallel}"


@dataclass
class DenoisingTargets:
    """Ground truth of a batch padded to a common length ``M``."""

    labels: torch.Tensor  # (B, M) long
    boxes: torch.Tensor  # (B, M, 4) center-size
    valid: torch.Tensor  # (B, M) bool

    @property
    def size(self) -> int:
        return self.labels.shape[1]

    @classmethod
    def from_lists(cls, labels: list[torch.Tensor], boxes: list[torch.Tensor]) -> "DenoisingTargets":
        b = len(labels)
        m = max((len(x) for x in labels), default=0)
        lab = torch.zeros(b, m, dtype=torch.long)
        box = torch.full((b, m, 4), 0.5)
        box[..., 2:] = 0.1
        valid = torch.zeros(b, m, dtype=torch.bool)
        for i, (lb, bx) in enumerate(zip(labels, boxes)):
            k = len(lb)
            lab[i, :k] = lb
            box[i, :k] = bx
            valid[i, :k] = True
        return cls(lab, box, valid)


@dataclass
class QueryBundle:
    object_queries: torch.Tensor  # (B, Nq, d)
    dn_queries: torch.Tensor | None = None  # (B, G*M, d)
    groups: int = 0
    group_size: int = 0
    dn_valid: torch.Tensor | None = None  # (B, M)
    provenance: tuple[str, ...] = ()
    object_refs: torch.Tensor | None = None  # (B, Nq, 4) center-size, no grad
    dn_refs: torch.Tensor | None = None  # (B, G*M, 4)

    def __post_init__(self) -> None:
        if self.dn_queries is not None:
            if self.dn_queries.shape[1] != self.groups * self.group_size:
                raise ValueError("denoising queries do not partition into groups")
            if len(self.provenance) != self.groups:
                raise ValueError("provenance must carry one flag per group")

    @property
    def has_dn(self) -> bool:
        return self.dn_queries is not None and self.dn_queries.shape[1] > 0


@dataclass
class Proposals:
    """Class-agnostic encoder predictions, one per memory token."""

    logits: torch.Tensor  # (B, T, 1)
    boxes: torch.Tensor  # (B, T, 4)
    refs: torch.Tensor  # (B, Nq, 4) top-scoring boxes, detached


@dataclass
class LayerOutput:
    layer_index: int
    logits: torch.Tensor  # (B, Nq, C)
    boxes: torch.Tensor  # (B, Nq, 4)
    dn_logits: torch.Tensor | None = None  # (B, G, M, C)
    dn_boxes: torch.Tensor | None = None  # (B, G, M, 4)
    parallel: bool = False
    inputs: QueryBundle | None = None
    hidden: QueryBundle | None = None


class Attention(nn.Module):
    """Multi-head attention with an optional boolean ``allowed`` mask."""

    def __init__(self, d_model: int, n_heads: int) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        allowed: torch.Tensor | None = None,
        bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, tq, d = query.shape
        tk = key.shape[1]
        h = self.n_heads
        q = self.q_proj(query).view(b, tq, h, d // h).transpose(1, 2)
        k = self.k_proj(key).view(b, tk, h, d // h).transpose(1, 2)
        v = self.v_proj(value).view(b, tk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if bias is not None:
            scores = scores + bias[:, None]
        if allowed is not None:
            if allowed.dim() == 2:
                allowed = allowed[None]
            scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        attn = scores.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(b, tq, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int) -> None:
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class DecoderLayer(nn.Module):
    """Pre-norm layer: masked self-attention, cross-attention to memory, FFN."""

    def __init__(self, d_model: int, n_heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = Attention(d_model, n_heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_dim)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        allowed: torch.Tensor | None = None,
        query_pos: torch.Tensor | None = None,
        cross_bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        qp = 0.0 if query_pos is None else query_pos
        h = self.norm1(x)
        x = x + self.self_attn(h + qp, h + qp, h, allowed)
        h = self.norm2(x)
        x = x + self.cross_attn(h + qp, memory + memory_pos, memory, bias=cross_bias)
        return x + self.ffn(self.norm3(x))


def attention_mask(num_queries: int, groups: int, group_size: int, dn_valid: torch.Tensor | None) -> torch.Tensor:
    """Boolean (B, T, T) mask of which keys each query may attend to.

    Object queries see only object queries. A denoising query sees the valid
    members of its own group (and always itself, so padded slots stay finite).
    """
    t = num_queries + groups * group_size
    if dn_valid is None:
        return torch.ones(1, t, t, dtype=torch.bool)
    b = dn_valid.shape[0]
    allowed = torch.zeros(b, t, t, dtype=torch.bool)
    allowed[:, :num_queries, :num_queries] = True
    eye = torch.eye(group_size, dtype=torch.bool)
    block = dn_valid[:, None, :] | eye[None]
    for g in range(groups):
        s = num_queries + g * group_size
        allowed[:, s : s + group_size, s : s + group_size] = block
    return allowed


def _sine_features(boxes: torch.Tensor, num_freqs: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(num_freqs, dtype=boxes.dtype)) * math.pi
    ang = boxes[..., None] * freqs
    return torch.cat((ang.sin(), ang.cos()), dim=-1).flatten(-2)


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x / (1.0 - x))


def token_anchors(num_tokens: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """One box per token of a square grid: the cell centre, two cells wide."""
    side = math.isqrt(num_tokens)
    if side * side != num_tokens:
        raise ValueError(f"{num_tokens} tokens do not form a square grid")
    c = (torch.arange(side, dtype=dtype) + 0.5) / side
    cy, cx = torch.meshgrid(c, c, indexing="ij")
    size = torch.full((num_tokens,), min(2.0 / side, 1.0), dtype=dtype)
    return torch.stack((cx.flatten(), cy.flatten(), size, size), dim=-1)


def box_attention_bias(refs: torch.Tensor, centers: torch.Tensor, strength: float) -> torch.Tensor:
    """Additive cross-attention logits ``-strength * ((dx / w)^2 + (dy / h)^2)``.

    ``refs`` (B, Q, 4) are center-size boxes and ``centers`` (T, 2) token
    centres; a token on the box edge gets ``-strength / 4``.
    """
    d = (centers[None, None] - refs[..., None, :2]) / refs[..., None, 2:].clamp_min(1e-3)
    return -strength * (d**2).sum(-1)


def _mlp(d_in: int, d: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d_out))


class HybridDecoder(nn.Module):
    """Decoder layers, query embeddings, denoising embedder and shared heads."""

    box_freqs = 8

    def __init__(self, cfg: DecoderConfig, num_categories: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.num_categories = num_categories
        d = cfg.d_model
        self.query_embed = nn.Embedding(cfg.num_queries, d)
        self.label_embed = nn.Embedding(num_categories, d)
        self.box_embed = nn.Linear(4 * 2 * self.box_freqs, d)
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.n_heads, cfg.ffn_dim) for _ in range(cfg.num_layers))
        self.head_norm = nn.LayerNorm(d)
        self.cls_head = nn.Linear(d, num_categories)
        self.box_head = _mlp(d, d, 4)
        self.ref_pos = nn.Sequential(nn.Linear(4 * 2 * self.box_freqs, d), nn.ReLU(), nn.Linear(d, d))
        # class-agnostic proposals from the encoder tokens
        self.enc_norm = nn.LayerNorm(d)
        self.enc_score = nn.Linear(d, 1)
        self.enc_box = _mlp(d, d, 4)
        self.reset_cls_head()
        # corrections start at zero, so an untrained layer returns its reference box
        for head in (self.box_head, self.enc_box):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    def reset_cls_head(self) -> None:
        prior = 0.01
        nn.init.normal_(self.cls_head.weight, std=0.01)
        nn.init.constant_(self.cls_head.bias, -math.log((1 - prior) / prior))

    # -- denoising queries -------------------------------------------------

    def embed_dn(self, noisy_boxes: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Category embedding plus encoded box for (..., 4) boxes and (...) labels."""
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.num_categories):
            raise ValueError("denoising target references an unknown category")
        return self.label_embed(labels) + self.box_embed(_sine_features(noisy_boxes, self.box_freqs))

    def build_dn(
        self, targets: DenoisingTargets, dn_cfg: DenoisingConfig, generator: torch.Generator | None, flag: str
    ) -> QueryBundle:
        """Fresh noisy copies of the GT set, embedded; object part left empty."""
        b, m = targets.labels.shape
        g = dn_cfg.groups
        clean = targets.boxes[:, None].expand(b, g, m, 4)
        noisy = perturb_boxes_t(clean, dn_cfg.epsilon, generator)
        labels = targets.labels[:, None].expand(b, g, m)
        q = self.embed_dn(noisy, labels).reshape(b, g * m, -1)
        return QueryBundle(
            object_queries=torch.empty(0),
            dn_queries=q,
            groups=g,
            group_size=m,
            dn_valid=targets.valid,
            provenance=(flag,) * g,
            dn_refs=noisy.reshape(b, g * m, 4).detach(),
        )

    def reinit_dn(
        self,
        base: QueryBundle,
        targets: DenoisingTargets,
        dn_cfg: DenoisingConfig,
        rng: np.random.Generator,
        generator: torch.Generator | None,
    ) -> QueryBundle:
        """With probability tau swap the inherited dn queries for freshly built ones.

        One Bernoulli draw per call (one call per parallel branch); object
        queries are passed through untouched.
        """
        if rng.random() < self.cfg.tau:
            fresh = self.build_dn(targets, dn_cfg, generator, REINITIALIZED)
            return replace(base, dn_queries=fresh.dn_queries, dn_refs=fresh.dn_refs, provenance=fresh.provenance)
        return replace(base, provenance=(INHERITED,) * base.groups)

    # -- layers ------------------------------------------------------------

    def initial_queries(self, batch: int) -> torch.Tensor:
        return self.query_embed.weight[None].expand(batch, -1, -1)

    def propose(self, memory: torch.Tensor) -> Proposals:
        """Score every token as an object box; the top ``num_queries`` seed the object references.

        With fewer tokens than queries the ranking is cycled.
        """
        b, t, _ = memory.shape
        h = self.enc_norm(memory)
        logits = self.enc_score(h)
        anchors = token_anchors(t, memory.dtype)
        boxes = (self.enc_box(h) + inverse_sigmoid(anchors)).sigmoid()
        with torch.no_grad():
            order = torch.argsort(logits[..., 0], dim=1, descending=True, stable=True)
            pick = order[:, torch.arange(self.cfg.num_queries) % t]
            refs = torch.gather(boxes, 1, pick[..., None].expand(-1, -1, 4))
        return Proposals(logits=logits, boxes=boxes, refs=refs.detach())

    def _query_pos(self, refs: torch.Tensor) -> torch.Tensor:
        return self.ref_pos(_sine_features(refs, self.box_freqs))

    def apply_layer(self, index: int, q: QueryBundle, memory: torch.Tensor, memory_pos: torch.Tensor) -> QueryBundle:
        nq = q.object_queries.shape[1]
        if q.object_queries.shape[-1] != memory.shape[-1]:
            raise ValueError("query and memory widths differ")
        if q.object_refs is None:
            raise ValueError("object queries need reference boxes")
        if q.has_dn:
            x = torch.cat((q.object_queries, q.dn_queries), dim=1)
            refs = torch.cat((q.object_refs, q.dn_refs), dim=1)
            allowed = attention_mask(nq, q.groups, q.group_size, q.dn_valid)
        else:
            x = q.object_queries
            refs = q.object_refs
            allowed = None
        bias = None
        if self.cfg.box_attention > 0:
            centers = token_anchors(memory.shape[1], memory.dtype)[:, :2]
            bias = box_attention_bias(refs, centers, self.cfg.box_attention)
        y = self.layers[index](x, memory, memory_pos, allowed, self._query_pos(refs), bias)
        if q.has_dn:
            return replace(q, object_queries=y[:, :nq], dn_queries=y[:, nq:])
        return replace(q, object_queries=y)

    def heads(self, index: int, q: QueryBundle, parallel: bool, inputs: QueryBundle) -> LayerOutput:
        """Predict from the layer's hidden state; boxes correct the references in ``inputs``.

        ``hidden`` of the result carries the corrected boxes as the next references.
        """
        h = self.head_norm(q.object_queries)
        boxes = (self.box_head(h) + inverse_sigmoid(inputs.object_refs)).sigmoid()
        out = LayerOutput(
            layer_index=index,
            logits=self.cls_head(h),
            boxes=boxes,
            parallel=parallel,
            inputs=inputs,
        )
        next_refs = dict(object_refs=boxes.detach())
        if q.has_dn:
            b = h.shape[0]
            hd = self.head_norm(q.dn_queries)
            dn_boxes = (self.box_head(hd) + inverse_sigmoid(inputs.dn_refs)).sigmoid()
            out.dn_logits = self.cls_head(hd).view(b, q.groups, q.group_size, -1)
            out.dn_boxes = dn_boxes.view(b, q.groups, q.group_size, 4)
            next_refs["dn_refs"] = dn_boxes.detach()
        out.hidden = replace(q, **next_refs)
        return out

    def forward_hybrid(
        self,
        memory: torch.Tensor,
        memory_pos: torch.Tensor,
        mode: Mode = "infer",
        targets: DenoisingTargets | None = None,
        dn_cfg: DenoisingConfig | None = None,
        reinit_rng: np.random.Generator | None = None,
        dn_generator: torch.Generator | None = None,
        q0: QueryBundle | None = None,
        proposals: Proposals | None = None,
    ) -> list[LayerOutput]:
        """Run the stacked prefix then every parallel branch; one output per layer."""
        cfg = self.cfg
        if q0 is None:
            if proposals is None:
                proposals = self.propose(memory)
            q0 = self.initial_bundle(proposals.refs, mode, targets, dn_cfg, dn_generator)
        use_dn = mode == "train" and q0.has_dn
        outputs: list[LayerOutput] = []
        q = q0
        for i in range(cfg.num_stacked):
            out = self.heads(i, self.apply_layer(i, q, memory, memory_pos), False, q)
            outputs.append(out)
            q = out.hidden
        trunk = q
        for i in range(cfg.num_stacked, cfg.num_layers):
            inp = trunk
            if use_dn:
                if reinit_rng is None:
                    raise ValueError("training with denoising queries needs a re-init random stream")
                inp = self.reinit_dn(trunk, targets, dn_cfg, reinit_rng, dn_generator)
            out = self.apply_layer(i, inp, memory, memory_pos)
            outputs.append(self.heads(i, out, True, inp))
        return outputs

    def forward_sequential(
        self, memory: torch.Tensor, memory_pos: torch.Tensor, q0: QueryBundle
    ) -> list[LayerOutput]:
        """Plain layer-by-layer refinement over all layers, ignoring the hybrid split."""
        outputs = []
        q = q0
        for i in range(self.cfg.num_layers):
            out = self.heads(i, self.apply_layer(i, q, memory, memory_pos), False, q)
            outputs.append(out)
            q = out.hidden
        return outputs

    def initial_bundle(
        self,
        refs: torch.Tensor,
        mode: Mode,
        targets: DenoisingTargets | None,
        dn_cfg: DenoisingConfig | None,
        generator: torch.Generator | None,
    ) -> QueryBundle:
        obj = self.initial_queries(refs.shape[0])
        if mode != "train" or targets is None or dn_cfg is None or targets.size == 0:
            return QueryBundle(object_queries=obj, object_refs=refs)
        dn = self.build_dn(targets, dn_cfg, generator, INHERITED)
        return replace(dn, object_queries=obj, object_refs=refs)


def aggregate(
    outputs: list[LayerOutput], space: Literal["prob", "logit"] = "prob"
) -> tuple[torch.Tensor, torch.Tensor]:
    """Average boxes and class probabilities over layers.

    Returns ``(boxes, probs)`` shaped (B, Nq, 4) and (B, Nq, C).
    """
    if not outputs:
        raise ValueError("cannot aggregate an empty list of layer outputs")
    boxes = torch.stack([o.boxes for o in outputs]).mean(0)
    if space == "prob":
        probs = torch.stack([o.logits.sigmoid() for o in outputs]).mean(0)
    else:
        probs = torch.stack([o.logits for o in outputs]).mean(0).sigmoid()
    return boxes, probs


def embed_dn_query(
    decoder: HybridDecoder, box: Box, category: int, cfg: DenoisingConfig, rng: np.random.Generator
) -> torch.Tensor:
    """Embed one perturbed GT object into a d_model vector."""
    if not 0 <= category < decoder.num_categories:
        raise ValueError(f"unknown category {category}")
    noisy = perturb_box(box, cfg, rng)
    t = torch.tensor(noisy.as_tuple(), dtype=decoder.box_embed.weight.dtype)
    return decoder.embed_dn(t, torch.tensor(category))
