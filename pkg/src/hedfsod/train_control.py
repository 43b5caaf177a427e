"""Fine-tuning control: plateau LR decay, two-stage unfreezing, augmentation, fit loop.

The scheduler and stage controller are pure functions over small frozen
state records, so a scripted metric sequence can be replayed without a
model. :func:`fit` wires them to an optimizer.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint, state_to_numpy
from .data import DetectionSplit, Sample
from .detector import Detector, image_to_tensor
from .evaluator import compute_map
from .rng import numpy_stream, torch_stream

DECODER_GROUP = "decoder"
BACKBONE_GROUP = "backbone"


class DivergenceError(RuntimeError):
    pass


# -- plateau scheduler ---------------------------------------------------------


@dataclass(frozen=True)
class PlateauState:
    lrs: tuple[float, ...]
    patience: int
    factor: float = 0.5
    min_lr: float = 1e-6
    eps: float = 1e-8
    best_metric: float = -math.inf
    epochs_since_improve: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 0 or self.epochs_since_improve < 0:
            raise ValueError("patience and counter must be >= 0")
        if any(lr < self.min_lr for lr in self.lrs):
            raise ValueError("learning rate below min_lr")


def plateau_step(state: PlateauState, metric: float) -> tuple[PlateauState, bool]:
    """Advance one epoch (mode max). Returns the new state and whether LRs decayed.

    A decay fires once the number of consecutive non-improving epochs
    exceeds ``patience``; it scales every group by ``factor`` (floored at
    ``min_lr``) and resets the counter. ``decayed`` is true only if some LR
    actually moved.
    """
    if not math.isfinite(metric):
        raise ValueError(f"metric must be finite, got {metric}")
    if metric > state.best_metric + state.eps:
        return replace(state, best_metric=metric, epochs_since_improve=0), False
    count = state.epochs_since_improve + 1
    if count <= state.patience:
        return replace(state, epochs_since_improve=count), False
    new = tuple(max(lr * state.factor, state.min_lr) for lr in state.lrs)
    decayed = any(n < old for n, old in zip(new, state.lrs))
    return replace(state, lrs=new, epochs_since_improve=0), decayed


# -- progressive stages --------------------------------------------------------


@dataclass(frozen=True)
class ProgressiveState:
    stage: int = 1
    encoder_frozen: bool = True
    stage1_patience: int = 3
    stage2_patience: int = 8

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.stage == 1 and not self.encoder_frozen:
            raise ValueError("stage 1 keeps the encoder frozen")

    @property
    def patience(self) -> int:
        return self.stage1_patience if self.stage == 1 else self.stage2_patience


def progressive_step(p: ProgressiveState, decayed: bool) -> ProgressiveState:
    """The first decay in stage 1 unfreezes everything; stage 2 is absorbing."""
    if p.stage == 1 and decayed:
        return replace(p, stage=2, encoder_frozen=False)
    return p


# -- parameter groups ------------------------------------------------------------


def make_param_groups(
    model: Detector, lr_decoder: float = 1e-4, lr_backbone: float = 2e-5, weight_decay: float = 0.05
) -> list[dict]:
    """Two groups, decoder+heads and backbone+encoder, partitioning all parameters."""
    dec, bb = [], []
    names_seen: set[str] = set()
    for name, p in model.named_parameters():
        if name in names_seen:
            raise ValueError(f"parameter {name} listed twice")
        names_seen.add(name)
        (bb if model.is_backbone_param(name) else dec).append(p)
    groups = [
        {"name": DECODER_GROUP, "params": dec, "lr": lr_decoder, "initial_lr": lr_decoder, "weight_decay": weight_decay},
        {"name": BACKBONE_GROUP, "params": bb, "lr": lr_backbone, "initial_lr": lr_backbone, "weight_decay": weight_decay},
    ]
    check_partition(model, groups)
    return groups


def check_partition(model: torch.nn.Module, groups: Sequence[dict]) -> None:
    ids = [id(p) for g in groups for p in g["params"]]
    if len(ids) != len(set(ids)):
        raise ValueError("a parameter is assigned to two groups")
    missing = [n for n, p in model.named_parameters() if id(p) not in set(ids)]
    if missing:
        raise ValueError(f"parameters in no group: {missing[:5]}")


def set_encoder_frozen(model: Detector, frozen: bool) -> None:
    for name, p in model.named_parameters():
        if model.is_backbone_param(name):
            p.requires_grad_(not frozen)


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    color_jitter_prob: float = 0.5
    mixup_prob: float = 0.3
    jitter_strength: float = 0.2
    mixup_range: tuple[float, float] = (0.4, 0.6)

    def __post_init__(self) -> None:
        for name in ("flip_prob", "color_jitter_prob", "mixup_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


NO_AUGMENT = AugmentPolicy(0.0, 0.0, 0.0)


def flip(sample: Sample) -> Sample:
    boxes = sample.boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return Sample(sample.image[:, ::-1].copy(), sample.labels.copy(), boxes)


def augment(sample: Sample, policy: AugmentPolicy, rng: np.random.Generator, partner: Sample | None = None) -> Sample:
    """Random flip, per-channel colour jitter, then mixup with ``partner``.

    A fixed number of draws is consumed whatever the outcome, so the stream
    stays aligned across samples and policies.
    """
    u_flip, u_jit, u_mix = rng.random(3)
    scale = 1.0 + rng.uniform(-policy.jitter_strength, policy.jitter_strength, 3)
    shift = rng.uniform(-policy.jitter_strength, policy.jitter_strength, 3)
    lam = rng.uniform(*policy.mixup_range)
    out = sample
    if u_flip < policy.flip_prob:
        out = flip(out)
    if u_jit < policy.color_jitter_prob:
        img = np.clip(out.image * scale + shift, 0.0, 1.0).astype(np.float32)
        out = Sample(img, out.labels, out.boxes)
    if partner is not None and u_mix < policy.mixup_prob:
        img = (lam * out.image + (1.0 - lam) * partner.image).astype(np.float32)
        out = Sample(
            img,
            np.concatenate((out.labels, partner.labels)),
            np.concatenate((out.boxes, partner.boxes)).astype(np.float32),
        )
    return out


# -- training loop ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr_decoder: float = 1e-4
    lr_backbone: float = 2e-5
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    factor: float = 0.5
    patience_single: int = 5
    patience_stage1: int = 3
    patience_stage2: int = 8
    progressive: bool = True
    scheduler: str = "plateau"  # or "cosine"
    raw_resume: bool = False
    grad_clip: float = 1.0
    eps: float = 1e-8
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.scheduler not in ("plateau", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if min(self.lr_decoder, self.lr_backbone) < self.min_lr:
            raise ValueError("initial learning rates must be >= min_lr")


@dataclass
class FitResult:
    best_state: dict[str, np.ndarray]
    best_metric: float
    best_epoch: int
    log: list[dict]
    checkpoint: Path | None = None


def collate(samples: Sequence[Sample]) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
    images = torch.stack([image_to_tensor(s.image) for s in samples])
    labels = [torch.from_numpy(s.labels) for s in samples]
    boxes = [torch.from_numpy(s.boxes) for s in samples]
    return images, labels, boxes


def validation_map(model: Detector, split: DetectionSplit, batch_size: int = 64) -> float:
    model.eval()
    images = torch.stack([image_to_tensor(im) for im in split.images])
    dets = model.predict_batch(images, top_k=100, batch_size=batch_size)
    return compute_map(split.to_global(dets), split.gts(), split.category_ids).map


def cosine_lr(initial: float, min_lr: float, epoch: int, total: int) -> float:
    return min_lr + (initial - min_lr) * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


class Controller:
    """LR and stage bookkeeping for one run; pure state plus small glue."""

    def __init__(self, cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.initial = (cfg.lr_decoder, cfg.lr_backbone)
        self.progress = ProgressiveState(stage1_patience=cfg.patience_stage1, stage2_patience=cfg.patience_stage2)
        if not cfg.progressive:
            self.progress = replace(self.progress, stage=2, encoder_frozen=False)
        patience = self.progress.patience if cfg.progressive else cfg.patience_single
        self.plateau = PlateauState(self.initial, patience, cfg.factor, cfg.min_lr, cfg.eps)
        self.transition_epoch: int | None = None

    @property
    def lrs(self) -> tuple[float, ...]:
        return self.plateau.lrs

    def begin_epoch(self, epoch: int) -> None:
        """Cosine mode sets LRs up front and switches stage at the halfway epoch."""
        if self.cfg.scheduler != "cosine":
            return
        lrs = tuple(cosine_lr(i, self.cfg.min_lr, epoch, self.cfg.epochs) for i in self.initial)
        self.plateau = replace(self.plateau, lrs=lrs)
        if self.cfg.progressive and self.progress.stage == 1 and epoch >= self.cfg.epochs // 2:
            self.progress = progressive_step(self.progress, True)
            self.transition_epoch = epoch

    def end_epoch(self, epoch: int, metric: float) -> bool:
        """Feed the validation metric; returns whether a plateau decay fired."""
        if self.cfg.scheduler == "cosine":
            return False
        self.plateau, decayed = plateau_step(self.plateau, metric)
        if self.cfg.progressive:
            before = self.progress.stage
            self.progress = progressive_step(self.progress, decayed)
            if before == 1 and self.progress.stage == 2:
                self.transition_epoch = epoch
                lrs = list(self.plateau.lrs)
                if self.cfg.raw_resume:
                    lrs[1] = self.initial[1]
                self.plateau = replace(self.plateau, lrs=tuple(lrs), patience=self.progress.patience)
        return decayed


def replay_schedule(cfg: TrainConfig, metrics: Sequence[float]) -> list[dict]:
    """Drive the controller with a scripted metric feed; one row per epoch."""
    ctl = Controller(cfg)
    rows = []
    for epoch, m in enumerate(metrics):
        ctl.begin_epoch(epoch)
        lrs_used = ctl.lrs
        stage = ctl.progress.stage
        decayed = ctl.end_epoch(epoch, m)
        rows.append({"epoch": epoch, "lrs": lrs_used, "stage": stage, "decayed": decayed, "next_lrs": ctl.lrs})
    return rows


def fit(
    model: Detector,
    train: DetectionSplit,
    val: DetectionSplit,
    cfg: TrainConfig,
    seed: int,
    out_dir: Path | str | None = None,
    metric_fn: Callable[[Detector, int], float] | None = None,
) -> FitResult:
    """Fine-tune ``model`` in place and return the best-validation weights.

    ``metric_fn(model, epoch)`` replaces the validation mAP (used for
    scripted schedule tests). With ``out_dir`` a JSONL log and the best
    checkpoint are written there.
    """
    if len(train) == 0:
        raise ValueError("empty training split")
    aug_rng = numpy_stream(seed, "augment")
    shuffle_rng = numpy_stream(seed, "shuffle")
    reinit_rng = numpy_stream(seed, "reinit")
    dn_gen = torch_stream(seed, "dn")

    groups = make_param_groups(model, cfg.lr_decoder, cfg.lr_backbone, cfg.weight_decay)
    opt = torch.optim.AdamW(groups, lr=cfg.lr_decoder, weight_decay=cfg.weight_decay)
    ctl = Controller(cfg)
    set_encoder_frozen(model, ctl.progress.encoder_frozen)
    samples = [train.sample(i) for i in range(len(train))]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "log.jsonl").write_text("", encoding="utf-8")
    log: list[dict] = []
    best_metric, best_epoch, best_state = -math.inf, -1, state_to_numpy(model)

    for epoch in range(cfg.epochs):
        ctl.begin_epoch(epoch)
        set_encoder_frozen(model, ctl.progress.encoder_frozen)
        for g, lr in zip(opt.param_groups, ctl.lrs):
            g["lr"] = lr
        stage, lrs_used = ctl.progress.stage, ctl.lrs
        model.train()
        order = shuffle_rng.permutation(len(samples))
        sums: dict[str, float] = {}
        steps = 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            partners = shuffle_rng.integers(0, len(samples), size=len(idx))
            batch = [augment(samples[i], cfg.augment, aug_rng, samples[j]) for i, j in zip(idx, partners)]
            images, labels, boxes = collate(batch)
            loss = model.forward_train(images, labels, boxes, reinit_rng, dn_gen)
            if not torch.isfinite(loss.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}: {loss.as_floats()}")
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], cfg.grad_clip)
            opt.step()
            for k, v in loss.as_floats().items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        metric = metric_fn(model, epoch) if metric_fn is not None else validation_map(model, val)
        decayed = ctl.end_epoch(epoch, metric)
        improved = metric > best_metric
        if improved:
            best_metric, best_epoch, best_state = metric, epoch, state_to_numpy(model)
        row = {
            "epoch": epoch,
            "stage": stage,
            "encoder_frozen": stage == 1,
            "lr_decoder": lrs_used[0],
            "lr_backbone": lrs_used[1],
            "loss": {k: v / steps for k, v in sums.items()},
            "steps": steps,
            "val_map": metric,
            "decayed": decayed,
            "best_map": best_metric,
        }
        log.append(row)
        if out is not None:
            with (out / "log.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if improved:
                save_checkpoint(out / "best.npz", best_state, model.cfg, {"epoch": epoch, "val_map": metric})

    set_encoder_frozen(model, False)
    ckpt = out / "best.npz" if out is not None else None
    return FitResult(best_state, best_metric, best_epoch, log, ckpt)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
