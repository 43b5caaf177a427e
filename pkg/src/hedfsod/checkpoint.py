"""Checkpoint archives and the sequential -> hybrid conversion.

An archive is a single ``.npz`` of named weight arrays plus a JSON-encoded
model config stored under ``__config__``. Stacked and parallel layers share
parameter names (``decoder.layers.<i>``), so a sequential checkpoint loads
into any hybrid structure with the same depth without renaming.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .assignment import CostWeights
from .decoder import DecoderConfig, DecoderLayer
from .detector import Detector, ModelConfig
from .geometry import DenoisingConfig
from .losses import LossWeights

CONFIG_KEY = "__config__"
META_KEY = "__meta__"


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    return ModelConfig(
        decoder=DecoderConfig(**d.pop("decoder")),
        denoising=DenoisingConfig(**d.pop("denoising")),
        loss=LossWeights(**d.pop("loss")),
        cost=CostWeights(**d.pop("cost")),
        **d,
    )


def state_to_numpy(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def save_checkpoint(
    path: Path | str, state: dict[str, np.ndarray], cfg: ModelConfig, meta: dict | None = None
) -> Path:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = dict(state)
    arrays[CONFIG_KEY] = np.array(json.dumps(config_to_dict(cfg), sort_keys=True))
    arrays[META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: Path | str) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    with np.load(path, allow_pickle=False) as z:
        state = {k: z[k] for k in z.files if k not in (CONFIG_KEY, META_KEY)}
        cfg = config_from_dict(json.loads(str(z[CONFIG_KEY])))
        meta = json.loads(str(z[META_KEY])) if META_KEY in z.files else {}
    return state, cfg, meta


def load_into(model: Detector, state: dict[str, np.ndarray]) -> None:
    """Strict load; raises on any missing or unexpected name or shape mismatch."""
    tensors = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in state.items()}
    model.load_state_dict(tensors, strict=True)


def build_from_state(state: dict[str, np.ndarray], cfg: ModelConfig) -> Detector:
    model = Detector(cfg)
    load_into(model, state)
    return model


def to_hybrid(
    state: dict[str, np.ndarray],
    cfg: ModelConfig,
    num_stacked: int,
    tau: float | None = None,
    parallel_init: str = "pretrained",
    seed: int = 0,
    aggregate: str = "all",
) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Re-target a checkpoint at a (K stacked, L-K parallel) decoder.

    ``parallel_init="pretrained"`` keeps every layer's weights, so parallel
    layer ``i`` starts from the sequential layer at the same depth.
    ``"random"`` re-draws layers ``K..L-1`` from a fresh seeded init. Inputs
    are not modified.
    """
    if parallel_init not in ("pretrained", "random"):
        raise ValueError(f"unknown parallel_init {parallel_init!r}")
    dec = replace(
        cfg.decoder,
        num_stacked=num_stacked,
        tau=cfg.decoder.tau if tau is None else tau,
        aggregate=aggregate,
    )
    new_cfg = replace(cfg, decoder=dec)
    out = {k: v.copy() for k, v in state.items()}
    if parallel_init == "random":
        g = torch.Generator().manual_seed(seed)
        for i in range(num_stacked, dec.num_layers):
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=g)))
                fresh = DecoderLayer(dec.d_model, dec.n_heads, dec.ffn_dim)
            for k, v in fresh.state_dict().items():
                out[f"decoder.layers.{i}.{k}"] = v.numpy().copy()
    return out, new_cfg


def reset_vocabulary(model: Detector, seed: int) -> None:
    """Fresh class head and category embedding for a new label space."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model.decoder.label_embed.reset_parameters()
        model.decoder.reset_cls_head()


VOCABULARY_PREFIXES = ("decoder.cls_head.", "decoder.label_embed.")


def adapt_categories(state: dict[str, np.ndarray], cfg: ModelConfig, num_categories: int, seed: int) -> Detector:
    """Detector for a new label space that inherits every non-vocabulary weight.

    Classification head and category embedding are freshly drawn from ``seed``;
    all other names must load without mismatch.
    """
    new_cfg = replace(cfg, num_categories=num_categories)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Detector(new_cfg)
    kept = {k: v for k, v in state.items() if not k.startswith(VOCABULARY_PREFIXES)}
    tensors = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in kept.items()}
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    stray = [k for k in missing if not k.startswith(VOCABULARY_PREFIXES)]
    if stray or unexpected:
        raise KeyError(f"checkpoint mismatch: missing {stray}, unexpected {list(unexpected)}")
    return model
