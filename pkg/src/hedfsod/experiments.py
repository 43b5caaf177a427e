"""Desk-scale ablation grids on the synthetic benchmark.

A *run* fine-tunes the cached base detector on one target domain for one
(shots, seed) pair and records clean test mAP plus the mixed-set robustness
report. A *cell* averages runs over domains; tables aggregate cells over
seeds. Run records are JSON files keyed by a hash of the full configuration,
so interrupted grids resume where they stopped.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .checkpoint import adapt_categories, read_checkpoint, save_checkpoint, to_hybrid
from .data import DetectionSplit, load_split, read_manifest, render_split, subset
from .decoder import DecoderConfig
from .detector import Detector, ModelConfig, build_detector, image_to_tensor
from .evaluator import (
    RobustnessReport,
    ScoredBox,
    average_reports,
    robustness_from_detections,
)
from .rng import stream_seed
from .synthbench import BASE_DOMAIN, DEFAULT_DOMAINS, generate_benchmark, sample_kshot
from .train_control import NO_AUGMENT, AugmentPolicy, TrainConfig, fit, validation_map


@dataclass(frozen=True)
class DeskProfile:
    """Everything that scales a run down to CPU minutes.

    Fine-tuning LRs are 10x the full-scale values because a desk run takes
    a few hundred optimizer steps rather than thousands.
    """

    image_size: int = 64
    num_queries: int = 20
    n_train: int = 80
    n_val: int = 30
    n_test: int = 60
    data_seed: int = 0
    base_train: int = 1600
    base_val: int = 40
    pretrain_epochs: int = 40
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 8
    pretrain_seed: int = 0
    finetune_epochs: int = 30
    lr_decoder: float = 1e-3
    lr_backbone: float = 2e-4
    batch_size: int = 4
    # a K-shot set is repeated until an epoch holds at least this many images
    min_epoch_images: int = 48
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)


SMOKE_PROFILE = DeskProfile(
    image_size=32,
    num_queries=6,
    n_train=24,
    n_val=6,
    n_test=6,
    base_train=16,
    base_val=4,
    pretrain_epochs=1,
    finetune_epochs=2,
    min_epoch_images=0,
)


@dataclass(frozen=True)
class Variant:
    """Fine-tuning switches; everything but the data and seed."""

    num_stacked: int = 1
    tau: float = 0.5
    progressive: bool = True
    scheduler: str = "plateau"
    parallel_init: str = "pretrained"
    aggregate: str = "all"
    raw_resume: bool = False

    def __post_init__(self) -> None:
        DecoderConfig(num_stacked=self.num_stacked, tau=self.tau, aggregate=self.aggregate)
        if self.scheduler not in ("plateau", "cosine"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.parallel_init not in ("pretrained", "random"):
            raise ValueError(f"unknown parallel_init {self.parallel_init!r}")


# a sequential decoder reports its final layer, as a plain detector would
BASELINE = Variant(num_stacked=6, tau=0.0, progressive=False, aggregate="last")
PROGRESSIVE = replace(BASELINE, progressive=True)
HED = Variant(progressive=False)
FULL = Variant()
FULL_NO_REINIT = Variant(tau=0.0)

COMPONENT_VARIANTS: dict[str, Variant] = {
    "baseline": BASELINE,
    "+progressive": PROGRESSIVE,
    "+hed": HED,
    "+both": FULL,
}

ROBUSTNESS_VARIANTS: dict[str, Variant] = {
    "baseline": BASELINE,
    "+progressive": PROGRESSIVE,
    "+hed re-init": HED,
    "+progressive +hed no re-init": FULL_NO_REINIT,
    "+progressive +hed re-init": FULL,
}

SCHEDULER_VARIANTS: dict[str, Variant] = {
    "1-stage cosine +hed": Variant(progressive=False, scheduler="cosine"),
    "2-stage cosine +hed": Variant(scheduler="cosine"),
    "2-stage plateau +hed": FULL,
}

PARALLEL_INIT_VARIANTS: dict[str, Variant] = {
    "random parallel layers": Variant(parallel_init="random"),
    "pretrained parallel layers": FULL,
}

STRUCTURES: tuple[tuple[str, int], ...] = (
    ("6-parallel", 0),
    ("4-stacked+2-parallel", 4),
    ("3-stacked+3-parallel", 3),
    ("2-stacked+4-parallel", 2),
    ("1-stacked+5-parallel", 1),
)
TAUS: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)


def structure_variants(taus: Sequence[float] = TAUS) -> dict[str, Variant]:
    """Table rows: sequential with progressive, each structure at tau 0, then the tau sweep on 1+5."""
    rows = {"6-stacked": PROGRESSIVE}
    for name, k in STRUCTURES:
        rows[f"{name} tau=0"] = Variant(num_stacked=k, tau=0.0)
    for t in taus:
        if t != 0.0:
            rows[f"1-stacked+5-parallel tau={t:g}"] = Variant(num_stacked=1, tau=t)
    return rows


@dataclass(frozen=True)
class RunSpec:
    variant: Variant
    domain: str
    shots: int
    seed: int


def stable_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def train_config(profile: DeskProfile, v: Variant) -> TrainConfig:
    return TrainConfig(
        epochs=profile.finetune_epochs,
        batch_size=profile.batch_size,
        lr_decoder=profile.lr_decoder,
        lr_backbone=profile.lr_backbone,
        progressive=v.progressive,
        scheduler=v.scheduler,
        raw_resume=v.raw_resume,
        augment=profile.augment,
    )


# -- workspace -----------------------------------------------------------------


class Workspace:
    """Benchmark, base checkpoint, and run records under one root directory."""

    def __init__(self, root: Path | str, profile: DeskProfile = DeskProfile(), log: Callable[[str], None] | None = None):
        self.root = Path(root)
        self.profile = profile
        self.log = log or (lambda msg: None)
        self._splits: dict[tuple[str, str], DetectionSplit] = {}
        self._base: tuple[dict, ModelConfig] | None = None

    @property
    def bench_dir(self) -> Path:
        return self.root / "benchmark"

    @property
    def runs_dir(self) -> Path:
        return self.root / "runs"

    def profile_key(self) -> str:
        return stable_hash(asdict(self.profile))

    def ensure_benchmark(self) -> Path:
        p = self.profile
        if not (self.bench_dir / "manifest.json").exists():
            self.log(f"generating benchmark in {self.bench_dir}")
            generate_benchmark(
                self.bench_dir, DEFAULT_DOMAINS, p.n_train, p.n_val, p.n_test, p.data_seed, image_size=p.image_size
            )
        return self.bench_dir

    def domains(self) -> list[str]:
        return [d["name"] for d in read_manifest(self.bench_dir)["domains"]]

    def split(self, domain: str, name: str) -> DetectionSplit:
        key = (domain, name)
        if key not in self._splits:
            self._splits[key] = load_split(self.bench_dir, domain, name)
        return self._splits[key]

    # -- pretraining ---------------------------------------------------------

    def base_config(self) -> ModelConfig:
        p = self.profile
        return ModelConfig(
            image_size=p.image_size,
            num_categories=len(BASE_DOMAIN.categories),
            decoder=DecoderConfig(num_stacked=6, tau=0.0, num_queries=p.num_queries, aggregate="last"),
        )

    def pretrain_path(self) -> Path:
        p = self.profile
        fields = {k: getattr(p, k) for k in ("image_size", "num_queries", "base_train", "base_val", "pretrain_epochs",
                                             "pretrain_lr", "pretrain_batch", "pretrain_seed", "data_seed")}
        # model config and parameter layout, so an architecture change never reuses a stale checkpoint
        fields["model"] = asdict(self.base_config())
        fields["params"] = [(n, list(t.shape)) for n, t in Detector(self.base_config()).state_dict().items()]
        return self.root / "pretrain" / f"base_{stable_hash(fields)}.npz"

    def pretrained(self) -> tuple[dict, ModelConfig]:
        """Sequential detector trained on the base domain; built once, then cached."""
        if self._base is not None:
            return self._base
        path = self.pretrain_path()
        if not path.exists():
            p = self.profile
            base = BASE_DOMAIN.with_size(p.image_size)
            self.log(f"pretraining base detector ({p.base_train} images, {p.pretrain_epochs} epochs)")
            t0 = time.time()
            train = render_split(base, p.data_seed, "train", range(p.base_train))
            val = render_split(base, p.data_seed, "val", range(p.base_val))
            cfg = self.base_config()
            model = build_detector(cfg, stream_seed(p.pretrain_seed, "init"))
            tc = TrainConfig(
                epochs=p.pretrain_epochs,
                batch_size=p.pretrain_batch,
                lr_decoder=p.pretrain_lr,
                lr_backbone=p.pretrain_lr,
                progressive=False,
                scheduler="cosine",
                augment=NO_AUGMENT,
            )
            last = p.pretrain_epochs - 1
            res = fit(model, train, val, tc, p.pretrain_seed, metric_fn=lambda m, e: validation_map(m, val) if e == last else 0.0)
            save_checkpoint(path, res.best_state, cfg, {"val_map": res.best_metric, "seconds": time.time() - t0})
            self.log(f"pretraining done: val mAP {res.best_metric:.2f} in {time.time() - t0:.0f}s")
        state, cfg, _ = read_checkpoint(path)
        self._base = (state, cfg)
        return self._base

    # -- runs ----------------------------------------------------------------

    def run_key(self, spec: RunSpec) -> str:
        return stable_hash(
            {"variant": asdict(spec.variant), "domain": spec.domain, "shots": spec.shots, "seed": spec.seed,
             "profile": asdict(self.profile), "pretrain": self.pretrain_path().name}
        )

    def run(self, spec: RunSpec) -> dict:
        """Fine-tune, evaluate clean and mixed; cached by configuration hash."""
        path = self.runs_dir / f"{self.run_key(spec)}.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        record = self._execute(spec)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(path)
        return record

    def finetune(self, spec: RunSpec, out_dir: Path | None = None):
        """Adapt the base detector to ``spec`` and train it.

        Returns the best-validation model, the fit result, and the K-shot image count.
        """
        v = spec.variant
        state, cfg = self.pretrained()
        pool = self.split(spec.domain, "train")
        val = self.split(spec.domain, "val")
        chosen = sample_kshot(pool.sets, pool.category_ids, spec.shots, spec.seed)
        reps = max(1, math.ceil(self.profile.min_epoch_images / len(chosen)))
        train = subset(pool, list(chosen) * reps)
        init_seed = stream_seed(spec.seed, "init")
        hybrid_state, hybrid_cfg = to_hybrid(state, cfg, v.num_stacked, v.tau, v.parallel_init, init_seed, v.aggregate)
        model = adapt_categories(hybrid_state, hybrid_cfg, len(pool.category_ids), init_seed)
        res = fit(model, train, val, train_config(self.profile, v), spec.seed, out_dir=out_dir)
        model.load_state_dict({k: torch.from_numpy(a) for k, a in res.best_state.items()})
        model.eval()
        return model, res, len(chosen)

    def _execute(self, spec: RunSpec) -> dict:
        t0 = time.time()
        model, res, n_train = self.finetune(spec)
        target = self.split(spec.domain, "test")
        dets, gts = {}, {}
        for name in self.domains():
            split = self.split(name, "test")
            images = torch.stack([image_to_tensor(im) for im in split.images])
            out = split_detections(model, images, split.sets, target.category_ids)
            for s, d in zip(split.sets, out):
                key = f"{name}/{s.image_id}"
                dets[key] = d
                gts[key] = [(o.box, o.category) for o in s.objects] if name == spec.domain else []
        target_ids = [f"{spec.domain}/{s.image_id}" for s in target.sets]
        report = robustness_from_detections(dets, gts, target_ids, target.category_ids)
        self.log(f"{spec.domain} {spec.shots}-shot seed {spec.seed}: map {report.map_clean:.2f} "
                 f"mixed {report.map_mixed:.2f} ({time.time() - t0:.0f}s)")
        return {
            "spec": {"variant": asdict(spec.variant), "domain": spec.domain, "shots": spec.shots, "seed": spec.seed},
            "test_map": report.map_clean,
            "mixed_map": report.map_mixed,
            "reduction_rate": report.reduction_rate,
            "val_map": res.best_metric,
            "best_epoch": res.best_epoch,
            "train_images": n_train,
            "seconds": time.time() - t0,
        }


def split_detections(model, images: torch.Tensor, sets, category_ids: Sequence[int]):
    """Detections in global category ids for each image of a split."""
    per_image = model.predict_batch(images, top_k=100)
    return [[ScoredBox(d.box, category_ids[d.category], d.score) for d in dets] for dets in per_image]


# -- grids -----------------------------------------------------------------------


@dataclass
class CellResult:
    """One table cell: per-seed domain means plus the raw records."""

    name: str
    shots: int
    seeds: list[int]
    per_seed_map: list[float]
    per_seed_report: list[RobustnessReport]
    records: list[dict]

    @property
    def mean_map(self) -> float:
        return float(np.mean(self.per_seed_map))

    @property
    def report(self) -> RobustnessReport:
        return average_reports(self.per_seed_report)

    @property
    def mean_abs_reduction(self) -> float:
        return float(np.mean([abs(r.reduction_rate) for r in self.per_seed_report]))


def run_cell(ws: Workspace, name: str, v: Variant, shots: int, seeds: Iterable[int], domains: Sequence[str] | None = None) -> CellResult:
    domains = list(domains or ws.domains())
    seeds = list(seeds)
    per_map, per_report, records = [], [], []
    for seed in seeds:
        recs = [ws.run(RunSpec(v, d, shots, seed)) for d in domains]
        records.extend(recs)
        per_map.append(float(np.mean([r["test_map"] for r in recs])))
        reports = [RobustnessReport(r["test_map"], r["mixed_map"], r["reduction_rate"]) for r in recs]
        per_report.append(average_reports(reports))
    return CellResult(name, shots, seeds, per_map, per_report, records)


def run_grid(ws: Workspace, variants: dict[str, Variant], shots: Sequence[int], seeds: Sequence[int],
             domains: Sequence[str] | None = None) -> list[CellResult]:
    ws.ensure_benchmark()
    return [run_cell(ws, name, v, k, seeds, domains) for name, v in variants.items() for k in shots]


def run_component_ablation(ws: Workspace, shots=(1, 5, 10), seeds=(0, 1, 2), domains=None) -> list[CellResult]:
    return run_grid(ws, COMPONENT_VARIANTS, shots, seeds, domains)


def run_structure_sweep(ws: Workspace, shots=(1, 5), seeds=(0, 1, 2), taus=TAUS, domains=None) -> list[CellResult]:
    return run_grid(ws, structure_variants(taus), shots, seeds, domains)


def run_robustness_study(ws: Workspace, shots=(1, 5, 10), seeds=(0, 1, 2, 3, 4), domains=None) -> list[CellResult]:
    return run_grid(ws, ROBUSTNESS_VARIANTS, shots, seeds, domains)


def run_scheduler_ablation(ws: Workspace, shots=(1, 5, 10), seeds=(0, 1, 2), domains=None) -> list[CellResult]:
    return run_grid(ws, SCHEDULER_VARIANTS, shots, seeds, domains)


def run_parallel_init_ablation(ws: Workspace, shots=(1, 5, 10), seeds=(0, 1, 2), domains=None) -> list[CellResult]:
    return run_grid(ws, PARALLEL_INIT_VARIANTS, shots, seeds, domains)


GRIDS: dict[str, Callable[..., list[CellResult]]] = {
    "component": run_component_ablation,
    "structure": run_structure_sweep,
    "robustness": run_robustness_study,
    "scheduler": run_scheduler_ablation,
    "parallel-init": run_parallel_init_ablation,
}


# -- tables ----------------------------------------------------------------------


def _pivot(cells: Sequence[CellResult]) -> tuple[list[str], list[int], dict[tuple[str, int], CellResult]]:
    names = list(dict.fromkeys(c.name for c in cells))
    shots = sorted({c.shots for c in cells})
    return names, shots, {(c.name, c.shots): c for c in cells}


def format_map_table(cells: Sequence[CellResult]) -> str:
    """Rows are variants, columns are shot counts, entries are mean mAP."""
    names, shots, at = _pivot(cells)
    width = max(len("variant"), *(len(n) for n in names))
    head = f"{'variant':<{width}}" + "".join(f"{f'{k}-shot':>10}" for k in shots)
    lines = [head]
    for n in names:
        row = f"{n:<{width}}"
        for k in shots:
            c = at.get((n, k))
            row += f"{c.mean_map:>10.2f}" if c else f"{'-':>10}"
        lines.append(row)
    return "\n".join(lines)


def format_clean_mixed_table(cells: Sequence[CellResult]) -> str:
    """Entries are ``clean | mixed`` mAP, as in the scheduler and init ablations."""
    names, shots, at = _pivot(cells)
    width = max(len("variant"), *(len(n) for n in names))
    lines = [f"{'variant':<{width}}" + "".join(f"{f'{k}-shot':>18}" for k in shots)]
    for n in names:
        row = f"{n:<{width}}"
        for k in shots:
            c = at.get((n, k))
            row += f"{f'{c.report.map_clean:.2f} | {c.report.map_mixed:.2f}':>18}" if c else f"{'-':>18}"
        lines.append(row)
    return "\n".join(lines)


def format_robustness_rows(cells: Sequence[CellResult]) -> str:
    """Per variant and shot: clean mAP, mixed mAP, reduction rate of the means."""
    width = max(len("variant"), *(len(c.name) for c in cells))
    lines = [f"{'variant':<{width}}  {'shots':>5}  {'clean':>8}  {'mixed':>8}  {'reduction %':>12}"]
    for c in cells:
        r = c.report
        lines.append(f"{c.name:<{width}}  {c.shots:>5}  {r.map_clean:>8.2f}  {r.map_mixed:>8.2f}  {r.reduction_rate:>12.2f}")
    return "\n".join(lines)


def cells_to_json(cells: Sequence[CellResult]) -> list[dict]:
    return [
        {
            "name": c.name,
            "shots": c.shots,
            "seeds": c.seeds,
            "per_seed_map": c.per_seed_map,
            "mean_map": c.mean_map,
            "clean_map": c.report.map_clean,
            "mixed_map": c.report.map_mixed,
            "reduction_rate": c.report.reduction_rate,
            "mean_abs_reduction": c.mean_abs_reduction,
        }
        for c in cells
    ]


def plot_reduction(cells_json: Sequence[dict], path: Path | str) -> Path:
    """Grouped bars of reduction rate per variant, one group per shot count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(dict.fromkeys(c["name"] for c in cells_json))
    shots = sorted({c["shots"] for c in cells_json})
    at = {(c["name"], c["shots"]): c["reduction_rate"] for c in cells_json}
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for i, n in enumerate(names):
        xs = [j + i * width for j in range(len(shots))]
        ax.bar(xs, [at.get((n, k), np.nan) for k in shots], width, label=n)
    ax.set_xticks([j + width * (len(names) - 1) / 2 for j in range(len(shots))])
    ax.set_xticklabels([f"{k}-shot" for k in shots])
    ax.set_ylabel("mAP reduction on mixed set (%)")
    ax.axhline(0.0, color="black", linewidth=0.5)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
