"""Command-line entry point: ``hedfsod <command> [flags]``.

Every failure is reported on stderr as ``error[<code>]: <message>`` with a
nonzero exit status. One ``--seed`` drives all randomness through named
substreams (see ``hedfsod.rng``): ``data`` for K-shot sampling, ``init``
for fresh weights, ``augment``, ``shuffle``, ``dn`` for box noise and
``reinit`` for the per-branch denoising-query draws.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import torch

from .checkpoint import adapt_categories, read_checkpoint, save_checkpoint, to_hybrid
from .data import DetectionSplit, load_split, read_manifest
from .decoder import DecoderConfig
from .detector import Detector, ModelConfig, build_detector, image_to_tensor
from .evaluator import (
    RobustnessReport,
    average_reports,
    compute_map,
    format_eval_table,
    format_robustness_table,
    load_coco_gt,
    load_detections,
    robustness_from_detections,
    write_report,
)
from .experiments import (
    GRIDS,
    SMOKE_PROFILE,
    DeskProfile,
    Workspace,
    cells_to_json,
    format_clean_mixed_table,
    format_map_table,
    format_robustness_rows,
    plot_reduction,
    split_detections,
)
from .rng import stream_seed
from .synthbench import DEFAULT_DOMAINS, DatasetError, KShotError, generate_benchmark
from .train_control import AugmentPolicy, DivergenceError, TrainConfig, config_dict, fit

EXIT_CODES = {"usage": 2, "config": 3, "dataset": 4, "kshot": 5, "checkpoint": 6, "io": 7, "train": 8}


class CliError(Exception):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(message)
        self.code = code


# -- run configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Fine-tuning hyperparameters (full-scale defaults) plus data locations."""

    lr_decoder: float = 1e-4
    lr_backbone: float = 2e-5
    min_lr: float = 1e-6
    weight_decay: float = 0.05
    batch_size: int = 4
    epochs: int = 100
    patience_single: int = 5
    patience_stage1: int = 3
    patience_stage2: int = 8
    factor: float = 0.5
    tau: float = 0.5
    structure: str = "1+5"
    flip_prob: float = 0.5
    color_jitter_prob: float = 0.5
    mixup_prob: float = 0.3
    progressive: bool = True
    scheduler: str = "plateau"
    parallel_init: str = "pretrained"
    raw_resume: bool = False
    aggregate: str = "all"
    benchmark: str = "benchmark"
    domain: str = ""
    train_split: str = "train_5shot_seed0"
    val_split: str = "val"
    init: str = ""
    out: str = "run"
    seed: int = 0
    device: str = "cpu"
    workers: int = 1

    def __post_init__(self) -> None:
        parse_structure(self.structure)
        if self.device != "cpu":
            raise CliError("config", f"device {self.device!r} unsupported; this build is CPU-only")
        if self.workers != 1:
            raise CliError("config", "only workers=1 is supported (reproducible single-process runs)")
        try:
            self.train_config()
            DecoderConfig(num_stacked=self.num_stacked, tau=self.tau, aggregate=self.aggregate)
        except ValueError as e:
            raise CliError("config", str(e)) from None
        if self.parallel_init not in ("pretrained", "random"):
            raise CliError("config", f"unknown parallel_init {self.parallel_init!r}")

    @property
    def num_stacked(self) -> int:
        return parse_structure(self.structure)[0]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_decoder=self.lr_decoder,
            lr_backbone=self.lr_backbone,
            min_lr=self.min_lr,
            weight_decay=self.weight_decay,
            factor=self.factor,
            patience_single=self.patience_single,
            patience_stage1=self.patience_stage1,
            patience_stage2=self.patience_stage2,
            progressive=self.progressive,
            scheduler=self.scheduler,
            raw_resume=self.raw_resume,
            augment=AugmentPolicy(self.flip_prob, self.color_jitter_prob, self.mixup_prob),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise CliError("config", f"unknown config keys: {', '.join(unknown)}")
        defaults = cls()
        for k, v in d.items():
            want = type(getattr(defaults, k))
            ok = isinstance(v, want) and not (want is not bool and isinstance(v, bool))
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                ok = True
            if not ok:
                raise CliError("config", f"config key {k!r} expects {want.__name__}, got {type(v).__name__}")
        return cls(**{k: (float(v) if type(getattr(defaults, k)) is float else v) for k, v in d.items()})


def parse_structure(text: str) -> tuple[int, int]:
    """``"K+P"`` -> (K, P); the decoder depth is fixed at K + P = 6."""
    try:
        k, p = (int(x) for x in text.split("+"))
    except ValueError:
        raise CliError("config", f"structure must look like K+P, got {text!r}") from None
    if k < 0 or p < 0 or k + p != DecoderConfig().num_layers:
        raise CliError("config", f"structure {text!r} must use {DecoderConfig().num_layers} layers in total")
    return k, p


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    base: dict = {}
    if path:
        try:
            base = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise CliError("io", f"cannot read config {path}: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise CliError("config", f"config {path} is not valid JSON: {e.msg}") from None
        if not isinstance(base, dict):
            raise CliError("config", "config file must hold a JSON object")
    base.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(base)


# -- commands ---------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError("usage", f"expected comma-separated integers, got {text!r}") from None


def cmd_generate(args) -> int:
    if not 1 <= args.domains <= len(DEFAULT_DOMAINS):
        raise CliError("usage", f"--domains must lie in [1, {len(DEFAULT_DOMAINS)}]")
    out = generate_benchmark(
        args.out,
        DEFAULT_DOMAINS[: args.domains],
        args.n_train,
        args.n_val,
        args.n_test,
        args.seed,
        _int_list(args.shots) if args.shots else (),
        args.image_size,
    )
    print(f"wrote {args.domains} domains to {out}")
    return 0


def build_model(cfg: RunConfig, split: DetectionSplit, image_size: int) -> Detector:
    """Fresh model, or a checkpoint adapted to the target structure and label space."""
    k = cfg.num_stacked
    init_seed = stream_seed(cfg.seed, "init")
    if not cfg.init:
        mcfg = ModelConfig(
            image_size=image_size,
            num_categories=len(split.category_ids),
            decoder=DecoderConfig(num_stacked=k, tau=cfg.tau, aggregate=cfg.aggregate),
        )
        return build_detector(mcfg, init_seed)
    try:
        state, mcfg, _ = read_checkpoint(cfg.init)
    except (OSError, KeyError, ValueError) as e:
        raise CliError("checkpoint", f"cannot read checkpoint {cfg.init}: {e}") from None
    if mcfg.image_size != image_size:
        raise CliError("checkpoint", f"checkpoint image size {mcfg.image_size} != benchmark image size {image_size}")
    state, mcfg = to_hybrid(state, mcfg, k, cfg.tau, cfg.parallel_init, init_seed, cfg.aggregate)
    return adapt_categories(state, mcfg, len(split.category_ids), init_seed)


def _image_size(root: str, domain: str) -> int:
    for d in read_manifest(root)["domains"]:
        if d["name"] == domain:
            return int(d["image_size"])
    raise DatasetError(f"domain {domain!r} not in manifest")


def cmd_train(args) -> int:
    overrides = {
        "benchmark": args.benchmark,
        "domain": args.domain,
        "train_split": args.train_split,
        "val_split": args.val_split,
        "init": args.init,
        "out": args.out,
        "seed": args.seed,
        "structure": args.structure,
        "tau": args.tau,
        "scheduler": args.scheduler,
        "parallel_init": args.parallel_init,
        "epochs": args.epochs,
        "progressive": False if args.no_progressive else None,
    }
    cfg = load_run_config(args.config, overrides)
    resolved = {"run": asdict(cfg), "train": config_dict(cfg.train_config())}
    if args.dump_config:
        print(json.dumps(resolved, indent=1, sort_keys=True))
        return 0
    if not cfg.domain:
        raise CliError("usage", "no domain given (--domain or config key 'domain')")
    train = load_split(cfg.benchmark, cfg.domain, cfg.train_split)
    val = load_split(cfg.benchmark, cfg.domain, cfg.val_split)
    model = build_model(cfg, train, _image_size(cfg.benchmark, cfg.domain))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True), encoding="utf-8")
    try:
        res = fit(model, train, val, cfg.train_config(), cfg.seed, out_dir=out)
    except DivergenceError as e:
        raise CliError("train", str(e)) from None
    save_checkpoint(out / "final.npz", res.best_state, model.cfg, {"val_map": res.best_metric, "epoch": res.best_epoch})
    print(f"best val mAP {res.best_metric:.2f} at epoch {res.best_epoch}; checkpoint {out / 'best.npz'}")
    return 0


def _model_from_checkpoint(path: str) -> Detector:
    try:
        state, mcfg, _ = read_checkpoint(path)
    except (OSError, KeyError, ValueError) as e:
        raise CliError("checkpoint", f"cannot read checkpoint {path}: {e}") from None
    model = Detector(mcfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in state.items()})
    model.eval()
    return model


def _predict_split(model: Detector, split: DetectionSplit, category_ids: Sequence[int]):
    images = torch.stack([image_to_tensor(im) for im in split.images])
    return split_detections(model, images, split.sets, category_ids)


def cmd_eval(args) -> int:
    if args.detections:
        if not args.gt:
            raise CliError("usage", "--detections needs --gt")
        gts, cats, sizes = load_coco_gt(args.gt)
        dets = load_detections(args.detections, sizes)
    else:
        if not (args.checkpoint and args.benchmark and args.domain):
            raise CliError("usage", "give --gt/--detections or --checkpoint/--benchmark/--domain")
        split = load_split(args.benchmark, args.domain, args.split)
        model = _model_from_checkpoint(args.checkpoint)
        cats = split.category_ids
        if model.cfg.num_categories != len(cats):
            raise CliError("checkpoint", f"checkpoint has {model.cfg.num_categories} categories, split has {len(cats)}")
        gts = split.gts()
        dets = dict(zip((s.image_id for s in split.sets), _predict_split(model, split, cats)))
    result = compute_map(dets, gts, cats)
    print(format_eval_table(result))
    if args.out:
        write_report(args.out, result)
    return 0


def cmd_mixed_eval(args) -> int:
    """Five-round rotation: each checkpointed domain is the target once."""
    manifest = read_manifest(args.benchmark)
    names = [d["name"] for d in manifest["domains"]]
    pairs = []
    for item in args.checkpoint:
        if "=" not in item:
            raise CliError("usage", f"--checkpoint expects DOMAIN=PATH, got {item!r}")
        dom, path = item.split("=", 1)
        if dom not in names:
            raise CliError("dataset", f"domain {dom!r} not in manifest")
        pairs.append((dom, path))
    tests = {n: load_split(args.benchmark, n, args.split) for n in names}
    rows: list[tuple[str, RobustnessReport]] = []
    for dom, path in pairs:
        model = _model_from_checkpoint(path)
        cats = tests[dom].category_ids
        dets, gts = {}, {}
        for n, split in tests.items():
            for s, d in zip(split.sets, _predict_split(model, split, cats)):
                key = f"{n}/{s.image_id}"
                dets[key] = d
                gts[key] = [(o.box, o.category) for o in s.objects] if n == dom else []
        target = [f"{dom}/{s.image_id}" for s in tests[dom].sets]
        rows.append((dom, robustness_from_detections(dets, gts, target, cats)))
    if not rows:
        raise CliError("usage", "no --checkpoint given")
    rows.append(("average", average_reports([r for _, r in rows])))
    print(format_robustness_table(rows))
    if args.out:
        write_report(args.out, {name: asdict(r) for name, r in rows})
    return 0


def cmd_experiment(args) -> int:
    profile = SMOKE_PROFILE if args.profile == "smoke" else DeskProfile()
    if args.finetune_epochs:
        profile = replace(profile, finetune_epochs=args.finetune_epochs)
    ws = Workspace(args.workspace, profile, log=lambda m: print(m, file=sys.stderr, flush=True))
    ws.ensure_benchmark()
    kwargs = {"seeds": _int_list(args.seeds)}
    if args.shots:
        kwargs["shots"] = _int_list(args.shots)
    if args.domains:
        kwargs["domains"] = args.domains.split(",")
    cells = GRIDS[args.grid](ws, **kwargs)
    if args.grid == "robustness":
        print(format_robustness_rows(cells))
    elif args.grid in ("scheduler", "parallel-init"):
        print(format_clean_mixed_table(cells))
    else:
        print(format_map_table(cells))
    out = Path(args.out) if args.out else Path(args.workspace) / f"{args.grid}.json"
    out.write_text(json.dumps(cells_to_json(cells), indent=1), encoding="utf-8")
    print(f"results: {out}")
    return 0


def cmd_plot(args) -> int:
    try:
        cells = json.loads(Path(args.results).read_text(encoding="utf-8"))
    except OSError as e:
        raise CliError("io", f"cannot read results {args.results}: {e.strerror}") from None
    print(f"wrote {plot_reduction(cells, args.out)}")
    return 0


# -- parser -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # route argparse failures through the common format
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hedfsod", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render the synthetic benchmark")
    g.add_argument("--out", default="benchmark")
    g.add_argument("--domains", type=int, default=len(DEFAULT_DOMAINS))
    g.add_argument("--shots", default="", help="comma-separated K values, e.g. 1,5,10")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-val", type=int, default=100)
    g.add_argument("--n-test", type=int, default=200)
    g.add_argument("--image-size", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fine-tune on one domain")
    t.add_argument("--config", help="JSON run config; flags override its keys")
    t.add_argument("--benchmark")
    t.add_argument("--domain")
    t.add_argument("--train-split")
    t.add_argument("--val-split")
    t.add_argument("--init", help="checkpoint to start from (head is re-drawn for the new categories)")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--structure", help="K+P stacked and parallel layers, e.g. 1+5 or 6+0")
    t.add_argument("--tau", type=float)
    t.add_argument("--scheduler", choices=("plateau", "cosine"))
    t.add_argument("--parallel-init", choices=("pretrained", "random"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--no-progressive", action="store_true")
    t.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mAP of a checkpoint or a detections file")
    e.add_argument("--gt")
    e.add_argument("--detections")
    e.add_argument("--checkpoint")
    e.add_argument("--benchmark")
    e.add_argument("--domain")
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mixed-eval", help="clean vs mixed-domain mAP per target domain")
    m.add_argument("--benchmark", required=True)
    m.add_argument("--checkpoint", action="append", default=[], help="DOMAIN=PATH, repeatable")
    m.add_argument("--split", default="test")
    m.add_argument("--out")
    m.set_defaults(func=cmd_mixed_eval)

    x = sub.add_parser("experiment", help="run an ablation grid")
    x.add_argument("grid", choices=sorted(GRIDS))
    x.add_argument("--workspace", default="workspace")
    x.add_argument("--profile", choices=("desk", "smoke"), default="desk")
    x.add_argument("--seeds", default="0,1,2")
    x.add_argument("--shots", default="")
    x.add_argument("--domains", default="")
    x.add_argument("--finetune-epochs", type=int, default=0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)

    pl = sub.add_parser("plot", help="bar chart of reduction rates from experiment results")
    pl.add_argument("--results", required=True)
    pl.add_argument("--out", default="reduction.png")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as e:
        code = e.code
        msg = str(e)
    except KShotError as e:
        code, msg = "kshot", str(e)
    except DatasetError as e:
        code, msg = "dataset", str(e)
    except OSError as e:
        code, msg = "io", f"{e.filename or ''}: {e.strerror or e}".strip(": ")
    print(f"error[{code}]: {msg}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
