import json
from dataclasses import asdict

import pytest
import torch

from hedfsod.checkpoint import adapt_categories, read_checkpoint, save_checkpoint, state_to_numpy
from hedfsod import cli
from hedfsod.cli import EXIT_CODES, RunConfig, build_model, load_run_config, main, parse_structure
from hedfsod.data import load_split
from hedfsod.decoder import DecoderConfig
from hedfsod.detector import ModelConfig, build_detector
from hedfsod.evaluator import ScoredBox, detections_to_coco, load_coco_gt
from hedfsod.geometry import Box
from hedfsod.rng import stream_seed
from hedfsod.train_control import replay_schedule

GEN = ["--n-train", "60", "--n-val", "4", "--n-test", "4", "--image-size", "32", "--seed", "0"]


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench") / "b"
    assert main(["generate", "--out", str(root), "--domains", "5", "--shots", "1,5,10", *GEN]) == 0
    return root


def _error_code(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error[")
    return err[len("error[") : err.index("]")]


# -- generate ------------------------------------------------------------------


def test_generate_layout(bench):
    manifest = json.loads((bench / "manifest.json").read_text())
    assert len(manifest["domains"]) == 5
    for d in manifest["domains"]:
        ann = bench / d["name"] / "annotations"
        assert {p.stem for p in ann.glob("train_*shot_seed0.json")} == {f"train_{k}shot_seed0" for k in (1, 5, 10)}


def test_generate_is_deterministic(bench, tmp_path):
    again = tmp_path / "b"
    assert main(["generate", "--out", str(again), "--domains", "5", "--shots", "1,5,10", *GEN]) == 0
    assert (again / "manifest.json").read_bytes() == (bench / "manifest.json").read_bytes()
    for f in bench.rglob("*.json"):
        assert (again / f.relative_to(bench)).read_bytes() == f.read_bytes()


def test_generate_insufficient_shots_fails(tmp_path, capsys):
    code = main(["generate", "--out", str(tmp_path / "x"), "--domains", "1", "--shots", "10",
                 "--n-train", "3", "--n-val", "1", "--n-test", "1", "--image-size", "32"])
    assert code == EXIT_CODES["kshot"] != 0
    assert _error_code(capsys) == "kshot"


def test_usage_errors_use_the_common_format(capsys):
    assert main(["generate", "--domains", "9"]) == EXIT_CODES["usage"]
    assert _error_code(capsys) == "usage"
    assert main(["no-such-command"]) == EXIT_CODES["usage"]


# -- config ----------------------------------------------------------------------


def test_dump_config_reproduces_the_hyperparameter_table(capsys):
    assert main(["train", "--dump-config"]) == 0
    run = json.loads(capsys.readouterr().out)["run"]
    expected = {
        "lr_decoder": 1e-4, "lr_backbone": 2e-5, "min_lr": 1e-6, "weight_decay": 0.05,
        "batch_size": 4, "epochs": 100, "patience_single": 5, "patience_stage1": 3,
        "patience_stage2": 8, "factor": 0.5, "tau": 0.5, "structure": "1+5",
        "flip_prob": 0.5, "color_jitter_prob": 0.5, "mixup_prob": 0.3,
    }
    assert {k: run[k] for k in expected} == expected
    assert run["progressive"] is True and run["scheduler"] == "plateau"


def test_flags_override_config_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"tau": 0.25, "epochs": 7}))
    assert main(["train", "--config", str(path), "--epochs", "3", "--no-progressive", "--dump-config"]) == 0
    run = json.loads(capsys.readouterr().out)["run"]
    assert (run["tau"], run["epochs"], run["progressive"]) == (0.25, 3, False)


def test_unknown_or_mistyped_keys_are_rejected(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"learning_rate": 1e-3}))
    assert main(["train", "--config", str(path), "--dump-config"]) == EXIT_CODES["config"]
    assert "learning_rate" in capsys.readouterr().err
    path.write_text(json.dumps({"epochs": "ten"}))
    assert main(["train", "--config", str(path), "--dump-config"]) == EXIT_CODES["config"]


def test_structure_parsing():
    assert parse_structure("1+5") == (1, 5) and parse_structure("6+0") == (6, 0)
    for bad in ("1+4", "x", "7+-1"):
        with pytest.raises(Exception):
            parse_structure(bad)


def test_cosine_switch_at_half(capsys):
    assert main(["train", "--scheduler", "cosine", "--epochs", "10", "--dump-config"]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["scheduler"] == "cosine"
    rows = replay_schedule(load_run_config(None, {"scheduler": "cosine", "epochs": 10}).train_config(), [0.0] * 10)
    assert [r["stage"] for r in rows].index(2) == 5


def test_run_config_round_trip():
    cfg = RunConfig(tau=0.75, structure="2+4", seed=3)
    assert RunConfig.from_dict(json.loads(json.dumps(asdict(cfg)))) == cfg


# -- train ----------------------------------------------------------------------


def _sequential_checkpoint(path):
    mcfg = ModelConfig(image_size=32, num_categories=12, decoder=DecoderConfig(num_stacked=6, tau=0.0, aggregate="last"))
    model = build_detector(mcfg, seed=0)
    save_checkpoint(path, state_to_numpy(model), mcfg)
    return model


def test_structure_six_plus_zero_is_the_sequential_model(bench, tmp_path):
    seq = _sequential_checkpoint(tmp_path / "seq.npz")
    split = load_split(bench, "filled_noise", "train_1shot_seed0")
    cfg = RunConfig(structure="6+0", aggregate="last", init=str(tmp_path / "seq.npz"))
    model = build_model(cfg, split, 32)
    state, mcfg, _ = read_checkpoint(tmp_path / "seq.npz")
    ref = adapt_categories(state, mcfg, len(split.category_ids), seed=stream_seed(cfg.seed, "init"))
    assert model.cfg.decoder.num_stacked == 6
    images = torch.rand(2, 3, 32, 32)
    model.eval(), ref.eval()
    got, want = model.infer(images), ref.infer(images)
    assert torch.equal(got[0], want[0]) and torch.equal(got[1], want[1])
    # the structure switch changes nothing about the per-layer computation
    with torch.no_grad():
        a = [o.boxes for o in model.run_decoder(images)]
        b = [o.boxes for o in seq.run_decoder(images)]
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_train_writes_checkpoints_and_log(bench, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--benchmark", str(bench), "--domain", "outlined", "--train-split", "train_1shot_seed0",
            "--epochs", "1", "--out", str(out), "--structure", "2+4", "--tau", "1.0"]
    assert main(args) == 0
    assert {"config.json", "best.npz", "final.npz", "log.jsonl"} <= {p.name for p in out.iterdir()}
    _, mcfg, meta = read_checkpoint(out / "best.npz")
    assert mcfg.decoder.num_stacked == 2 and mcfg.decoder.tau == 1.0
    assert json.loads((out / "config.json").read_text())["run"]["structure"] == "2+4"


def test_train_without_domain_is_a_usage_error(capsys):
    assert main(["train"]) == EXIT_CODES["usage"]


def test_missing_checkpoint_is_reported(bench, tmp_path, capsys):
    args = ["train", "--benchmark", str(bench), "--domain", "outlined", "--train-split", "train_1shot_seed0",
            "--init", str(tmp_path / "nope.npz"), "--out", str(tmp_path / "r")]
    assert main(args) == EXIT_CODES["checkpoint"]
    assert _error_code(capsys) == "checkpoint"


# -- eval --------------------------------------------------------------------------


def test_eval_of_perfect_detections_is_100(bench, tmp_path, capsys):
    gt_path = bench / "outlined" / "annotations" / "test.json"
    gts, cats, sizes = load_coco_gt(gt_path)
    dets = {img: [ScoredBox(b, c, 1.0) for b, c in objs] for img, objs in gts.items()}
    (tmp_path / "d.json").write_text(json.dumps(detections_to_coco(dets, sizes)))
    assert main(["eval", "--gt", str(gt_path), "--detections", str(tmp_path / "d.json"), "--out", str(tmp_path / "r.json")]) == 0
    assert "100.00" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["map"] == 100.0


def test_eval_of_a_checkpoint(bench, tmp_path, capsys):
    mcfg = ModelConfig(image_size=32, num_categories=len(load_split(bench, "outlined", "test").category_ids))
    save_checkpoint(tmp_path / "m.npz", state_to_numpy(build_detector(mcfg, 0)), mcfg)
    assert main(["eval", "--checkpoint", str(tmp_path / "m.npz"), "--benchmark", str(bench), "--domain", "outlined"]) == 0
    assert "mAP" in capsys.readouterr().out


def test_mixed_eval_single_domain_has_zero_reduction(tmp_path, capsys, monkeypatch):
    # ground-truth boxes plus one spurious box per image; a random model would score 0 clean mAP
    def oracle(model, split, cats):
        miss = Box.from_corners(0.0, 0.0, 0.05, 0.05)
        return [[ScoredBox(o.box, o.category, 0.9) for o in s.objects] + [ScoredBox(miss, cats[0], 0.95)]
                for s in split.sets]

    monkeypatch.setattr(cli, "_predict_split", oracle)
    root = tmp_path / "one"
    assert main(["generate", "--out", str(root), "--domains", "1", *GEN]) == 0
    name = json.loads((root / "manifest.json").read_text())["domains"][0]["name"]
    n_cat = len(load_split(root, name, "test").category_ids)
    mcfg = ModelConfig(image_size=32, num_categories=n_cat)
    save_checkpoint(tmp_path / "m.npz", state_to_numpy(build_detector(mcfg, 0)), mcfg)
    capsys.readouterr()
    out = tmp_path / "mixed.json"
    assert main(["mixed-eval", "--benchmark", str(root), "--checkpoint", f"{name}=" + str(tmp_path / "m.npz"),
                 "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert {"clean", "mixed", "reduction"} <= set(lines[0].replace("%", " ").split())
    report = json.loads(out.read_text())
    assert report[name]["map_clean"] > 0
    assert report[name]["reduction_rate"] == 0.0 and report["average"]["reduction_rate"] == 0.0


def test_mixed_eval_rejects_unknown_domain(bench, capsys):
    assert main(["mixed-eval", "--benchmark", str(bench), "--checkpoint", "nowhere=x.npz"]) == EXIT_CODES["dataset"]


# -- experiment ----------------------------------------------------------------------


@pytest.mark.filterwarnings("ignore:reduction rate undefined")
def test_experiment_smoke_and_plot(tmp_path, capsys):
    ws = tmp_path / "ws"
    args = ["experiment", "component", "--workspace", str(ws), "--profile", "smoke", "--seeds", "0",
            "--shots", "1", "--domains", "filled_noise"]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "baseline" in out and "+both" in out
    cells = json.loads((ws / "component.json").read_text())
    assert [c["name"] for c in cells] == ["baseline", "+progressive", "+hed", "+both"]
    assert main(["plot", "--results", str(ws / "component.json"), "--out", str(tmp_path / "p.png")]) == 0
    assert (tmp_path / "p.png").stat().st_size > 0
