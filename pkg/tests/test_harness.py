import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from grunlab.errors import ConfigError, StageError
from grunlab.harness import (
    ExperimentConfig,
    config_from_dict,
    emit_report,
    load_config,
    quantize_array,
    quantize_roundtrip,
    run_experiment,
    run_sequential,
)
from grunlab.harness import pipeline as P
from grunlab.harness.cli import main
from grunlab.intervention import GrunModule, GrunStack
from grunlab.model import ModelConfig, build_model, load_checkpoint

TINY = {
    "corpus": {"n_entities": 6, "qa_per_entity": 2, "n_world": 3, "target_fraction": 0.2,
               "never_seen_fraction": 0.2},
    "model": {"d_model": 16, "n_layers": 4, "n_heads": 2, "max_seq_len": 48},
    "base": {"epochs": 2, "lr": 3e-3, "batch_size": 8},
    "unlearn": {"epochs": 2, "batch_size": 4},
    "baseline_unlearn": {"mode": "vanilla", "epochs": 2, "batch_size": 4},
    "evaluation": {"max_new": 4},
    "sequential": {"n_requests": 2, "request_fraction": 0.2},
}


@pytest.fixture
def tiny_cfg():
    return config_from_dict(json.loads(json.dumps(TINY)))


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


# ------------------------------------------------------------------ config
def test_default_config_is_valid():
    cfg = load_config(None)
    assert cfg.model.n_layers == 8 and cfg.model.d_model == 64
    assert cfg.unlearn.method == "gd" and cfg.unlearn.mode == "grun"
    assert cfg.baseline_unlearn.mode == "vanilla"


def test_config_round_trip_and_digest(tiny_cfg):
    again = config_from_dict(tiny_cfg.to_dict())
    assert again == tiny_cfg and again.digest() == tiny_cfg.digest()
    assert tiny_cfg.with_seed(5).digest() != tiny_cfg.digest()
    moved = config_from_dict({**tiny_cfg.to_dict(), "out_dir": "elsewhere"})
    assert moved.digest() == tiny_cfg.digest()


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"model": {"d_model": 64, "n_heads": 3, "colour": 1}},
    {"unlearn": {"method": "sgd"}},
    {"unlearn": "gd"},
    {"seed": "zero"},
    {"baseline_unlearn": {"mode": "grun"}},
    {"sequential": {"request_fraction": 1.5}},
    {"base": {"epochs": 0}},
    [],
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# ---------------------------------------------------------------- quantize
def test_quantize_zero():
    assert np.array_equal(quantize_array(np.zeros(3, np.float32)), np.zeros(3))


def test_quantize_example():
    out = quantize_array(np.array([0.5, -1.0], dtype=np.float64))
    scale = 1 / 127
    assert np.round(0.5 / scale) == 64
    assert np.allclose(out, [64 * scale, -1.0])
    assert out[0] == pytest.approx(0.50394, abs=1e-5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.integers(1, 20), elements=st.floats(-100, 100, width=32)))
def test_quantize_idempotent(w):
    once = quantize_array(w)
    assert np.array_equal(quantize_array(once), once)
    assert np.abs(once).max() <= np.abs(w).max() * (1 + 1e-6) + 1e-30


def test_quantize_roundtrip_covers_model_and_stack():
    model = build_model(ModelConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, max_seq_len=8), 0)
    stack = GrunStack([{2: GrunModule.init(8, 2, rng=np.random.default_rng(0))}], coeff=0.5)
    stack.requests[0][2].gate_override = 1.0
    before = model.checksum()
    qm, qs = quantize_roundtrip(model, stack)
    assert model.checksum() == before
    for name, p in model.named_parameters():
        assert np.array_equal(qm[name].data, quantize_array(p.data))
    assert qs.coeff == 0.5 and qs.requests[0][2].gate_override == 1.0
    assert np.array_equal(qs.requests[0][2].reft.R.data, quantize_array(stack.requests[0][2].reft.R.data))


# ------------------------------------------------------------------ misc
def test_c_grid():
    assert P._c_grid(1) == [1.0]
    grid = P._c_grid(4)
    assert grid == [1.0, 0.5, 0.25]
    assert P._c_grid(3)[1] == pytest.approx(1 / math.sqrt(3))


def test_eval_threads(monkeypatch):
    monkeypatch.setenv("GRUNLAB_THREADS", "3")
    assert P.eval_threads() == 3
    monkeypatch.setenv("GRUNLAB_THREADS", "many")
    assert P.eval_threads() == 1


def test_report_csv_and_manifest(tmp_path):
    res = P.ExperimentResult(config={"seed": 0}, stages={
        "clean": {"rouge_l": {"target": 1.0, "retain": 0.5}, "prob": {"target": 0.25, "retain": None}}},
        timings={"clean": 1.0})
    manifest = emit_report(res, tmp_path, "csv")
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "stage,metric,split,value"
    assert lines[1:] == ["clean,rouge_l,retain,0.500000", "clean,rouge_l,target,1.000000",
                         "clean,prob,retain,", "clean,prob,target,0.250000"]
    assert set(manifest["files"]) == {"metrics.csv", "metrics.json", "timings.json"}
    assert manifest["files"]["metrics.json"] == P.sha256_file(tmp_path / "metrics.json")
    assert "timings" not in json.loads((tmp_path / "metrics.json").read_text())


# ------------------------------------------------------------- pipelines
def test_run_experiment_tiny(tmp_path, tiny_cfg):
    res = run_experiment(tiny_cfg, tmp_path)
    assert res.status == "ok"
    assert res.checksums["base_clean"] == res.checksums["base_post_unlearn"]
    assert {"clean", "post_unlearn", "baseline", "post_quantization", "paraphrase"} <= set(res.stages)
    for name in ("metrics.json", "timings.json", "manifest.json", "pca.csv", "gates.csv", "unlearn_log.jsonl",
                 "base.ckpt", "unlearned.ckpt", "corpus.jsonl", "vocab.json"):
        assert (tmp_path / name).exists(), name
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    for name, digest in manifest["files"].items():
        assert P.sha256_file(tmp_path / name) == digest
    assert (tmp_path / "pca.csv").read_text().splitlines()[0] == "x,y,class,stage"
    assert (tmp_path / "gates.csv").read_text().splitlines()[0] == "request,layer,target_mean,retain_mean"
    prov = res.stages["clean"]["provenance"]
    assert prov == {"stage": "clean", "seed": 0, "config_hash": tiny_cfg.digest()}


def test_run_experiment_deterministic(tmp_path, tiny_cfg):
    run_experiment(tiny_cfg, tmp_path / "a")
    run_experiment(tiny_cfg, tmp_path / "b")
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())["files"]
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())["files"]
    ma.pop("timings.json"), mb.pop("timings.json")
    assert ma == mb


def test_stage_failure_marks_status(tmp_path, tiny_cfg, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(P, "train_unlearn", boom)
    with pytest.raises(StageError, match="unlearn"):
        run_experiment(tiny_cfg, tmp_path)
    status = json.loads((tmp_path / "status.json").read_text())
    assert status["status"] == "failed" and status["stage"] == "unlearn"
    assert (tmp_path / "corpus.jsonl").exists()


def test_run_sequential_tiny(tmp_path, tiny_cfg):
    res = run_sequential(tiny_cfg, tmp_path)
    series = res.analyses["series"]
    assert [s["request"] for s in series] == [0, 1]
    assert len(series[1]["grun"]["targets"]) == 2
    search = res.analyses["c_search"]
    assert [g["c"] for g in search["grid"]] == P._c_grid(2)
    assert res.analyses["final"]["grun"]["c"] == search["chosen"]
    assert res.checksums["base_clean"] == res.checksums["base_post_unlearn"]
    _, stack = load_checkpoint(tmp_path / "sequential.ckpt")
    assert len(stack) == 2 and stack.coeff == pytest.approx(search["chosen"])


def test_sequential_single_request_matches_single_run(tmp_path, tiny_cfg):
    cfg = config_from_dict({**TINY, "sequential": {"n_requests": 1, "request_fraction": 0.2},
                            "evaluation": {"max_new": 4, "attacks": False, "pca": False, "csd": False,
                                           "mix": False, "gates": False, "baseline": False}})
    base = P.prepare_base(cfg, target_fraction=0.2)
    seq = run_sequential(cfg, tmp_path / "s", base)
    single = run_experiment(cfg, tmp_path / "r", base)
    assert seq.analyses["c_search"]["chosen"] == 1.0
    assert seq.analyses["final"]["grun"]["targets"][0] == pytest.approx(
        single.stages["post_unlearn"]["rouge_l"]["target"])


# --------------------------------------------------------------------- cli
def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"n_heads": 3}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_missing_artifact_exit_code(tmp_path, tiny_file):
    assert main(["report", "--config", str(tiny_file), "--out", str(tmp_path / "o")]) == 3


def test_cli_workflow(tmp_path, tiny_file, capsys):
    out = str(tmp_path / "o")
    common = ["--config", str(tiny_file), "--out", out]
    assert main(["gen-data", *common]) == 0
    assert main(["train-base", *common]) == 0
    assert main(["eval", *common]) == 3  # nothing unlearned yet
    assert main(["unlearn", *common]) == 0
    assert main(["eval", *common]) == 0
    for kind in ("pca", "csd", "mix", "gates"):
        assert main(["analyze", kind, *common]) == 0
    for kind in ("quantize", "paraphrase"):
        assert main(["attack", kind, *common]) == 0
    assert main(["run", *common]) == 0
    assert main(["report", "--format", "csv", *common]) == 0
    files = {p.name for p in (tmp_path / "o").iterdir()}
    assert {"eval.json", "pca.csv", "csd.json", "mix.json", "gates.csv", "attack_quantize.json",
            "attack_paraphrase.json", "metrics.csv", "manifest.json"} <= files
    assert "layer" in capsys.readouterr().out


def test_cli_seed_override(tmp_path, tiny_file):
    out = tmp_path / "o"
    assert main(["gen-data", "--config", str(tiny_file), "--out", str(out), "--seed", "3"]) == 0
    a = (out / "corpus.jsonl").read_text()
    assert main(["gen-data", "--config", str(tiny_file), "--out", str(out), "--seed", "4"]) == 0
    assert (out / "corpus.jsonl").read_text() != a


def test_partial_section_keeps_experiment_defaults():
    cfg = config_from_dict({"unlearn": {"method": "npo"}})
    assert cfg.unlearn.method == "npo"
    assert cfg.unlearn.lr == ExperimentConfig().unlearn.lr
    assert cfg.unlearn.epochs == ExperimentConfig().unlearn.epochs
