import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mlad import checkpoint, cli, evaluation, pipeline
from mlad.config import from_dict

from test_pipeline import TINY


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "conf.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_resume_matches_uninterrupted(tmp_path, conf):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", conf, "--out", a) == 0
    assert run("train", "--config", conf, "--out", b, "--stage", "phase1") == 0
    assert run("train", "--config", conf, "--out", b, "--stage", "qlearn") == 0
    assert run("train", "--config", conf, "--out", b) == 0
    assert checkpoint.digests(a / "checkpoints") == checkpoint.digests(b / "checkpoints")


def test_checkpoint_round_trip_predictions(tmp_path, conf):
    out = tmp_path / "r"
    assert run("train", "--config", conf, "--out", out) == 0
    model, norm, doc = checkpoint.load_checkpoint(out / "checkpoints")
    cfg = from_dict(TINY)
    prep = pipeline.prepare(cfg)
    fresh = pipeline.train_all(cfg, prep.train)
    test = norm.apply(prep.raw_test)
    p1 = pipeline.predict_batch(model, test.features)
    p2 = pipeline.predict_batch(fresh, prep.test.features)
    assert np.array_equal(p1.logits, p2.logits)
    assert doc["schema_version"] == checkpoint.SCHEMA_VERSION
    assert doc["stages"] == {s: True for s in pipeline.STAGES}


def test_chain_violation_is_validation_error(tmp_path, conf, capsys):
    out = tmp_path / "c"
    assert run("train", "--config", conf, "--out", out, "--stage", "phase2") == cli.EXIT_VALIDATION
    assert "requires" in capsys.readouterr().err


def test_tampered_checkpoint_rejected(tmp_path, conf):
    out = tmp_path / "t"
    assert run("train", "--config", conf, "--out", out, "--stage", "phase1") == 0
    target = next((out / "checkpoints").rglob("*.bin"))
    raw = bytearray(target.read_bytes())
    raw[-1] ^= 0xFF
    target.write_bytes(bytes(raw))
    assert run("eval", "--config", conf, "--out", out) != 0


def test_eval_reports_and_repeatability(tmp_path, conf):
    out = tmp_path / "e"
    assert run("train", "--config", conf, "--out", out) == 0
    assert run("eval", "--config", conf, "--out", out) == 0
    stem = "eval_gaussian_sigma0"
    first = (out / "reports" / f"{stem}.json").read_bytes()
    assert run("eval", "--config", conf, "--out", out) == 0
    assert (out / "reports" / f"{stem}.json").read_bytes() == first

    report = json.loads(first)["report"]
    with open(out / "reports" / f"{stem}_predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    preds = [int(r["pred"]) for r in rows]
    labels = [int(r["label"]) for r in rows]
    again = evaluation.compute_metrics(preds, None, labels, 3)
    assert again.accuracy == report["accuracy"] and again.macro_f1 == report["macro_f1"]

    diag = json.loads((out / "diagnostics" / f"{stem}.json").read_text())
    depths = np.array(diag["exit_depths"])
    assert depths.min() >= 1 and depths.max() <= diag["tower_depth"]
    assert len(diag["attention"]) == cli.DIAG_ATTENTION_SAMPLES
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["model"]["depth"] == 3 and eff["out_dir"] == str(out)


def test_eval_needs_complete_checkpoint(tmp_path, conf):
    out = tmp_path / "p"
    assert run("train", "--config", conf, "--out", out, "--stage", "phase1") == 0
    assert run("eval", "--config", conf, "--out", out) == cli.EXIT_VALIDATION


def test_config_mismatch_on_resume(tmp_path, conf):
    out = tmp_path / "m"
    assert run("train", "--config", conf, "--out", out, "--stage", "phase1") == 0
    assert run("train", "--config", conf, "--out", out, "--seed", 7) == cli.EXIT_VALIDATION


def test_gen_data_is_byte_identical(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"samples_per_class": 10, "dims": [3, 4], "seed": 5}))
    assert run("gen-data", "--config", spec, "--out", tmp_path / "d1") == 0
    assert run("gen-data", "--config", spec, "--out", tmp_path / "d2") == 0
    files = sorted(p.relative_to(tmp_path / "d1") for p in (tmp_path / "d1").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "d1" / rel).read_bytes() == (tmp_path / "d2" / rel).read_bytes()


def test_exit_codes(tmp_path):
    assert run("train", "--config", tmp_path / "missing.json", "--out", tmp_path / "x") == cli.EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"depht": 3}}))
    assert run("train", "--config", bad, "--out", tmp_path / "x") == cli.EXIT_VALIDATION
    bad.write_text("{not json")
    assert run("train", "--config", bad, "--out", tmp_path / "x") == cli.EXIT_VALIDATION
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"samples_per_class": 10, "colour": 1}))
    assert run("gen-data", "--config", spec, "--out", tmp_path / "d") == cli.EXIT_VALIDATION


def test_lock_blocks_concurrent_writer(tmp_path, conf):
    out = tmp_path / "l"
    with checkpoint.output_lock(out):
        assert run("train", "--config", conf, "--out", out) == cli.EXIT_IO
    assert not (out / ".lock").exists()


def test_thread_env_validated(tmp_path, conf, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run("train", "--config", conf, "--out", tmp_path / "x") == cli.EXIT_VALIDATION
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run("train", "--config", conf, "--out", tmp_path / "y", "--stage", "phase1") == 0


def test_numerical_failure_exit_code(tmp_path, conf):
    doc = json.loads(conf.read_text())
    doc["phase1"]["lr"] = 1e200
    conf.write_text(json.dumps(doc))
    assert run("train", "--config", conf, "--out", tmp_path / "n", "--stage", "phase1") == cli.EXIT_NUMERICAL


def test_ablate_writes_rows(tmp_path, conf):
    doc = json.loads(conf.read_text())
    doc["sweep"] = {"sigmas": [0.0], "seeds": [0], "variants": [{}, {"cmr": False}], "reweights": ["none"]}
    conf.write_text(json.dumps(doc))
    assert run("ablate", "--config", conf, "--out", tmp_path / "ab") == 0
    with open(tmp_path / "ab" / "reports" / "ablation.csv") as fh:
        variants = [r["variant"] for r in csv.DictReader(fh)]
    assert variants == ["full", "no-CMR", "full+reweight-none"]


def test_console_script_entry_point(tmp_path):
    env = {**os.environ, "MLAD_NUM_THREADS": "1"}
    res = subprocess.run([sys.executable, "-m", "mlad.cli", "train", "--config", str(tmp_path / "nope.json")],
                         capture_output=True, text=True, env=env)
    assert res.returncode == cli.EXIT_IO
    assert "error:" in res.stderr


def test_shipped_configs_parse():
    from pathlib import Path
    from mlad.config import load_config
    from mlad.data import SynthSpec
    root = Path(__file__).resolve().parent.parent / "configs"
    for name in ("confusable.json", "quick.json"):
        load_config(root / name)
    SynthSpec.from_dict(json.loads((root / "synth_spec.json").read_text())).validate()
