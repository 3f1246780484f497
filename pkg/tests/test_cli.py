import json
import time
from pathlib import Path

import pandas as pd
import pytest

from sst_parking.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_SCHEMA, CLIError, load_config, main, parse_set

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.json")


def run(*argv):
    return main([str(a) for a in argv])


def smoke_pipeline(tmp: Path, config: str = SMOKE) -> Path:
    """synth -> preprocess -> cluster -> fuse -> dataset -> pretrain -> finetune -> eval."""
    s = tmp / "synth"
    assert run("synth", "--config", config, "--out", s) == 0
    assert run("preprocess", "--config", config, "--occupancy", s / "occupancy.csv", "--lots", s / "lots.csv",
               "--out", tmp / "grid.csv") == 0
    assert run("cluster", "--config", config, "--lots", s / "lots.csv", "--out", tmp / "zones.csv") == 0
    assert run("fuse", "--config", config, "--trips", s / "trips.csv", "--lots", s / "lots.csv", "--zones",
               tmp / "zones.csv", "--grid", tmp / "grid.csv", "--out", tmp / "demand.csv") == 0
    assert run("dataset", "--config", config, "--grid", tmp / "grid.csv", "--lots", s / "lots.csv", "--zones",
               tmp / "zones.csv", "--demand", tmp / "demand.csv", "--out", tmp / "ds") == 0
    return tmp / "ds"


def test_smoke_pipeline_end_to_end(tmp_path, capsys):
    t0 = time.time()
    ds = smoke_pipeline(tmp_path)
    assert run("pretrain", "--config", SMOKE, "--data", ds, "--out", tmp_path / "pre.ckpt") == 0
    assert run("finetune", "--config", SMOKE, "--data", ds, "--ckpt", tmp_path / "pre.ckpt",
               "--out", tmp_path / "ft.ckpt") == 0
    assert run("eval", "--config", SMOKE, "--data", ds, "--ckpt", tmp_path / "ft.ckpt",
               "--out", tmp_path / "metrics.json") == 0
    assert time.time() - t0 < 300
    metrics = json.loads((tmp_path / "metrics.json").read_text())["metrics"]
    assert metrics["mse"] > 0 and metrics["n_test"] > 0
    manifest = json.loads((tmp_path / "manifest.finetune.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["inputs"]["ckpt"]["sha256"]) == 64
    assert json.loads((tmp_path / "config.resolved.json").read_text())["model"]["seq_len"] == 48

    assert run("predict", "--config", SMOKE, "--data", ds, "--ckpt", tmp_path / "ft.ckpt",
               "--out", tmp_path / "pred.csv") == 0
    pred = pd.read_csv(tmp_path / "pred.csv")
    assert len(pred) == 24 and (pred.drop(columns="step") >= 0).all().all()

    # a window one step short of the look-back is rejected
    schema = json.loads((ds / "schema.json").read_text())
    names = [c["name"] for c in schema["zones"][0]["channels"]]
    pd.DataFrame(0.0, index=range(47), columns=names).to_csv(tmp_path / "short.csv", index=False)
    assert run("predict", "--config", SMOKE, "--data", ds, "--ckpt", tmp_path / "ft.ckpt",
               "--window", tmp_path / "short.csv", "--out", tmp_path / "p2.csv") == EXIT_SCHEMA
    assert "does not match" in capsys.readouterr().err

    assert run("finetune", "--config", SMOKE, "--data", ds, "--ckpt", "none", "--strategy", "probe",
               "--out", tmp_path / "probe.ckpt") == 0
    assert run("describe", "--config", SMOKE, "--ckpt", tmp_path / "ft.ckpt", "--channels", 20, "--targets", 2) == 0


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--config", SMOKE, "--out", tmp_path / name) == 0
    for f in ("lots.csv", "trips.csv", "occupancy.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run("synth", "--config", SMOKE, "--seed", 2, "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "trips.csv").read_bytes() != (tmp_path / "c" / "trips.csv").read_bytes()


@pytest.mark.slow
def test_reference_scale_dataset_has_4320_steps(tmp_path, capsys):
    cfg = tmp_path / "ref.json"
    cfg.write_text(json.dumps({"synth": {"n_lots": 168, "n_zones": 30, "days": 30,
                                         "trip_rate": {"ridehailing": 1.0, "taxi": 1.0, "bus": 1.0, "metro": 1.0}},
                               "pipeline": {"k": 30}}))
    ds = smoke_pipeline(tmp_path, str(cfg))
    out = capsys.readouterr().out
    assert "168 lots, 4320 steps/lot" in out
    assert "'train': 2592, 'val': 432, 'test': 1296" in out
    assert json.loads((ds / "schema.json").read_text())["n_steps"] == 4320


def test_config_errors(tmp_path, capsys):
    assert run("describe", "--config", tmp_path / "nope.json") == EXIT_MISSING
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"d_model": 10, "n_heads": 3}}))
    assert run("describe", "--config", bad) == EXIT_CONFIG
    bad.write_text(json.dumps({"modle": {}}))
    assert run("describe", "--config", bad) == EXIT_CONFIG
    bad.write_text("{not json")
    assert run("describe", "--config", bad) == EXIT_CONFIG
    assert run("describe", "--set", "model.bogus=1") == EXIT_CONFIG
    assert run("pretrain", "--data", tmp_path / "missing") == EXIT_MISSING
    (tmp_path / "empty").mkdir()
    assert run("eval", "--data", tmp_path / "empty", "--ckpt", tmp_path / "x.ckpt") == EXIT_MISSING


def test_flags_override_file(tmp_path):
    cfg = load_config(SMOKE, parse_set(["model.d_model=32", "train.lr=0.01"]), {"seed": 9})
    assert cfg.model.d_model == 32 and cfg.train.lr == 0.01 and cfg.seed == 9
    assert cfg.model.seq_len == 48
    with pytest.raises(CLIError):
        parse_set(["novalue"])


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SST_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run("synth", "--config", SMOKE) == 0
    assert (tmp_path / "root" / "synth" / "manifest.synth.json").exists()
