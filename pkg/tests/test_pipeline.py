import json
import math

import jsonschema
import numpy as np
import pytest

from stnas import cli
from stnas.config import ConfigError, ExperimentConfig, load_config, planted_context_config
from stnas.pipeline import (METRICS_SCHEMA, Workspace, ablation_text, prepare_data, run_pipeline,
                            stage_search, stage_warmup, validate_record, warmup_ablation)


def quick(seed=0, **kw):
    return planted_context_config(seed, task={"kind": "planted-context", "num_items": 200,
                                              "num_test": 40}, **kw)


# ------------------------------------------------------------------ config

def test_config_round_trip(tmp_path):
    cfg = quick(3)
    (tmp_path / "c.json").write_text(cfg.dumps())
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.net_spec() == cfg.net_spec()


@pytest.mark.parametrize("doc", [
    {"version": 1, "bogus": 1},
    {"version": 2},
    {},
    {"version": 1, "task": {"vocab": 2, "colour": "red"}},
    {"version": 1, "search": {"patience": 0}},
    {"version": 1, "estimator": {"kind": "reinforce"}},
    {"version": 1, "network": {"preset": "huge"}},
    {"version": 1, "precision": 16},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(doc)


def test_task_seed_follows_run_seed():
    assert quick(7).task_spec().seed == 7
    assert quick(7).net_spec().init_seed == 7


# ----------------------------------------------------------------- records

def test_records_are_schema_valid_and_resumable(tmp_path):
    cfg = quick()
    full = tmp_path / "full"
    run_pipeline(cfg, full)
    records = Workspace(full).read_records()
    stages = {r["stage"] for r in records}
    assert stages == {"warmup", "search", "retrain"}
    for r in records:
        jsonschema.validate(r, METRICS_SCHEMA)
        validate_record(r)

    part = Workspace(tmp_path / "part").ensure()
    data = prepare_data(cfg)
    stage_warmup(cfg, part, data, stop_after=2)
    stage_warmup(cfg, part, data)
    stage_search(cfg, part, data, stop_after=1)
    run_pipeline(cfg, part.root)
    assert (full / "metrics.jsonl").read_bytes() == (part.root / "metrics.jsonl").read_bytes()
    assert (full / "summary.json").read_bytes() == (part.root / "summary.json").read_bytes()
    assert (full / "checkpoints" / "retrain.stnas").read_bytes() == \
        (part.root / "checkpoints" / "retrain.stnas").read_bytes()


def test_artifacts_present(tmp_path):
    run_pipeline(quick(), tmp_path)
    for name in ("config.json", "metrics.jsonl", "architecture.txt", "memory.json", "summary.json",
                 "checkpoints/warmup.stnas", "checkpoints/search.stnas",
                 "checkpoints/derived.stnas", "checkpoints/retrain.stnas"):
        assert (tmp_path / name).exists(), name
    assert ExperimentConfig.from_dict(json.loads((tmp_path / "config.json").read_text())) == quick()


def test_bad_record_rejected():
    with pytest.raises(ValueError):
        validate_record({"stage": "warmup"})


# --------------------------------------------------------------- ablation

def test_ablation_report_has_two_labelled_curves():
    cfg = quick()
    report = warmup_ablation(cfg, seeds=[0])
    run = report["runs"][0]
    assert run["A"]["warmup_epochs"] == 0 and run["B"]["warmup_epochs"] > 0
    assert run["A"]["curve"] and run["B"]["curve"]
    text = ablation_text(report)
    assert "seed 0 A (zero warm-up" in text and "seed 0 B (converged warm-up" in text


# -------------------------------------------------------------------- CLI

@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(quick().dumps())
    out = str(tmp_path / "run")
    assert cli.main(["--config", str(cfgfile), "--out", out, "run"]) == 0
    assert cli.main(["--out", out, "report"]) == 0
    assert "block 1:" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "nope": 0}')
    assert cli.main(["--config", str(bad), "--out", out, "run"]) == 2
    assert cli.main(["--out", str(tmp_path / "empty"), "search"]) == 2

    nan = tmp_path / "nan.json"
    doc = json.loads(quick().dumps())
    doc["warmup"]["lr"] = doc["warmup"]["lr_final"] = 1e30
    nan.write_text(json.dumps(doc))
    assert cli.main(["--config", str(nan), "--out", str(tmp_path / "nan"), "warmup"]) == 3


def test_cli_stages_in_sequence(tmp_path):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(quick().dumps())
    out = str(tmp_path / "staged")
    for stage in ("warmup", "search", "derive", "retrain"):
        assert cli.main(["--config", str(cfgfile), "--out", out, "--seed", "0", stage]) == 0
    ref = str(tmp_path / "ref")
    assert cli.main(["--config", str(cfgfile), "--out", ref, "run"]) == 0
    assert (tmp_path / "staged" / "summary.json").read_text() == (tmp_path / "ref" / "summary.json").read_text()


def test_cli_gradcheck_and_memory(tmp_path, capsys):
    assert cli.main(["gradcheck", "--scope", "estimators"]) == 0
    assert cli.main(["--out", str(tmp_path), "bench-memory"]) == 0
    assert (tmp_path / "memory.json").exists()
    assert "darts" in capsys.readouterr().out


def test_cli_precision_override(tmp_path):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(quick().dumps())
    args = cli.build_parser().parse_args(["--config", str(cfgfile), "--precision", "64", "run"])
    assert cli.resolve_config(args).precision == 64


def test_desk_preset_completes_quickly(tmp_path):
    import time
    from stnas.config import desk_config
    t = time.perf_counter()
    summary = run_pipeline(desk_config(), tmp_path)
    assert time.perf_counter() - t < 600
    assert len((tmp_path / "architecture.txt").read_text().splitlines()) == 6
    assert len(summary["architecture"]) == 6
