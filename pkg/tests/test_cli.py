import json
import subprocess
import sys
import time

import pytest
import yaml

from crowdkce.cli import main
from crowdkce.config import ConfigError, RunConfig
from crowdkce.plot import check_svg, render_svg


def write_config(tmp_path, **sections):
    d = RunConfig().to_dict()
    for sec, values in sections.items():
        d[sec].update(values)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


ANALYTIC = {"source": "analytic"}
SMALL_EXP = {"n_pedestrians": 2, "num_cases": 3}
TINY_NET = {"embed_dims": [16, 12], "feature_dims": [12, 8], "attention_dims": [16, 1], "value_dims": [16, 1]}
TINY_TRAIN = {"n_pedestrians": 2, "il_episodes": 10, "il_epochs": 5, "rl_episodes": 6, "train_batches": 3,
              "batch_size": 16, "val_interval": 3, "val_cases": 3, "target_update": 3}


# ---- config


def test_config_dump_round_trips(tmp_path, capsys):
    assert main(["config", "dump"]) == 0
    text = capsys.readouterr().out
    assert RunConfig.from_dict(yaml.safe_load(text)) == RunConfig()
    out = tmp_path / "c.yaml"
    assert main(["config", "dump", "--out", str(out), "--seed", "7", "--cases", "12"]) == 0
    cfg = RunConfig.load(out)
    assert cfg.experiment.num_cases == 12 and cfg.training.seed == 7
    assert main(["config", "dump", "--config", str(out)]) == 0
    assert RunConfig.from_dict(yaml.safe_load(capsys.readouterr().out)) == cfg


def test_config_dump_contains_defaults():
    d = RunConfig().to_dict()
    assert d["version"] == 1
    assert d["planner"]["max_accel"] == 6.4 and d["planner"]["max_turn_deg"] == 120.0
    assert d["planner"]["discomfort"] == 0.2 and d["planner"]["gamma"] == 0.9
    assert set(d) == {"version", "sim", "predictor", "value_net", "planner", "training", "experiment"}


def test_unknown_keys_are_rejected(tmp_path):
    d = RunConfig().to_dict()
    d["planner"]["warp_drive"] = True
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(d))
    with pytest.raises(ConfigError, match="warp_drive"):
        RunConfig.load(path)
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1


def test_version_is_required(tmp_path):
    d = RunConfig().to_dict()
    del d["version"]
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**RunConfig().to_dict(), "version": 2})


def test_type_errors_are_config_errors():
    d = RunConfig().to_dict()
    d["experiment"]["num_cases"] = "many"
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)
    d = RunConfig().to_dict()
    d["planner"]["gamma"] = 1.5
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


# ---- exit codes


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["eval", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["eval", "--cases", "x", "--out", str(tmp_path)])
    assert e.value.code == 1
    # the default value source needs a parameter file
    assert main(["eval", "--out", str(tmp_path / "o")]) == 1
    assert main(["config", "dump", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_missing_params_file_is_runtime_failure(tmp_path):
    assert main(["eval", "--params", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_unwritable_output_is_runtime_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, value_net=ANALYTIC, experiment=SMALL_EXP)
    assert main(["eval", "--config", str(cfg), "--out", str(blocker / "sub")]) == 2


# ---- eval / compare


def run_eval(tmp_path, name, **overrides):
    cfg = write_config(tmp_path, value_net=ANALYTIC, experiment=SMALL_EXP, **overrides)
    out = tmp_path / name
    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_analytic_eval_writes_outputs(tmp_path):
    out = run_eval(tmp_path, "run", predictor={"num_samples": 3})
    assert (out / "config.yaml").exists() and (out / "metrics.csv").exists()
    files = sorted(p.name for p in (out / "episodes").iterdir())
    assert files == ["10000.json", "10001.json", "10002.json"]
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header.startswith("experiment,cases,success")
    assert RunConfig.load(out / "config.yaml").value_net.source == "analytic"


def test_eval_rerun_is_bit_exact(tmp_path):
    a = run_eval(tmp_path, "a", predictor={"num_samples": 3})
    b = run_eval(tmp_path, "b", predictor={"num_samples": 3})
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    for f in (a / "episodes").iterdir():
        assert f.read_bytes() == (b / "episodes" / f.name).read_bytes()


def test_compare_runs(tmp_path):
    a = run_eval(tmp_path, "a", planner={"kce": False}, predictor={"num_samples": 3})
    b = run_eval(tmp_path, "b", predictor={"num_samples": 3})
    out = tmp_path / "cmp"
    assert main(["compare", str(a), str(b), "--out", str(out)]) == 0
    rows = (out / "comparison.csv").read_text().splitlines()
    assert len(rows) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert summary["max_acc"]["pairs"] == 3


def test_compare_mismatched_runs_fail(tmp_path):
    a = run_eval(tmp_path, "a")
    cfg = write_config(tmp_path, value_net=ANALYTIC, experiment={**SMALL_EXP, "base_seed": 5})
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert main(["compare", str(a), str(tmp_path / "b"), "--out", str(tmp_path / "c")]) == 2
    assert main(["compare", str(a), str(tmp_path / "empty"), "--out", str(tmp_path / "c")]) == 2


def test_orca_policy_needs_no_params(tmp_path):
    cfg = write_config(tmp_path, experiment={**SMALL_EXP, "policy": "orca"})
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0


# ---- train


def test_tiny_training_run(tmp_path):
    cfg = write_config(tmp_path, value_net=TINY_NET, training=TINY_TRAIN)
    start = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t1"), "--quiet"]) == 0
    assert time.perf_counter() - start < 60
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t2"), "--quiet"]) == 0
    p1, p2 = (tmp_path / "t1" / "params.json").read_bytes(), (tmp_path / "t2" / "params.json").read_bytes()
    assert p1 == p2
    assert (tmp_path / "t1" / "training.csv").read_text().startswith("phase,step,loss")
    # the trained file drives an eval run
    ecfg = write_config(tmp_path, value_net=TINY_NET, experiment=SMALL_EXP)
    assert main(["eval", "--config", str(ecfg), "--params", str(tmp_path / "t1" / "params.json"),
                 "--out", str(tmp_path / "e")]) == 0


# ---- plot


def test_plot_is_deterministic_and_valid(tmp_path):
    out = run_eval(tmp_path, "run")
    ep = out / "episodes" / "10000.json"
    assert main(["plot", str(ep), "--out", str(tmp_path / "a.svg")]) == 0
    assert main(["plot", str(ep), "--out", str(tmp_path / "b.svg")]) == 0
    a = (tmp_path / "a.svg").read_text()
    assert a == (tmp_path / "b.svg").read_text()
    check_svg(a)
    assert a.count("<circle") >= 3


def test_plot_without_pedestrians():
    log = {
        "dt": 0.25,
        "agents": [{"kind": "vehicle", "radius": 0.3, "v_pref": 1.0, "start": [0, -4], "goal": [0, 4]}],
        "initial": {"t": 0.0, "positions": [[0, -4]], "velocities": [[0, 0]]},
        "steps": [{"t": 0.25 * (i + 1), "positions": [[0, -4 + 0.25 * (i + 1)]], "velocities": [[0, 1]]}
                  for i in range(31)],
    }
    svg = render_svg(log)
    check_svg(svg)
    assert svg.count("<g ") == 1 and '<g id="agent0">' in svg
    assert svg.count("<polyline") == 1


def test_plot_malformed_log(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["plot", str(bad), "--out", str(tmp_path / "x.svg")]) == 2
    bad.write_text(json.dumps({"dt": 0.25, "steps": []}))
    assert main(["plot", str(bad), "--out", str(tmp_path / "x.svg")]) == 2


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "crowdkce.cli", "config", "dump"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("version: 1")
    r = subprocess.run([sys.executable, "-m", "crowdkce.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 1
