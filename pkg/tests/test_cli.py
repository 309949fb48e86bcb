import json
import os

import numpy as np
import pytest

from tempo_ode import cli
from tempo_ode.checkpoint import dump_checkpoint, load_checkpoint
from tempo_ode.config import canonicalize, dump_config, load_config
from tempo_ode.data import load_csv_with_heldout
from tempo_ode.errors import ConfigError


BASE_CONFIG = {
    "model": {
        "latent_dim": 3,
        "enc_hidden": 5,
        "enc_ode_width": 5,
        "enc_ode_layers": 2,
        "dec_ode_width": 5,
        "dec_ode_layers": 2,
        "temporal": True,
    },
    "solver": {"eval_method": "rk4"},
    "training": {"epochs": 2, "batch_size": 8, "seed": 7, "lr": 0.01},
    "data": {
        "synthetic": {"n_samples": 12, "t_grid": 16, "sparsity": 0.4,
                      "noise_sigma": 0.02},
        "val_fraction": 0.25,
        "test_fraction": 0.25,
    },
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(BASE_CONFIG))
    return str(path)


def run(args):
    return cli.main(args)


def test_config_canonical_round_trip(tmp_path, cfg_path):
    cfg = load_config(cfg_path)
    text = dump_config(cfg)
    back_path = tmp_path / "canon.json"
    back_path.write_text(text)
    again = load_config(str(back_path))
    assert cfg == again
    assert dump_config(again) == text


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"latent_dm": 3}}))
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_config_rejects_bad_choice():
    with pytest.raises(ConfigError):
        canonicalize({"solver": {"method": "euler"},
                      "data": {"synthetic": {}}})


def test_generate_deterministic_and_reloadable(tmp_path, cfg_path):
    out1 = str(tmp_path / "d1")
    out2 = str(tmp_path / "d2")
    assert run(["generate", "--config", cfg_path, "--out", out1]) == 0
    assert run(["generate", "--config", cfg_path, "--out", out2]) == 0
    for suffix in (".csv", ".heldout.csv"):
        with open(out1 + suffix) as a, open(out2 + suffix) as b:
            assert a.read() == b.read()
    stats = json.load(open(out1 + ".stats.json"))
    assert stats["observed_per_sample"] == 7  # ceil(0.4 * 16)
    series = load_csv_with_heldout(out1 + ".csv")
    assert len(series) == 12
    assert all(s.mask.sum() == 7 for s in series)
    assert all(s.heldout_mask.sum() == 9 for s in series)


def test_train_writes_outputs_and_is_deterministic(tmp_path, cfg_path):
    out1 = str(tmp_path / "run1")
    out2 = str(tmp_path / "run2")
    assert run(["train", "--config", cfg_path, "--out", out1]) == 0
    assert run(["train", "--config", cfg_path, "--out", out2]) == 0

    def read_log(d):
        lines = []
        with open(os.path.join(d, "metrics.jsonl")) as fh:
            for line in fh:
                rec = json.loads(line)
                rec.pop("seconds")  # wall clock differs between runs
                lines.append(rec)
        return lines

    assert read_log(out1) == read_log(out2)
    for name in ("best.json", "final.json"):
        assert os.path.exists(os.path.join(out1, name))


def test_checkpoint_round_trip_byte_identical(tmp_path, cfg_path):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    path = os.path.join(out, "final.json")
    payload = load_checkpoint(path)
    text1 = open(path).read()
    text2 = dump_checkpoint(payload)
    assert text1 == text2


def test_train_epochs_zero_writes_initial_checkpoint(tmp_path, cfg_path):
    cfg = json.load(open(cfg_path))
    cfg["training"]["epochs"] = 0
    path = tmp_path / "zero.json"
    path.write_text(json.dumps(cfg))
    out = str(tmp_path / "zero_run")
    assert run(["train", "--config", str(path), "--out", out]) == 0
    log = [json.loads(l) for l in open(os.path.join(out, "metrics.jsonl"))]
    assert len(log) == 1
    assert log[0]["train_loss"] is None
    assert "mse" in log[0]["val"]
    assert os.path.exists(os.path.join(out, "final.json"))


def test_resume_continues_epoch_numbering(tmp_path, cfg_path):
    out = str(tmp_path / "base")
    run(["train", "--config", cfg_path, "--out", out])

    cfg = json.load(open(cfg_path))
    cfg["training"]["epochs"] = 4
    path = tmp_path / "longer.json"
    path.write_text(json.dumps(cfg))
    out2 = str(tmp_path / "resumed")
    assert run(["train", "--config", str(path), "--out", out2,
                "--checkpoint", os.path.join(out, "final.json")]) == 0
    log = [json.loads(l) for l in open(os.path.join(out2, "metrics.jsonl"))]
    assert [rec["epoch"] for rec in log] == [2, 3]


def test_eval_reproduces_logged_best_metric(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    summary_line = capsys.readouterr().out.strip().splitlines()[-1]
    best_logged = json.loads(summary_line)["best_metric"]

    assert run(["eval", "--checkpoint", os.path.join(out, "best.json"),
                "--split", "validation"]) == 0
    printed = json.loads(capsys.readouterr().out.strip())
    assert abs(printed["mse"] - best_logged) < 1e-9


def test_eval_per_sample_averages_to_aggregate(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    capsys.readouterr()
    assert run(["eval", "--checkpoint", os.path.join(out, "best.json"),
                "--per-sample"]) == 0
    printed = json.loads(capsys.readouterr().out.strip())
    assert "per_sample" in printed and printed["n_heldout"] > 0


def test_eval_unknown_task_flag_is_usage_error(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    capsys.readouterr()
    code = run(["eval", "--checkpoint", os.path.join(out, "best.json"),
                "--task", "densify"])
    assert code in (1, 2)  # structured failure, not a traceback


def test_export_trajectory_obs_alignment(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    capsys.readouterr()
    traj = str(tmp_path / "traj.csv")
    assert run(["export-trajectory", "--checkpoint", os.path.join(out, "best.json"),
                "--sample", "0", "--times", "obs", "--out", traj]) == 0
    rows = open(traj).read().strip().splitlines()
    assert len(rows) - 1 == 7  # one row per observed point
    header = rows[0].split(",")
    assert header[0] == "time" and "f1_pred" in header
    for line in rows[1:]:
        cells = line.split(",")
        assert cells[2] == "1"  # mask flag set on observed rows


def test_export_trajectory_uniform_times(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    capsys.readouterr()
    traj = str(tmp_path / "traj.csv")
    assert run(["export-trajectory", "--checkpoint", os.path.join(out, "best.json"),
                "--sample", "0", "--times", "50", "--out", traj]) == 0
    rows = open(traj).read().strip().splitlines()
    assert len(rows) - 1 == 50


def test_export_trajectory_missing_sample(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "run")
    run(["train", "--config", cfg_path, "--out", out])
    capsys.readouterr()
    code = run(["export-trajectory", "--checkpoint", os.path.join(out, "best.json"),
                "--sample", "nope", "--times", "10",
                "--out", str(tmp_path / "x.csv")])
    assert code == 1


def test_param_count_cli(tmp_path, capsys):
    cfg = {
        "model": {"latent_dim": 3, "enc_hidden": 5, "enc_ode_width": 5,
                  "enc_ode_layers": 2, "dec_ode_width": 5, "dec_ode_layers": 2,
                  "temporal": True},
        "compare_model": {"latent_dim": 3, "enc_hidden": 5, "enc_ode_width": 5,
                          "enc_ode_layers": 2, "dec_ode_width": 5,
                          "dec_ode_layers": 2, "temporal": False},
        "data": {"synthetic": {"n_samples": 4, "t_grid": 8}},
    }
    path = tmp_path / "pc.json"
    path.write_text(json.dumps(cfg))
    assert run(["param-count", "--config", str(path)]) == 0
    text = capsys.readouterr().out
    assert "total" in text and "ratio" in text


def test_seed_override_changes_run(tmp_path, cfg_path):
    out1 = str(tmp_path / "s1")
    out2 = str(tmp_path / "s2")
    run(["train", "--config", cfg_path, "--out", out1, "--seed", "1"])
    run(["train", "--config", cfg_path, "--out", out2, "--seed", "2"])
    a = open(os.path.join(out1, "metrics.jsonl")).read()
    b = open(os.path.join(out2, "metrics.jsonl")).read()
    assert a != b


def test_bench_overhead_schema_and_selfratio(tmp_path, capsys):
    cfg = {
        "model": {"latent_dim": 3, "enc_hidden": 4, "enc_ode_width": 4,
                  "enc_ode_layers": 1, "dec_ode_width": 4, "dec_ode_layers": 1,
                  "temporal": True},
        "solver": {"eval_method": "rk4"},
        "training": {"epochs": 2, "batch_size": 8, "seed": 3},
        "data": {"synthetic": {"n_samples": 8, "t_grid": 10, "sparsity": 0.5},
                 "val_fraction": 0.0, "test_fraction": 0.25},
    }
    path = tmp_path / "bench.json"
    path.write_text(json.dumps(cfg))
    assert run(["bench-overhead", "--config", str(path), "--epochs", "2"]) == 0
    report = json.loads(capsys.readouterr().out.strip())
    assert {"static_seconds_per_epoch", "temporal_seconds_per_epoch",
            "ratio"} <= set(report)
    assert len(report["temporal_epoch_seconds"]) == 2


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("TEMPO_ODE_THREADS", "1")
    assert cli.worker_count() == 1
    monkeypatch.setenv("TEMPO_ODE_THREADS", "notanumber")
    with pytest.raises(ConfigError):
        cli.worker_count()
