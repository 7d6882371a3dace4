import json

import numpy as np
import pytest

from paad import cli
from paad.monitor import summarize
from paad.persist import load_checkpoint, read_dataset
from paad.train import TrainSettings, evaluate_loss, prepare

SMALL = {"simulate": {"episodes": 3, "steps": 40}, "train": {"epochs": 1, "batch_size": 16},
         "world": {"corruption_probability": 0.15}}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(SMALL))
    assert run("simulate", "--config", d / "cfg.json", "--seed", 3, "--out", d / "data.pads") == 0
    assert run("train", "--config", d / "cfg.json", "--seed", 3, "--dataset", d / "data.pads",
               "--out", d / "full.ck") == 0
    assert run("train", "--config", d / "cfg.json", "--seed", 3, "--dataset", d / "data.pads",
               "--out", d / "cam.ck", "--fusion-mode", "camera_only", "--no-reconstruction") == 0
    return d


def test_simulate_is_byte_deterministic(workdir, tmp_path):
    assert run("simulate", "--config", workdir / "cfg.json", "--seed", 3, "--out", tmp_path / "x") == 0
    assert (tmp_path / "x").read_bytes() == (workdir / "data.pads").read_bytes()
    assert read_dataset(tmp_path / "x").header.count == 120


def test_simulate_zero_steps_is_header_only(tmp_path, capsys):
    assert run("simulate", "--steps", 0, "--episodes", 2, "--out", tmp_path / "z") == 0
    assert read_dataset(tmp_path / "z").header.count == 0
    assert "frames 0" in capsys.readouterr().out


def test_train_logs_loss_breakdown_and_ablation_zeroes(workdir, tmp_path, capsys):
    run("train", "--config", workdir / "cfg.json", "--dataset", workdir / "data.pads",
        "--out", tmp_path / "n.ck", "--no-reconstruction", "--epochs", 2)
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("epoch")]
    assert len(lines) == 2
    for l in lines:
        f = l.split()
        assert f[f.index("recon_nll") + 1] == "0.0000" and f[f.index("kl") + 1] == "0.0000"
    assert load_checkpoint(tmp_path / "n.ck").config.reconstruction is False


def test_resumed_checkpoint_reproduces_loss(workdir):
    m = load_checkpoint(workdir / "full.ck")
    ds = read_dataset(workdir / "data.pads")
    data = prepare(ds.frames, m)
    s = TrainSettings(seed=1)
    idx = np.arange(16)
    before = evaluate_loss(m, data, s, idx)
    again = evaluate_loss(load_checkpoint(workdir / "full.ck"), data, s, idx)
    assert before.total == again.total


def test_eval_grid_and_plot_files(workdir, tmp_path, capsys):
    rep = tmp_path / "rep.json"
    assert run("eval", "--dataset", workdir / "data.pads", "--checkpoint", workdir / "full.ck",
               "--checkpoint", workdir / "cam.ck", "--out", rep) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 1 + 1 + 2        # seed line, header, one row per variant
    report = json.loads(rep.read_text())
    assert [v["fusion_mode"] for v in report["variants"]] == ["both", "camera_only"]
    for v in report["variants"]:
        for k in ("precision", "recall", "f1", "pr_auc"):
            assert np.isfinite(v[k])
        assert v["gamma"] == 0.9
    assert run("plot", "--report", rep, "--out", tmp_path / "p1") == 0
    assert run("plot", "--report", rep, "--out", tmp_path / "p2") == 0
    v = report["variants"][0]
    pr = (tmp_path / "p1" / "full_pr.tsv").read_text().splitlines()
    assert len(pr) - 1 == len(set(v["pr_curve"]["threshold"]))
    kde = (tmp_path / "p1" / "full_kde.tsv").read_text().splitlines()
    assert len(kde) - 1 == 200
    xs = [float(l.split("\t")[0]) for l in kde[1:]]
    assert 0 < min(xs) and max(xs) < 1
    for name in ("full_pr.tsv", "full_kde.tsv", "cam_pr.tsv"):
        assert (tmp_path / "p1" / name).read_bytes() == (tmp_path / "p2" / name).read_bytes()


def test_monitor_summary_matches_recount_of_event_log(workdir, tmp_path, capsys):
    out = tmp_path / "events.txt"
    assert run("monitor", "--dataset", workdir / "data.pads", "--checkpoint", workdir / "full.ck",
               "--out", out) == 0
    summary = dict(l.split() for l in capsys.readouterr().out.splitlines()[1:])
    events = [l.split() for l in out.read_text().splitlines()]
    ds = read_dataset(workdir / "data.pads")
    assert len(events) == len(ds)
    alerts, anomalous = [], []
    for ep in np.unique(ds.episodes):
        rows = np.flatnonzero(ds.episodes == ep)
        alerts += [events[i][2] == "1" for i in rows] + [False]
        anomalous += [ds.frames[i].anomalous for i in rows] + [False]
    s = summarize(alerts, anomalous)
    assert int(summary["detected"]) == s.detected
    assert int(summary["false_detections"]) == s.false_detections
    assert int(summary["alerts"]) == sum(e[2] == "1" for e in events)


@pytest.mark.parametrize("argv,needle", [
    (["eval", "--dataset", "missing.pads", "--checkpoint", "x.ck", "--out", "r"], "FileNotFoundError"),
    (["simulate", "--config", "bad.json", "--out", "o"], "not valid JSON"),
])
def test_errors_exit_nonzero_with_diagnostic(tmp_path, monkeypatch, capsys, argv, needle):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.json").write_text("{")
    assert run(*argv) != 0
    assert needle in capsys.readouterr().err


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"world": {"row_spacin": 0.7}}))
    assert run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "o") != 0
    assert "row_spacin" in capsys.readouterr().err


def test_shape_mismatch_is_a_configuration_error(workdir, tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"horizon": 8},
                                                 "simulate": {"episodes": 1, "steps": 5}}))
    run("simulate", "--config", tmp_path / "c.json", "--out", tmp_path / "h8.pads")
    assert run("eval", "--dataset", tmp_path / "h8.pads", "--checkpoint", workdir / "full.ck",
               "--out", tmp_path / "r") != 0
    assert "ConfigurationError" in capsys.readouterr().err


def test_run_config_round_trips():
    rc = cli.RunConfig.from_dict(dict(SMALL, seed=9))
    again = cli.RunConfig.from_dict(rc.to_dict())
    assert again.to_dict() == rc.to_dict() and again.seed == 9
