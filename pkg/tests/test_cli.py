import hashlib
import json

import pytest

from sghn.cli import main
from sghn.config import ConfigError, ExperimentConfig, load_config

TINY = {
    "system": {"kind": "Toda", "n": 3},
    "data": {"n_traj": 2, "t_end": 0.5},
    "model": {"kind": "sghn", "width": 4},
    "train": {"epochs": 4, "batch_size": 16},
    "eval": {"n_test": 2, "t_end_test": 0.5},
    "sweep": {"mu_grid": [0.0, 1.0], "models": ["sghn"]},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def tiny(tmp_path):
    return write_config(tmp_path, TINY)


def test_defaults_follow_protocol():
    cfg = ExperimentConfig()
    assert cfg.spec().n == 32 and cfg.data.n_traj == 50 and cfg.data.h == 0.0025
    assert cfg.train.epochs == 10000 and cfg.train.batch_size == 256
    assert cfg.schedule().rates == (1e-3, 1e-4, 1e-5)


def test_default_generate_counts(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path / "run")]) == 0
    assert "train: 5050 pairs" in capsys.readouterr().out


def test_invalid_activation_is_config_error(tmp_path, capsys):
    doc = dict(TINY, model={"kind": "mlp", "activation": "relu"})
    assert main(["train", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "gelu" in err and "silu" in err and "tanh" in err


@pytest.mark.parametrize("doc", [
    {"system": {"kind": "Spring", "n": 3}},
    {"system": {"kind": "FkToda", "n": 3, "mu": 2}},
    {"train": {"epochs": 0}},
    {"unknown": 1},
])
def test_bad_configs_exit_1(tmp_path, doc):
    assert main(["generate", "--config", write_config(tmp_path, doc), "--out", str(tmp_path / "r")]) == 1


def test_unreadable_config(tmp_path):
    (tmp_path / "x.json").write_text("{")
    assert main(["generate", "--config", str(tmp_path / "x.json")]) == 1
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_missing_inputs_exit_2(tmp_path, tiny, capsys):
    run = str(tmp_path / "empty")
    assert main(["train", "--config", tiny, "--out", run]) == 2
    assert "sghn generate" in capsys.readouterr().err
    assert main(["eval", "--config", tiny, "--out", run]) == 2
    assert main(["links", "--config", tiny, "--out", run]) == 2
    assert main(["report", "--config", tiny, "--out", run]) == 2


def test_pipeline_and_idempotence(tmp_path, tiny, capsys):
    runs = [tmp_path / "a", tmp_path / "b"]
    for run in runs:
        for cmd in ("generate", "train", "eval", "links", "report"):
            assert main([cmd, "--config", tiny, "--out", str(run)]) == 0, cmd
    a, b = runs
    for rel in ("data/train.ds", "data/test.ds", "model.ckpt", "loss.csv", "links.txt", "alpha_abs.csv",
                "eval/metrics.csv", "eval/metrics.json", "links/links.txt", "report.md"):
        assert (a / rel).exists(), rel
        if rel != "report.md":
            assert digest(a / rel) == digest(b / rel), rel
    assert "± " in (a / "report.md").read_text()
    # rerunning a stage in place gives the same bytes
    before = digest(a / "model.ckpt")
    assert main(["train", "--config", tiny, "--out", str(a)]) == 0
    assert digest(a / "model.ckpt") == before


def test_seed_override_changes_data(tmp_path, tiny):
    main(["generate", "--config", tiny, "--out", str(tmp_path / "a")])
    main(["generate", "--config", tiny, "--out", str(tmp_path / "b"), "--seed", "9"])
    assert digest(tmp_path / "a/data/train.ds") != digest(tmp_path / "b/data/train.ds")


def test_resume_continues_numbering(tmp_path, tiny):
    run = str(tmp_path / "r")
    main(["generate", "--config", tiny, "--out", run])
    assert main(["train", "--config", tiny, "--out", run, "--budget", "4"]) == 0
    assert main(["train", "--config", tiny, "--out", run, "--budget", "7", "--resume"]) == 0
    epochs = [int(line.split(",")[0]) for line in (tmp_path / "r/loss.csv").read_text().splitlines()[1:]]
    assert epochs == list(range(7))


def test_resume_without_checkpoint(tmp_path, tiny):
    run = str(tmp_path / "r")
    main(["generate", "--config", tiny, "--out", run])
    assert main(["train", "--config", tiny, "--out", run, "--resume"]) == 2


def test_spec_mismatch(tmp_path, tiny):
    run = str(tmp_path / "r")
    main(["generate", "--config", tiny, "--out", run])
    other = write_config(tmp_path, dict(TINY, system={"kind": "Toda", "n": 4}), "other.json")
    assert main(["train", "--config", other, "--out", run]) == 2


def test_eval_oracle(tmp_path, capsys):
    doc = dict(TINY, model={"kind": "oracle"})
    cfg = write_config(tmp_path, doc)
    run = str(tmp_path / "r")
    main(["generate", "--config", cfg, "--out", run])
    assert main(["eval", "--config", cfg, "--out", run]) == 0
    summary = json.loads((tmp_path / "r/eval/metrics.json").read_text())["summary"]
    assert summary["trajectory_mse"]["mean"] < 1e-8
    assert main(["train", "--config", cfg, "--out", run]) == 1
    assert main(["links", "--config", cfg, "--out", run]) == 2


def test_links_needs_sghn(tmp_path):
    doc = dict(TINY, model={"kind": "hnn", "width": 4})
    cfg = write_config(tmp_path, doc)
    run = str(tmp_path / "r")
    main(["generate", "--config", cfg, "--out", run])
    main(["train", "--config", cfg, "--out", run])
    assert main(["links", "--config", cfg, "--out", run]) == 2


def test_sweep_and_report(tmp_path, capsys):
    doc = dict(TINY, system={"kind": "FkToda", "n": 3})
    cfg = write_config(tmp_path, doc)
    run = tmp_path / "r"
    assert main(["sweep", "--config", cfg, "--out", str(run), "--budget", "2"]) == 0
    lines = (run / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("mu,model,") and len(lines) == 3
    assert main(["report", "--config", cfg, "--out", str(run)]) == 0
    text = (run / "report.md").read_text()
    assert "Trajectory MAPE across mu" in text and "Missing artifacts" in text
    assert main(["sweep", "--config", write_config(tmp_path, TINY, "toda.json"), "--out", str(run)]) == 1
