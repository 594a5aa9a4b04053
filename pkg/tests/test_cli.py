import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from poseflow import cli, data, flow
from poseflow.flow import FlowModel

TINY = {"batch_size": 64, "n_layers": 2, "hidden": [16], "lr": 0.001, "patience": 2}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--n", "300", "--seed", "4", "--out", str(d / "poses.pose6d"),
                     "--write-spec", str(d / "spec.json")]) == 0
    (d / "config.json").write_text(json.dumps(TINY))
    assert cli.main(["train", "--config", str(d / "config.json"), "--data", str(d / "poses.pose6d"),
                     "--out", str(d / "m.ckpt"), "--max-epochs", "2", "--seed", "1",
                     "--log", str(d / "train.log")]) == 0
    return d


def test_gen_data_with_spec_file(workdir):
    out = workdir / "again.pose6d"
    assert cli.main(["gen-data", "--spec", str(workdir / "spec.json"), "--n", "300",
                     "--out", str(out)]) == 0
    assert out.read_bytes() == (workdir / "poses.pose6d").read_bytes()


def test_train_outputs(workdir):
    report = json.loads((workdir / "m.report.json").read_text())
    assert len(report["val_losses"]) == 2
    log = (workdir / "train.log").read_text().splitlines()
    assert log[0].startswith("epoch 0 val_nll")
    assert log[1].startswith("epoch 1 train_nll")
    ckpt = data.load_checkpoint(workdir / "m.ckpt")
    assert ckpt.metadata["config"]["seed"] == 1


def test_sample_is_byte_deterministic(workdir):
    a, b = workdir / "s1.csv", workdir / "s2.csv"
    for path in (a, b):
        assert cli.main(["sample", "--ckpt", str(workdir / "m.ckpt"), "--n", "50", "--seed", "3",
                         "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0].split(",")
    assert header[0] == "log_prob" and len(header) == 127


def test_logprob_reproduces_sample_column(workdir):
    samples, scores = workdir / "s.csv", workdir / "lp.csv"
    cli.main(["sample", "--ckpt", str(workdir / "m.ckpt"), "--n", "40", "--seed", "8", "--out", str(samples)])
    assert cli.main(["logprob", "--ckpt", str(workdir / "m.ckpt"), "--input", str(samples),
                     "--out", str(scores)]) == 0
    attached = [float(r["log_prob"]) for r in csv.DictReader(open(samples))]
    scored = list(csv.DictReader(open(scores)))
    np.testing.assert_allclose([float(r["raw_logprob"]) for r in scored], attached, rtol=0, atol=1e-6)
    assert all(math.isfinite(float(r["ortho_logprob"])) for r in scored)


def test_zero_epoch_training_gives_identity_model(workdir, tmp_path):
    ckpt = tmp_path / "id.ckpt"
    assert cli.main(["train", "--config", str(workdir / "config.json"), "--data",
                     str(workdir / "poses.pose6d"), "--out", str(ckpt), "--max-epochs", "0"]) == 0
    x = np.random.default_rng(0).standard_normal((5, 126))
    inp = tmp_path / "in.csv"
    np.savetxt(inp, x, delimiter=",", fmt="%.17g")
    out = tmp_path / "out.csv"
    assert cli.main(["logprob", "--ckpt", str(ckpt), "--input", str(inp), "--out", str(out)]) == 0
    raw = [float(r["raw_logprob"]) for r in csv.DictReader(open(out))]
    expected = -63 * math.log(2 * math.pi) - 0.5 * np.sum(x * x, axis=1)
    np.testing.assert_allclose(raw, expected, rtol=0, atol=1e-9)


def test_eval_ks_and_marginals(workdir):
    ks, hist, marg = workdir / "ks.json", workdir / "hist.csv", workdir / "marg.csv"
    assert cli.main(["eval-ks", "--ckpt", str(workdir / "m.ckpt"), "--data", str(workdir / "poses.pose6d"),
                     "--n", "200", "--out", str(ks), "--histogram", str(hist)]) == 0
    summary = json.loads(ks.read_text())
    assert 0 <= summary["ks_raw"] <= 1 and 0 <= summary["ks_orthonormalized"] <= 1
    assert summary["units"] == "nats"
    assert cli.main(["eval-marginals", "--ckpt", str(workdir / "m.ckpt"), "--data",
                     str(workdir / "poses.pose6d"), "--joint", "2", "--n", "100", "--out", str(marg)]) == 0
    assert len(marg.read_text().splitlines()) == 201


def test_ablation_command(workdir):
    out = workdir / "abl.csv"
    args = ["ablation", "--config", str(workdir / "config.json"), "--data", str(workdir / "poses.pose6d"),
            "--max-epochs", "1", "--n", "30", "--out", str(out)]
    assert cli.main(args) == 0
    first = out.read_bytes()
    summary = json.loads((workdir / "abl.summary.json").read_text())
    assert set(summary) >= {"augmented_fraction_above_diagonal", "raw_trained_fraction_above_diagonal"}
    assert cli.main(args) == 0
    assert out.read_bytes() == first


def test_exit_codes(workdir, tmp_path, capsys):
    assert cli.main(["sample", "--ckpt", str(tmp_path / "nope.ckpt"), "--n", "1", "--seed", "0"]) == cli.EXIT_MISSING
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert cli.main(["train", "--config", str(bad_cfg), "--data", str(workdir / "poses.pose6d"),
                     "--out", str(tmp_path / "x.ckpt")]) == cli.EXIT_SCHEMA
    bad_json = tmp_path / "broken.json"
    bad_json.write_text("{")
    assert cli.main(["gen-data", "--spec", str(bad_json), "--n", "1", "--out", str(tmp_path / "y")]) == cli.EXIT_SCHEMA
    short = tmp_path / "short.csv"
    short.write_text(",".join(["0.5"] * 125) + "\n")
    assert cli.main(["logprob", "--ckpt", str(workdir / "m.ckpt"), "--input", str(short)]) == cli.EXIT_DIM
    small = FlowModel.create(12, 2, (4,), seed=0)
    small_path = tmp_path / "small.ckpt"
    data.save_checkpoint(data.Checkpoint(small), small_path)
    assert cli.main(["eval-ks", "--ckpt", str(small_path), "--data", str(workdir / "poses.pose6d"),
                     "--n", "10", "--out", str(tmp_path / "k.json")]) == cli.EXIT_DIM
    garbage = tmp_path / "garbage.pose6d"
    garbage.write_bytes(b"not a dataset at all")
    assert cli.main(["eval-ks", "--ckpt", str(workdir / "m.ckpt"), "--data", str(garbage),
                     "--out", str(tmp_path / "k.json")]) == cli.EXIT_FORMAT
    err = capsys.readouterr().err
    assert "error[missing-file]" in err and "error[format]" in err


def test_divergence_exit_code(workdir, tmp_path, monkeypatch):
    from poseflow import training
    from poseflow.errors import DivergedError

    def boom(model, batch):
        raise DivergedError()

    monkeypatch.setattr(training, "loss_and_grads", boom)
    code = cli.main(["train", "--config", str(workdir / "config.json"), "--data",
                     str(workdir / "poses.pose6d"), "--out", str(tmp_path / "d.ckpt"), "--max-epochs", "3"])
    assert code == cli.EXIT_DIVERGED
    assert data.load_checkpoint(tmp_path / "d.ckpt").metadata["epoch"] == 0


@pytest.mark.parametrize("sub", ["gen-data", "train", "sample", "logprob", "eval-ks", "eval-marginals", "ablation"])
def test_help_documents_units_and_layout(sub):
    out = subprocess.run([sys.executable, "-m", "poseflow.cli", sub, "--help"],
                         capture_output=True, text=True, check=True).stdout
    flat = " ".join(out.split())
    assert "nats" in flat and "126" in flat and "first 63 entries" in flat
