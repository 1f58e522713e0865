import json
import os

import numpy as np
import pytest

from arlab.cli import main
from arlab.data import synth_dataset
from arlab.models import build_mlp, save_checkpoint
from arlab.training import TrainConfig, train


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = synth_dataset("gaussian_pair", 200, 6, seed=0)
    cfg = TrainConfig(method="normal", epochs=8, batch_size=32, lr=0.05, seed=0)
    model, _ = train("normal", ds, cfg)
    ckpt = root / "model.ckpt"
    save_checkpoint(model, ckpt)
    proxy, _ = train("normal", ds, TrainConfig(method="normal", epochs=8,
                                               batch_size=32, lr=0.05, seed=1))
    proxy_ckpt = root / "proxy.ckpt"
    save_checkpoint(proxy, proxy_ckpt)
    return root, str(ckpt), str(proxy_ckpt)


DATA = ["--synth", "gaussian_pair", "--n", "120", "--dim", "6", "--data-seed", "0"]


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_unknown_flag_exits_2():
    assert main(["attack", "--bogus"]) == 2


def test_missing_checkpoint_exits_2(capsys):
    code = main(["attack", "--model", "/nonexistent.ckpt", "--spec", "PGD5-8"] + DATA)
    assert code == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_attack_subcommand(workspace, capsys):
    _, ckpt, _ = workspace
    code = main(["attack", "--model", ckpt, "--spec", "PGD10-8"] + DATA)
    assert code == 0
    out = capsys.readouterr().out
    assert "robust_accuracy=" in out and "clean_accuracy=" in out


def test_attack_fgsm_spec(workspace, capsys):
    _, ckpt, _ = workspace
    assert main(["attack", "--model", ckpt, "--spec", "FGSM4"] + DATA) == 0
    assert "attack=FGSM4" in capsys.readouterr().out


def test_attack_bad_spec_exits_nonzero(workspace, capsys):
    _, ckpt, _ = workspace
    code = main(["attack", "--model", ckpt, "--spec", "BIM10-8"] + DATA)
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_transfer_subcommand(workspace, capsys):
    _, ckpt, proxy = workspace
    code = main(["transfer", "--proxy", proxy, "--target", ckpt,
                 "--spec", "PGD5-8"] + DATA)
    assert code == 0
    assert "transfer_accuracy=" in capsys.readouterr().out


def test_diagnose_subcommand(workspace, tmp_path, capsys):
    _, ckpt, _ = workspace
    out = str(tmp_path / "diag")
    code = main(["diagnose", "--model", ckpt, "--attack", "PGD3-8",
                 "--samples", "8", "--out", out] + DATA)
    assert code == 0
    assert os.path.isfile(os.path.join(out, "diagnostics.csv"))
    assert os.path.isfile(os.path.join(out, "diagnostics.png"))
    summary = json.loads(capsys.readouterr().out)
    assert summary["count"] == 8


def test_surface_subcommand(workspace, tmp_path):
    _, ckpt, _ = workspace
    out = str(tmp_path / "surf")
    code = main(["surface", "--model", ckpt, "--index", "0", "--quantity", "margin",
                 "--resolution", "5", "--out", out] + DATA)
    assert code == 0
    assert os.path.isfile(os.path.join(out, "surface_margin.csv"))
    assert os.path.isfile(os.path.join(out, "surface_margin.png"))


def test_surface_index_out_of_range(workspace, tmp_path, capsys):
    _, ckpt, _ = workspace
    code = main(["surface", "--model", ckpt, "--index", "9999",
                 "--out", str(tmp_path)] + DATA)
    assert code == 2


def test_curve_subcommand(workspace, tmp_path, capsys):
    _, ckpt, _ = workspace
    out = str(tmp_path / "curve")
    code = main(["curve", "--model", ckpt, "--kind", "eps-curve",
                 "--grid", "0,0.05", "--restarts", "1", "--out", out]
                + DATA + ["--limit", "40"])
    assert code == 0
    assert os.path.isfile(os.path.join(out, "eps_curve.csv"))
    assert os.path.isfile(os.path.join(out, "eps_curve.png"))
    assert "accuracy=" in capsys.readouterr().out


def test_steps_curve_subcommand(workspace, tmp_path, capsys):
    _, ckpt, _ = workspace
    out = str(tmp_path / "scurve")
    code = main(["curve", "--model", ckpt, "--kind", "steps-curve",
                 "--grid", "2,4", "--eps", "0.05", "--restarts", "1",
                 "--out", out] + DATA + ["--limit", "40"])
    assert code == 0
    assert os.path.isfile(os.path.join(out, "steps_curve.csv"))
    assert "converged=" in capsys.readouterr().out


def test_train_subcommand_with_overrides(tmp_path, capsys):
    config = {
        "name": "cli-train",
        "seed": 1,
        "dataset": {"kind": "synth", "synth": "gaussian_pair", "n": 120, "d": 6,
                    "train_size": 90},
        "model": {"mlp": [6, 2]},
        "train": {"method": "normal", "epochs": 2, "batch_size": 32, "lr": 0.05},
        "attacks": ["PGD3-8"],
        "output_dir": str(tmp_path / "ignored"),
    }
    cfg_path = tmp_path / "exp.json"
    cfg_path.write_text(json.dumps(config))
    out = str(tmp_path / "run")
    code = main(["train", "--config", str(cfg_path), "--output", out,
                 "--set", "train.epochs=3", "--set", "name=renamed"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["experiment_id"] == "renamed-seed1"
    training = json.loads(open(os.path.join(out, "training.json")).read())
    assert len(training["epochs"]) == 3


def test_sweep_subcommand(tmp_path, capsys):
    out = str(tmp_path / "sweep")
    code = main(["sweep", "--method", "entm", "--lambdas", "0.1,2",
                 "--attack", "PGD3-8", "--epochs", "2", "--out", out]
                + DATA)
    assert code == 0
    assert os.path.isfile(os.path.join(out, "sweep.csv"))
    assert os.path.isfile(os.path.join(out, "sweep.png"))
    lines = open(os.path.join(out, "sweep.csv")).read().strip().splitlines()
    assert lines[0] == "lambda,clean_accuracy,robust_accuracy"
    assert len(lines) == 3
