import json

import numpy as np
import pytest

from arlab.attacks import AttackConfig, clean_accuracy
from arlab.autodiff import Tensor
from arlab.data import Dataset, synth_dataset
from arlab.models import build_mlp
from arlab.training import (SGD, TrainConfig, lr_schedule, mean_confidence,
                            mean_output_entropy, sgd_step, train)


def test_sgd_zero_gradient_leaves_params():
    params = {"w": Tensor(np.array([1.0, -2.0]))}
    state = SGD(momentum=0.9, weight_decay=0.0)
    state.step(params, {"w": np.zeros(2)}, lr=0.1)
    assert np.array_equal(params["w"].data, [1.0, -2.0])


def test_sgd_one_step_quadratic():
    # f(theta) = theta^2 from theta=1, lr=0.1, no decay: theta -> 0.8
    params = {"w": Tensor(np.array([1.0]))}
    sgd_step(params, {"w": np.array([2.0])}, lr=0.1,
             state=SGD(momentum=0.9, weight_decay=0.0))
    assert params["w"].data[0] == pytest.approx(0.8)


def test_sgd_momentum_accumulates():
    # constant gradient g: v1 = g, v2 = 1.9 g
    params = {"w": Tensor(np.array([0.0]))}
    state = SGD(momentum=0.9, weight_decay=0.0)
    g = {"w": np.array([1.0])}
    state.step(params, g, lr=1.0)
    first = -params["w"].data[0]
    state.step(params, g, lr=1.0)
    second = -params["w"].data[0] - first
    assert first == pytest.approx(1.0)
    assert second == pytest.approx(1.9)


def test_sgd_weight_decay_enters_gradient():
    params = {"w": Tensor(np.array([2.0]))}
    state = SGD(momentum=0.0, weight_decay=0.1)
    state.step(params, {"w": np.array([0.0])}, lr=1.0)
    assert params["w"].data[0] == pytest.approx(2.0 - 0.1 * 2.0)


def test_sgd_shape_mismatch_rejected():
    params = {"w": Tensor(np.zeros((2, 2)))}
    with pytest.raises(ValueError, match="shape"):
        SGD().step(params, {"w": np.zeros(3)}, lr=0.1)


def test_lr_schedule_mnist_config():
    cfg = TrainConfig(lr=0.01, lr_decay=0.1, decay_epochs=(20,))
    assert lr_schedule(0, cfg) == pytest.approx(0.01)
    assert lr_schedule(19, cfg) == pytest.approx(0.01)
    assert lr_schedule(20, cfg) == pytest.approx(0.001)


def test_lr_schedule_at_config():
    cfg = TrainConfig(lr=0.1, lr_decay=0.1, decay_epochs=(60, 84, 100))
    assert lr_schedule(100, cfg) == pytest.approx(1e-4)
    assert lr_schedule(59, cfg) == pytest.approx(0.1)


def test_lr_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_schedule(-1, TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError, match="unknown method"):
        TrainConfig(method="adp")
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.5)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(gamma=2.0)


def test_train_config_json_roundtrip():
    cfg = TrainConfig(method="pat_entm", lam=2.0, epochs=7,
                      inner=AttackConfig(eps=48 / 255, step_size=6 / 255, steps=10,
                                         restarts=1),
                      decay_epochs=(20, 30), seed=5)
    text = cfg.to_json()
    parsed = TrainConfig.from_json(text)
    assert parsed == cfg
    assert json.loads(text)["method"] == "pat_entm"


@pytest.fixture(scope="module")
def pair_data():
    ds = synth_dataset("gaussian_pair", 320, 6, seed=0, separation=10.0)
    return ds.take(256), Dataset(ds.inputs[256:], ds.labels[256:], num_classes=2)


def test_normal_training_learns_separable_data(pair_data):
    train_data, eval_data = pair_data
    cfg = TrainConfig(method="normal", epochs=12, batch_size=32, lr=0.05, seed=0)
    model, report = train("normal", train_data, cfg, model=build_mlp([6, 2], seed=0),
                          eval_dataset=eval_data)
    assert report.epochs[-1].clean_accuracy >= 0.99
    assert len(report.epochs) == cfg.epochs


def test_unknown_method_rejected(pair_data):
    train_data, _ = pair_data
    with pytest.raises(ValueError, match="unknown method"):
        train("fgsm_training", train_data, TrainConfig())


def test_empty_dataset_rejected():
    empty = Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), num_classes=2)
    with pytest.raises(ValueError, match="empty"):
        train("normal", empty, TrainConfig())


def test_pat_with_zero_eps_collapses_to_normal(pair_data):
    train_data, _ = pair_data
    inner = AttackConfig(eps=0.0, steps=2, restarts=1, init_noise_std=0.0)
    base = TrainConfig(method="normal", epochs=3, batch_size=64, lr=0.05, seed=0)
    pat = TrainConfig(method="pat", epochs=3, batch_size=64, lr=0.05, seed=0,
                      inner=inner)
    m1, _ = train("normal", train_data, base, model=build_mlp([6, 2], seed=0))
    m2, _ = train("pat", train_data, pat, model=build_mlp([6, 2], seed=0))
    for name in m1.param_names():
        # alpha L(X) + (1-alpha) L(X_adv) with X_adv == X is exactly L(X)
        assert np.allclose(m1.params[name].data, m2.params[name].data, atol=1e-12)


def test_training_reproducible_bitwise(pair_data):
    train_data, _ = pair_data
    cfg = TrainConfig(method="pat", epochs=2, batch_size=64, lr=0.05, seed=3,
                      inner=AttackConfig(eps=0.05, steps=3, restarts=1))
    m1, _ = train("pat", train_data, cfg)
    m2, _ = train("pat", train_data, cfg)
    for name in m1.param_names():
        assert m1.params[name].data.tobytes() == m2.params[name].data.tobytes()


def test_entm_raises_output_entropy(pair_data):
    train_data, eval_data = pair_data
    base = TrainConfig(method="normal", epochs=15, batch_size=32, lr=0.05, seed=0)
    entm = TrainConfig(method="entm", lam=2.0, epochs=15, batch_size=32, lr=0.05,
                       seed=0)
    normal_model, _ = train("normal", train_data, base)
    entm_model, _ = train("entm", train_data, entm)
    assert mean_output_entropy(entm_model, eval_data) > \
        mean_output_entropy(normal_model, eval_data)
    assert mean_confidence(entm_model, eval_data) < \
        mean_confidence(normal_model, eval_data)


def test_every_method_runs_and_loss_decreases(pair_data):
    train_data, _ = pair_data
    inner = AttackConfig(eps=0.05, step_size=0.01, steps=3, restarts=1)
    for method in ("normal", "entm", "ls", "pat", "pat_entm", "pat_ls",
                   "trades", "trades_entm"):
        cfg = TrainConfig(method=method, lam=1.0, gamma=0.3, epochs=8,
                          batch_size=32, lr=0.03, seed=0, inner=inner)
        model, report = train(method, train_data, cfg)
        losses = [e.loss for e in report.epochs]
        # window-5 smoothed loss is non-increasing epoch over epoch
        smoothed = [np.mean(losses[max(0, i - 4):i + 1]) for i in range(len(losses))]
        assert all(b <= a + 1e-9 for a, b in zip(smoothed, smoothed[1:])), method
        assert len(report.epochs) == cfg.epochs


def test_pat_inner_examples_respect_ball(pair_data):
    # the inner adversary goes through the attacks module, whose
    # feasibility asserts run on every step; a training run doubles as
    # an integration check that no inner example escapes the ball
    train_data, _ = pair_data
    inner = AttackConfig(eps=0.03, steps=4, restarts=1)
    cfg = TrainConfig(method="pat", epochs=2, batch_size=64, lr=0.05, seed=1,
                      inner=inner)
    model, report = train("pat", train_data, cfg)
    assert len(report.epochs) == 2


def test_robust_probe_recorded(pair_data):
    train_data, eval_data = pair_data
    probe = AttackConfig(eps=0.05, steps=3, restarts=1, seed=0)
    cfg = TrainConfig(method="normal", epochs=2, batch_size=64, lr=0.05, seed=0)
    _, report = train("normal", train_data, cfg, eval_dataset=eval_data,
                      robust_probe=probe)
    assert all(e.robust_accuracy is not None for e in report.epochs)
