"""Acceptance gate.

One test per numbered criterion, each at its stated tolerance, each
printing a single PASS/FAIL line.  The four desk-scale trainings are
session fixtures shared across criteria 6-10; their wall time counts
toward the training-inclusive runtime bounds.

Criteria 6-10 run on real MNIST when IDX files are present and on the
deterministic rendered-digit corpus otherwise (same protocol either
way); the corpus in use is printed with criterion 6.
"""

import math
import time

import numpy as np
import pytest

from arlab.attacks import (AttackConfig, _pgd_core, clean_accuracy, make_objective,
                           parse_attack, pgd, random_search_attack, robust_accuracy)
from arlab.autodiff import Tape, Tensor
from arlab.data import Dataset, synth_dataset
from arlab.diagnostics import (accuracy_eps_curve, decision_margin, exact_jacobian,
                               global_lipschitz_linear, jacobian_spectral_norm,
                               lipschitz_certificate, min_distortion_l2)
from arlab.experiment import ExperimentConfig, run_experiment
from arlab.losses import (cross_entropy, entropy, kl_div, normal_loss, one_hot,
                          smooth_labels)
from arlab.models import build_mlp, predict_labels, softmax
from arlab.training import TrainConfig, mean_confidence, train

from helpers import (central_difference, max_relative_error, random_mlp,
                     random_small_cnn)


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}", flush=True)
    assert ok, f"criterion {num}: {detail}"


def _gradcheck(model, X, y) -> float:
    with Tape() as tape:
        xt = Tensor(X)
        total = normal_loss(model, xt, y).total
    grads = tape.backward(total)

    worst = max_relative_error(
        grads[xt], central_difference(
            lambda a: normal_loss(model, a, y).value, X))
    for name in model.param_names():
        param = model.params[name]

        def f(arr, _n=name):
            old = model.params[_n]
            model.params[_n] = Tensor(arr)
            try:
                return normal_loss(model, X, y).value
            finally:
                model.params[_n] = old

        worst = max(worst, max_relative_error(
            grads[param], central_difference(f, param.data)))
    return worst


def test_criterion_1_gradient_oracle():
    start = time.time()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = random_small_cnn(rng) if seed % 5 == 0 else random_mlp(rng)
        n = int(rng.integers(1, 4))
        X = rng.random((n,) + model.input_shape)
        y = rng.integers(0, model.num_classes, n)
        worst = max(worst, _gradcheck(model, X, y))
    elapsed = time.time() - start
    _report(1, worst < 1e-4 and elapsed < 10,
            f"gradcheck on 100 models: max rel err {worst:.2e} "
            f"(tol 1e-4), {elapsed:.1f}s (limit 10s)")


def test_criterion_2_loss_identities():
    start = time.time()
    rng = np.random.default_rng(12345)
    worst = 0.0
    for _ in range(1000):
        c = int(rng.integers(2, 16))
        p = softmax(rng.normal(0, 3, c))
        y = one_hot([int(rng.integers(0, c))], c)[0]
        gamma = float(rng.uniform(0, 1))
        lam = float(rng.uniform(0, 5))
        u = np.full(c, 1.0 / c)
        ls_gap = abs(cross_entropy(p, smooth_labels(y, gamma))
                     - ((1 - gamma) * cross_entropy(p, y)
                        + gamma * kl_div(u, p) + gamma * math.log(c)))
        entm_gap = abs((cross_entropy(p, y) - lam * entropy(p))
                       - (cross_entropy(p, y) + lam * kl_div(p, u)
                          - lam * math.log(c)))
        worst = max(worst, ls_gap, entm_gap)
    elapsed = time.time() - start
    _report(2, worst < 1e-10 and elapsed < 5,
            f"smoothing/entropy KL decompositions over 1000 draws: "
            f"max gap {worst:.2e} (tol 1e-10), {elapsed:.1f}s (limit 5s)")


def test_criterion_3_attack_feasibility():
    start = time.time()
    runs = 0
    violations = 0
    rng = np.random.default_rng(777)
    while runs < 10000:
        model = random_mlp(rng)
        n = 100
        X = rng.random((n,) + model.input_shape)
        y = rng.integers(0, model.num_classes, n)
        cfg = AttackConfig(
            norm=("linf", "l2")[int(rng.integers(0, 2))],
            eps=float(rng.uniform(1e-3, 0.6)),
            steps=int(rng.integers(1, 6)),
            restarts=int(rng.integers(1, 3)),
            init_noise_std=float(rng.choice([0.0, 0.005, 0.05])),
            objective=("ce", "cw")[int(rng.integers(0, 2))],
            seed=int(rng.integers(0, 2 ** 31)))
        res = pgd(model, X, y, cfg)  # in-attack asserts run every step
        deltas = (res.x_adv - X).reshape(n, -1)
        norms = np.abs(deltas).max(axis=1) if cfg.norm == "linf" \
            else np.sqrt((deltas ** 2).sum(axis=1))
        violations += int((norms > cfg.eps + 1e-12).sum())
        violations += int(res.x_adv.min() < 0 or res.x_adv.max() > 1)
        runs += n
    elapsed = time.time() - start
    _report(3, violations == 0 and elapsed < 120,
            f"{runs} attack runs, {violations} ball/box violations "
            f"(tol 0), {elapsed:.1f}s (limit 120s)")


@pytest.fixture(scope="module")
def linear_oracle_model():
    ds = synth_dataset("gaussian_pair", 400, 8, seed=0)
    cfg = TrainConfig(method="normal", epochs=15, batch_size=32, lr=0.05,
                      decay_epochs=(10,), seed=0)
    model, _ = train("normal", ds, cfg, model=build_mlp([8, 2], seed=0))
    interior = [i for i in range(len(ds))
                if np.all(ds.inputs[i] > 0.12) and np.all(ds.inputs[i] < 0.88)]
    return model, ds.inputs[interior][:50], ds.labels[interior][:50]


def test_criterion_4_linear_attack_oracle(linear_oracle_model):
    from arlab.attacks import _objective_values
    start = time.time()
    model, X, y = linear_oracle_model
    W = model.params["layer0.weight"].data
    eps = 8 / 255

    cfg = AttackConfig(norm="linf", eps=eps, step_size=eps / 10, steps=20,
                       restarts=2, seed=0)
    res = pgd(model, X, y, cfg)
    worst_gap = 0.0
    for i in range(len(y)):
        ascent = W[:, 1 - y[i]] - W[:, y[i]]
        x_star = np.clip(X[i] + eps * np.sign(ascent), 0, 1)
        optimum = _objective_values(model, x_star[None], y[i:i + 1], "ce", 0.0)[0]
        worst_gap = max(worst_gap, optimum - res.objective[i])

    md = min_distortion_l2(model, X, y, seed=0)
    worst_rel = 0.0
    for i in range(len(y)):
        margin = decision_margin(model, X[i], int(y[i]))
        if margin <= 0 or md.info["censored"][i]:
            continue
        span = W[:, y[i]] - W[:, 1 - y[i]]
        closed = abs(margin) / np.linalg.norm(span)
        worst_rel = max(worst_rel, abs(md.distortion[i] - closed) / closed)
    elapsed = time.time() - start
    _report(4, worst_gap <= 1e-6 and worst_rel < 0.10 and elapsed < 30,
            f"PGD vs closed form: objective gap {worst_gap:.2e} (tol 1e-6); "
            f"min distortion vs |margin|/||w||: rel err {worst_rel:.3f} "
            f"(tol 0.10), {elapsed:.1f}s (limit 30s)")


def test_criterion_5_spectral_norm_oracle():
    start = time.time()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        model = random_small_cnn(rng) if seed % 3 == 0 else random_mlp(rng)
        x = rng.random(model.input_shape)
        exact = jacobian_spectral_norm(model, x, mode="exact")
        power = jacobian_spectral_norm(model, x, mode="power_iteration",
                                       seed=seed, max_iter=2000)
        if exact > 1e-12:
            worst = max(worst, abs(power - exact) / exact)
        else:
            worst = max(worst, abs(power))
    elapsed = time.time() - start
    _report(5, worst < 1e-3 and elapsed < 60,
            f"power iteration vs exact SVD on 50 nets: max rel err "
            f"{worst:.2e} (tol 1e-3), {elapsed:.1f}s (limit 60s)")


def test_criterion_6_desk_pipeline(image_corpus, desk_normal):
    start = time.time()
    _, test_data, corpus = image_corpus
    model, report, train_seconds = desk_normal
    clean = report.epochs[-1].clean_accuracy
    robust = robust_accuracy(model, test_data.take(500), parse_attack("PGD10-48"))
    elapsed = train_seconds + (time.time() - start)
    _report(6, clean >= 0.95 and robust < 0.15 and elapsed < 900,
            f"[{corpus}] normal 10k/5ep: clean {clean:.4f} (>=0.95), "
            f"robust PGD10-48 {robust:.4f} (<0.15), {elapsed:.0f}s (limit 900s)")


def test_criterion_7_jacobian_shrink(image_corpus, desk_normal, desk_entm,
                                     desk_pat, desk_pat_entm):
    start = time.time()
    _, test_data, corpus = image_corpus

    def mean_sigma(model):
        return float(np.mean([jacobian_spectral_norm(model, test_data.inputs[i])
                              for i in range(200)]))

    sigma = {name: mean_sigma(fixture[0]) for name, fixture in
             (("normal", desk_normal), ("entm", desk_entm),
              ("pat", desk_pat), ("pat_entm", desk_pat_entm))}
    ratio_plain = sigma["entm"] / sigma["normal"]
    ratio_at = sigma["pat_entm"] / sigma["pat"]
    train_seconds = sum(f[2] for f in (desk_normal, desk_entm, desk_pat,
                                       desk_pat_entm))
    elapsed = train_seconds + (time.time() - start)
    _report(7, ratio_plain <= 0.5 and ratio_at <= 0.5 and elapsed < 2700,
            f"[{corpus}] mean Jacobian norm entm/normal {ratio_plain:.3f}, "
            f"pat_entm/pat {ratio_at:.3f} (each <=0.5), "
            f"{elapsed:.0f}s incl 4 trainings (limit 2700s)")


def test_confidence_ordering_follows_regularization(image_corpus, desk_normal,
                                                    desk_entm, desk_pat_entm):
    # entropy-promoting variants must not be more confident than the
    # plain model (slack 0.02)
    _, test_data, _ = image_corpus
    probe = test_data.take(1000)
    conf_normal = mean_confidence(desk_normal[0], probe)
    assert conf_normal > mean_confidence(desk_entm[0], probe) - 0.02
    assert conf_normal > mean_confidence(desk_pat_entm[0], probe) - 0.02


def test_criterion_8_at_robustness_floor(image_corpus, desk_normal, desk_pat):
    start = time.time()
    _, test_data, corpus = image_corpus
    atk = parse_attack("PGD10-48")
    eval_split = test_data.take(500)
    robust_pat = robust_accuracy(desk_pat[0], eval_split, atk)
    robust_normal = robust_accuracy(desk_normal[0], eval_split, atk)
    gap = robust_pat - robust_normal
    elapsed = time.time() - start
    _report(8, robust_pat >= 0.60 and robust_normal < 0.15 and gap > 0.40,
            f"[{corpus}] PGD10-48 robust: pat {robust_pat:.4f} (>=0.60), "
            f"normal {robust_normal:.4f} (<0.15), gap {gap:.4f} (>0.40), "
            f"{elapsed:.0f}s")


def test_criterion_9_eps_curve_monotone_and_collapses(image_corpus, desk_pat):
    start = time.time()
    _, test_data, corpus = image_corpus
    grid = [0.0, 16 / 255, 48 / 255, 96 / 255, 160 / 255, 224 / 255]
    curve = accuracy_eps_curve(desk_pat[0], test_data.take(200), grid,
                               restarts=2, seed=0)
    accs = curve.accuracies
    monotone = all(b <= a + 0.005 for a, b in zip(accs, accs[1:]))
    collapsed = accs[-1] < 0.01
    elapsed = time.time() - start
    _report(9, monotone and collapsed,
            f"[{corpus}] accuracy-eps curve {[round(a, 3) for a in accs]}: "
            f"monotone within 0.5% ({monotone}), terminal {accs[-1]:.4f} "
            f"(<0.01), {elapsed:.0f}s")


def test_criterion_10_gradient_obfuscation_probe(image_corpus, desk_entm,
                                                 desk_pat):
    start = time.time()
    _, test_data, corpus = image_corpus
    atk = parse_attack("PGD10-48")
    eps = 48 / 255
    probe = test_data.take(1000)

    entm_model = desk_entm[0]
    res = pgd(entm_model, probe.inputs, probe.labels, atk,
              example_ids=np.arange(len(probe)))
    defended = np.flatnonzero(~res.success)[:200]
    assert defended.size >= 1, "entm model defends no points at all"
    rs = random_search_attack(entm_model, probe.inputs[defended],
                              probe.labels[defended], eps, trials=1000,
                              seed=11, example_ids=defended)
    entm_cracked = int(rs.success.sum())

    pat_model = desk_pat[0]
    res = pgd(pat_model, probe.inputs, probe.labels, atk,
              example_ids=np.arange(len(probe)))
    defended_pat = np.flatnonzero(~res.success)[:200]
    assert defended_pat.size == 200, "pat model defends fewer than 200 points"
    rs = random_search_attack(pat_model, probe.inputs[defended_pat],
                              probe.labels[defended_pat], eps, trials=1000,
                              seed=11, example_ids=defended_pat)
    pat_cracked = int(rs.success.sum())
    elapsed = time.time() - start
    _report(10, entm_cracked >= 1 and pat_cracked == 0,
            f"[{corpus}] random search cracked {entm_cracked}/{defended.size} "
            f"entm-defended points (>=1) and {pat_cracked}/200 pat-defended "
            f"(==0), {elapsed:.0f}s")


def test_criterion_11_certificate_soundness():
    start = time.time()
    rng = np.random.default_rng(2024)
    certified = 0
    flips = 0
    while certified < 1000:
        d = int(rng.integers(3, 9))
        model = build_mlp([d, int(rng.integers(2, 5))],
                          seed=int(rng.integers(0, 2 ** 31)))
        lf = global_lipschitz_linear(model)
        if lf < 1e-9:
            continue
        n = 40
        X = rng.random((n, d))
        labels = predict_labels(model, X)
        margins = np.array([decision_margin(model, X[i], int(labels[i]))
                            for i in range(n)])
        keep = margins > 1e-6
        X, labels, margins = X[keep], labels[keep], margins[keep]
        if len(X) == 0:
            continue
        radii = margins / (math.sqrt(2) * lf) * float(rng.uniform(0.5, 0.999))
        for i in range(len(X)):
            assert lipschitz_certificate(model, X[i], int(labels[i]), radii[i])
        certified += len(X)

        # strongest L2 attacks in the suite at exactly the certified radius
        for objective in ("ce", "cw"):
            res = _pgd_core(model, X, labels, radii, radii / 10, steps=25,
                            restarts=2, norm="l2", init_noise_std=0.005,
                            seed=int(rng.integers(0, 2 ** 31)),
                            example_ids=np.arange(len(X)),
                            objective_fn=make_objective(objective),
                            value_kind=objective, smoothing=0.0)
            flips += int(res.success.sum())
        # Linf attacks confined to the L2 ball: eps_inf = radius / sqrt(d)
        res = _pgd_core(model, X, labels, radii / math.sqrt(d),
                        radii / math.sqrt(d) / 5, steps=10, restarts=2,
                        norm="linf", init_noise_std=0.005,
                        seed=int(rng.integers(0, 2 ** 31)),
                        example_ids=np.arange(len(X)),
                        objective_fn=make_objective("ce"),
                        value_kind="ce", smoothing=0.0)
        flips += int(res.success.sum())
    elapsed = time.time() - start
    _report(11, flips == 0 and elapsed < 120,
            f"{certified} certified points, {flips} flips under the attack "
            f"suite (tol 0), {elapsed:.1f}s (limit 120s)")


def test_criterion_12_experiment_determinism(tmp_path):
    start = time.time()
    base = {
        "name": "determinism",
        "seed": 9,
        "dataset": {"kind": "synth", "synth": "gaussian_pair", "n": 160, "d": 6,
                    "train_size": 120},
        "model": {"mlp": [6, 2]},
        "train": {"method": "pat", "epochs": 2, "batch_size": 32, "lr": 0.05,
                  "inner": {"eps": 0.05, "steps": 3, "restarts": 1}},
        "attacks": ["PGD5-8", "FGSM8"],
        "output_dir": str(tmp_path / "run"),
    }
    import os
    names = ("report.json", "attacks.csv", "model.ckpt", "training.json")
    run_experiment(ExperimentConfig.from_json(base))
    first = {n: open(os.path.join(base["output_dir"], n), "rb").read()
             for n in names}
    run_experiment(ExperimentConfig.from_json(base))
    identical = all(first[n] == open(os.path.join(base["output_dir"], n),
                                     "rb").read() for n in names)
    elapsed = time.time() - start
    _report(12, identical,
            f"rerun with identical config+seed byte-identical across "
            f"{list(names)}: {identical}, {elapsed:.1f}s")
