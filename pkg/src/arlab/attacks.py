"""The attack matrix: FGSM, PGD (Linf/L2), CW-objective PGD, adaptive
smoothed-label attacks, random search, minimal-distortion search, and
black-box transfer evaluation.

All attacks are read-only on the model, vectorized over example
batches, and deterministic given (seed, restart index, example index):
each example owns its own noise stream, so results do not depend on how
examples are batched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .losses import one_hot, smooth_labels
from .models import Model

FEASIBILITY_SLACK = 1e-12


@dataclass
class AttackConfig:
    """Norm-bounded attack parameters; inputs live in [0,1]^d.

    ``step_size=None`` resolves to eps/10 (the p-step / eps = k/255 /
    step = k/2550 convention).  ``smoothing`` is the label-smoothing
    strength used when objective == "smoothed_ce".
    """

    norm: str = "linf"
    eps: float = 8 / 255
    step_size: float | None = None
    steps: int = 10
    restarts: int = 5
    init_noise_std: float = 0.005
    objective: str = "ce"
    smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        # eps = 0 is allowed as the clean-accuracy degenerate case
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_size is None:
            self.step_size = self.eps / 10 if self.eps > 0 else 1 / 510
        if self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.objective not in ("ce", "cw", "smoothed_ce"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.smoothing <= 1.0:
            raise ValueError(f"smoothing must be in [0,1], got {self.smoothing}")

    def to_dict(self) -> dict:
        return {
            "norm": self.norm, "eps": self.eps, "step_size": self.step_size,
            "steps": self.steps, "restarts": self.restarts,
            "init_noise_std": self.init_noise_std, "objective": self.objective,
            "smoothing": self.smoothing, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "AttackConfig":
        return AttackConfig(**d)


@dataclass
class AttackResult:
    """Per-example outcome of an attack run.

    For single-example inputs the array fields are length 1.  ``info``
    carries attack-specific extras (chosen gamma, censoring flags).
    """

    x_adv: np.ndarray
    success: np.ndarray
    restarts: int
    objective: np.ndarray
    distortion: np.ndarray
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# attack-spec grammar: FGSM{k}, PGD{p}-{k}, CW{p}-{k} with eps = k/255

_SPEC_RE = re.compile(r"^(FGSM|PGD|CW)(\d+(?:\.\d+)?)(?:-(\d+(?:\.\d+)?))?$", re.I)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


def parse_attack(spec: str) -> AttackConfig:
    """Parse table notation: FGSM4 (one step, eps=4/255), PGD40-8
    (40 steps, eps=8/255, step 8/2550), CW40-16 (same, CW objective)."""
    m = _SPEC_RE.match(spec.strip())
    if not m:
        raise ValueError(f"unrecognized attack spec {spec!r}")
    kind = m.group(1).upper()
    if kind == "FGSM":
        if m.group(3) is not None:
            raise ValueError(f"FGSM takes a single budget: {spec!r}")
        k = float(m.group(2))
        return AttackConfig(norm="linf", eps=k / 255, step_size=k / 255, steps=1)
    if m.group(3) is None:
        raise ValueError(f"{kind} spec needs steps and budget, e.g. {kind}40-8: {spec!r}")
    p, k = int(m.group(2)), float(m.group(3))
    return AttackConfig(norm="linf", eps=k / 255, step_size=k / 2550, steps=p,
                        objective="cw" if kind == "CW" else "ce")


def format_attack(cfg: AttackConfig) -> str:
    """Canonical table notation for a config; raises if not representable."""
    if cfg.norm != "linf" or cfg.objective == "smoothed_ce":
        raise ValueError("only Linf CE/CW attacks have table notation")
    k = cfg.eps * 255
    if cfg.steps == 1 and np.isclose(cfg.step_size, cfg.eps):
        return f"FGSM{_fmt_num(k)}"
    if not np.isclose(cfg.step_size, cfg.eps / 10):
        raise ValueError("table notation implies step_size = eps/10")
    prefix = "CW" if cfg.objective == "cw" else "PGD"
    return f"{prefix}{cfg.steps}-{_fmt_num(k)}"


def canonical_attack(spec: str) -> str:
    return format_attack(parse_attack(spec))


# ---------------------------------------------------------------------------
# objectives


def cw_objective(logits, y) -> tuple:
    """Logit-margin objective max_{i != y} Z_i - Z_y and its gradient seed.

    Positive value iff the example is misclassified (up to argmax ties);
    ascending it drives misclassification.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    Z = logits[None, :] if single else logits
    yv = np.atleast_1d(np.asarray(y, dtype=int))
    n, c = Z.shape
    rows = np.arange(n)
    masked = Z.copy()
    masked[rows, yv] = -np.inf
    other = masked.argmax(axis=1)
    value = Z[rows, other] - Z[rows, yv]
    seed = np.zeros_like(Z)
    seed[rows, other] += 1.0
    seed[rows, yv] -= 1.0
    if single:
        return float(value[0]), seed[0]
    return value, seed


ObjectiveFn = Callable[[Model, Tensor, np.ndarray], Tensor]


def make_objective(kind: str, smoothing: float = 0.0) -> ObjectiveFn:
    """Traced batch-sum attack objective L_atk(f(X'), y) to be ascended."""

    def ce_like(model, xt, y, gamma):
        targets = smooth_labels(one_hot(y, model.num_classes), gamma)
        logp = ad.log_softmax(model.forward(xt))
        return (logp * Tensor(targets)).sum() * -1.0

    if kind == "ce":
        return lambda model, xt, y: ce_like(model, xt, y, 0.0)
    if kind == "smoothed_ce":
        return lambda model, xt, y: ce_like(model, xt, y, smoothing)
    if kind == "cw":
        def cw(model, xt, y):
            logits = model.forward(xt)
            _, seed = cw_objective(logits.data, y)
            return (logits * Tensor(seed)).sum()
        return cw
    raise ValueError(f"unknown objective {kind!r}")


def kl_objective(reference_logp: np.ndarray) -> ObjectiveFn:
    """KL(p(X') || p_ref) against fixed reference log-probabilities;
    the inner maximization used by TRADES-style training."""
    ref = Tensor(np.asarray(reference_logp))

    def obj(model, xt, y):
        logp = ad.log_softmax(model.forward(xt))
        return (logp.exp() * (logp - ref)).sum()

    return obj


def input_gradient(model: Model, X, loss: str | ObjectiveFn, y,
                   smoothing: float = 0.0) -> np.ndarray:
    """Gradient of the selected attack objective with respect to X."""
    fn = make_objective(loss, smoothing) if isinstance(loss, str) else loss
    arr, single = model._batched(X)
    yv = np.atleast_1d(np.asarray(y))
    with Tape() as tape:
        xt = Tensor(arr)
        total = fn(model, xt, yv)
    grad = tape.backward(total, wrt=[xt])[xt]
    return grad[0] if single else grad


def _objective_values(model: Model, x: np.ndarray, y: np.ndarray,
                      kind: str, smoothing: float) -> np.ndarray:
    """Per-example objective values, for restart selection and reporting."""
    logits = model.forward(x).data
    if kind == "cw":
        value, _ = cw_objective(logits, y)
        return np.atleast_1d(value)
    targets = smooth_labels(one_hot(y, model.num_classes), smoothing if kind == "smoothed_ce" else 0.0)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return -(targets * logp).sum(axis=-1)


# ---------------------------------------------------------------------------
# projection machinery


def _norms(delta: np.ndarray, norm: str) -> np.ndarray:
    flat = delta.reshape(delta.shape[0], -1)
    if norm == "linf":
        return np.abs(flat).max(axis=1)
    return np.sqrt((flat ** 2).sum(axis=1))


def _project(x: np.ndarray, x0: np.ndarray, eps, norm: str) -> np.ndarray:
    """Project onto the eps-ball around x0, then clip to the unit box.

    Box clipping only shrinks per-coordinate deltas, so it cannot push
    the iterate back outside either ball.
    """
    eps = np.asarray(eps, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1)))
    delta = x - x0
    if norm == "linf":
        delta = np.clip(delta, -eps, eps)
    else:
        norms = _norms(delta, "l2").reshape(eps.shape)
        factor = np.where(norms > eps, np.divide(
            eps, norms, out=np.ones_like(norms), where=norms > 0), 1.0)
        delta = delta * factor
    return np.clip(x0 + delta, 0.0, 1.0)


def _assert_feasible(x: np.ndarray, x0: np.ndarray, eps, norm: str) -> None:
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    norms = _norms(x - x0, norm)
    assert np.all(norms <= eps + FEASIBILITY_SLACK), \
        f"{norm} ball violated: max delta {norms.max()} > eps"
    assert x.min() >= -FEASIBILITY_SLACK and x.max() <= 1 + FEASIBILITY_SLACK, \
        f"box violated: range [{x.min()}, {x.max()}]"


def _init_noise(shape_one, std: float, seed: int, restart: int,
                example_ids: np.ndarray) -> np.ndarray:
    """Per-example Gaussian init noise from independent (seed, restart, id) streams."""
    if std <= 0:
        return np.zeros((len(example_ids),) + shape_one)
    rows = [np.random.default_rng((int(seed), int(restart), int(i))).normal(0.0, std, shape_one)
            for i in example_ids]
    return np.stack(rows)


def _prepare(model: Model, X, y):
    arr, single = model._batched(X)
    yv = np.atleast_1d(np.asarray(y, dtype=int))
    if yv.shape[0] != arr.shape[0]:
        raise ValueError(f"{arr.shape[0]} examples but {yv.shape[0]} labels")
    return arr, yv, single


def _finish(result: AttackResult, single: bool) -> AttackResult:
    if single:
        result.x_adv = result.x_adv[0]
    return result


# ---------------------------------------------------------------------------
# the attacks


def fgsm(model: Model, X, y, eps: float) -> AttackResult:
    """One sign-gradient step of size eps from X itself, then box clip."""
    arr, yv, single = _prepare(model, X, y)
    grad = input_gradient(model, arr, "ce", yv)
    x_adv = np.clip(arr + eps * np.sign(grad), 0.0, 1.0)
    _assert_feasible(x_adv, arr, np.full(arr.shape[0], eps), "linf")
    from .models import predict_labels
    success = predict_labels(model, x_adv) != yv
    return _finish(AttackResult(
        x_adv=x_adv, success=success, restarts=1,
        objective=_objective_values(model, x_adv, yv, "ce", 0.0),
        distortion=_norms(x_adv - arr, "linf")), single)


def _pgd_core(model: Model, x0: np.ndarray, y: np.ndarray, eps: np.ndarray,
              step_size: np.ndarray, steps: int, restarts: int, norm: str,
              init_noise_std: float, seed: int, example_ids: np.ndarray,
              objective_fn: ObjectiveFn, value_kind: str,
              smoothing: float) -> AttackResult:
    """Restarted projected ascent; eps and step_size may vary per example."""
    from .models import predict_labels

    n = x0.shape[0]
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,))
    step = np.broadcast_to(np.asarray(step_size, dtype=np.float64), (n,))
    step_b = step.reshape(-1, *([1] * (x0.ndim - 1)))

    best_x = x0.copy()
    best_obj = np.full(n, -np.inf)
    best_success = np.zeros(n, dtype=bool)

    for r in range(restarts):
        x = np.clip(x0 + _init_noise(x0.shape[1:], init_noise_std, seed, r, example_ids),
                    0.0, 1.0)
        x = _project(x, x0, eps, norm)
        _assert_feasible(x, x0, eps, norm)
        for _ in range(steps):
            with Tape() as tape:
                xt = Tensor(x)
                total = objective_fn(model, xt, y)
            grad = tape.backward(total, wrt=[xt])[xt]
            if norm == "linf":
                x = x + step_b * np.sign(grad)
            else:
                gnorm = _norms(grad, "l2").reshape(step_b.shape)
                x = x + step_b * np.divide(grad, gnorm, out=np.zeros_like(grad),
                                           where=gnorm > 0)
            x = _project(x, x0, eps, norm)
            _assert_feasible(x, x0, eps, norm)
        obj = _objective_values(model, x, y, value_kind, smoothing)
        success = predict_labels(model, x) != y
        better = (success & ~best_success) | ((success == best_success) & (obj > best_obj))
        best_x[better] = x[better]
        best_obj[better] = obj[better]
        best_success |= success

    return AttackResult(x_adv=best_x, success=best_success, restarts=restarts,
                        objective=best_obj, distortion=_norms(best_x - x0, norm))


def pgd(model: Model, X, y, cfg: AttackConfig, example_ids=None) -> AttackResult:
    """Projected gradient ascent per Eq-style recipe: noisy init, sign
    (Linf) or normalized (L2) steps, project to the ball then the box;
    worst case over restarts (success first, then objective value)."""
    arr, yv, single = _prepare(model, X, y)
    ids = np.arange(arr.shape[0]) if example_ids is None else np.asarray(example_ids)
    result = _pgd_core(
        model, arr, yv, cfg.eps, cfg.step_size, cfg.steps, cfg.restarts, cfg.norm,
        cfg.init_noise_std, cfg.seed, ids,
        make_objective(cfg.objective, cfg.smoothing), cfg.objective, cfg.smoothing)
    return _finish(result, single)


def run_attack(model: Model, X, y, cfg: AttackConfig, example_ids=None) -> AttackResult:
    """Dispatch an AttackConfig; single-step saturating Linf CE == FGSM."""
    return pgd(model, X, y, cfg, example_ids)


def adaptive_smoothed_attack(model: Model, X, y, eps: float, steps: int,
                             gamma_grid=None, restarts: int = 5,
                             init_noise_std: float = 0.005, seed: int = 0,
                             example_ids=None) -> AttackResult:
    """PGD with smoothed-label CE, searching gamma over a grid.

    gamma = 0 reproduces plain PGD, so this attack dominates it; the
    most damaging grid entry per example wins (success first, then CW
    margin, which is comparable across gammas).
    """
    arr, yv, single = _prepare(model, X, y)
    if gamma_grid is None:
        gamma_grid = np.round(np.arange(0.0, 1.0 + 1e-9, 0.1), 10)
    ids = np.arange(arr.shape[0]) if example_ids is None else np.asarray(example_ids)

    n = arr.shape[0]
    best_x = arr.copy()
    best_margin = np.full(n, -np.inf)
    best_success = np.zeros(n, dtype=bool)
    best_gamma = np.zeros(n)
    for gamma in gamma_grid:
        cfg = AttackConfig(norm="linf", eps=eps, step_size=eps / 10 if eps > 0 else None,
                           steps=steps, restarts=restarts,
                           init_noise_std=init_noise_std, objective="smoothed_ce",
                           smoothing=float(gamma), seed=seed)
        res = _pgd_core(model, arr, yv, cfg.eps, cfg.step_size, cfg.steps, cfg.restarts,
                        cfg.norm, cfg.init_noise_std, cfg.seed, ids,
                        make_objective("smoothed_ce", float(gamma)), "smoothed_ce",
                        float(gamma))
        margin, _ = cw_objective(model.forward(res.x_adv).data, yv)
        margin = np.atleast_1d(margin)
        better = (res.success & ~best_success) | (
            (res.success == best_success) & (margin > best_margin))
        best_x[better] = res.x_adv[better]
        best_margin[better] = margin[better]
        best_gamma[better] = gamma
        best_success |= res.success

    return _finish(AttackResult(
        x_adv=best_x, success=best_success, restarts=restarts, objective=best_margin,
        distortion=_norms(best_x - arr, "linf"),
        info={"gamma": best_gamma}), single)


def random_search_attack(model: Model, X, y, eps: float, trials: int,
                         seed: int = 0, example_ids=None) -> AttackResult:
    """Uniform sampling in the Linf ball intersected with the unit box;
    stops per example at the first misclassifying sample."""
    from .models import predict_labels

    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    arr, yv, single = _prepare(model, X, y)
    ids = np.arange(arr.shape[0]) if example_ids is None else np.asarray(example_ids)
    n = arr.shape[0]
    lo = np.maximum(arr - eps, 0.0)
    hi = np.minimum(arr + eps, 1.0)
    rngs = [np.random.default_rng((int(seed), int(i))) for i in ids]

    x_adv = arr.copy()
    success = np.zeros(n, dtype=bool)
    for _ in range(trials):
        alive = np.flatnonzero(~success)
        if alive.size == 0:
            break
        samples = np.stack([
            lo[i] + rngs[i].random(arr.shape[1:]) * (hi[i] - lo[i]) for i in alive])
        _assert_feasible(samples, arr[alive], np.full(alive.size, eps), "linf")
        hits = predict_labels(model, samples) != yv[alive]
        took = alive[hits]
        x_adv[took] = samples[hits]
        success[took] = True
    return _finish(AttackResult(
        x_adv=x_adv, success=success, restarts=trials,
        objective=_objective_values(model, x_adv, yv, "cw", 0.0),
        distortion=_norms(x_adv - arr, "linf")), single)


def min_distortion_l2(model: Model, X, y, eps0: float = 0.05,
                      rel_width: float = 1e-2, steps: int = 100,
                      restarts: int = 2, seed: int = 0,
                      example_ids=None) -> AttackResult:
    """Smallest-budget L2 attack: double eps from eps0 until the PGD
    inner attack (100 steps, step eps/10, 2 restarts) succeeds, then
    bisect the bracket to 1% relative width.

    Points that survive the ceiling eps = sqrt(d) are censored: success
    False, distortion NaN, info["censored"] True.
    """
    from .models import predict_labels

    arr, yv, single = _prepare(model, X, y)
    ids = np.arange(arr.shape[0]) if example_ids is None else np.asarray(example_ids)
    n = arr.shape[0]
    d = int(np.prod(arr.shape[1:]))
    ceiling = float(np.sqrt(d))

    x_adv = arr.copy()
    distortion = np.full(n, np.nan)
    success = np.zeros(n, dtype=bool)
    censored = np.zeros(n, dtype=bool)

    # already-misclassified points have distortion 0 by convention
    clean_wrong = predict_labels(model, arr) != yv
    success[clean_wrong] = True
    distortion[clean_wrong] = 0.0

    def attack_at(idx: np.ndarray, eps_vec: np.ndarray) -> AttackResult:
        return _pgd_core(model, arr[idx], yv[idx], eps_vec, eps_vec / 10, steps,
                         restarts, "l2", 0.005, seed, ids[idx],
                         make_objective("ce"), "ce", 0.0)

    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    pending = np.flatnonzero(~success)
    eps = eps0
    while pending.size and eps <= ceiling * 2:
        eps_here = min(eps, ceiling)
        res = attack_at(pending, np.full(pending.size, eps_here))
        hit = res.success
        taken = pending[hit]
        hi[taken] = eps_here
        x_adv[taken] = res.x_adv[hit]
        distortion[taken] = res.distortion[hit]
        success[taken] = True
        lo[pending[~hit]] = eps_here
        pending = pending[~hit]
        if eps_here >= ceiling:
            break
        eps *= 2
    censored[pending] = True

    refine = np.flatnonzero(success & ~clean_wrong)
    while refine.size:
        width = (hi[refine] - lo[refine]) / hi[refine]
        refine = refine[width > rel_width]
        if refine.size == 0:
            break
        mid = 0.5 * (lo[refine] + hi[refine])
        res = attack_at(refine, mid)
        hit = res.success
        taken = refine[hit]
        hi[taken] = mid[hit]
        x_adv[taken] = res.x_adv[hit]
        distortion[taken] = res.distortion[hit]
        lo[refine[~hit]] = mid[~hit]

    return _finish(AttackResult(
        x_adv=x_adv, success=success, restarts=restarts,
        objective=_objective_values(model, x_adv, yv, "cw", 0.0),
        distortion=distortion, info={"censored": censored}), single)


# ---------------------------------------------------------------------------
# dataset-level evaluation


def _dataset_arrays(dataset):
    inputs = getattr(dataset, "inputs", None)
    labels = getattr(dataset, "labels", None)
    if inputs is None or labels is None:
        inputs, labels = dataset
    return np.asarray(inputs, dtype=np.float64), np.asarray(labels, dtype=int)


def clean_accuracy(model: Model, dataset, batch_size: int = 512) -> float:
    from .models import predict_labels
    inputs, labels = _dataset_arrays(dataset)
    return float((predict_labels(model, inputs, batch_size) == labels).mean())


def robust_accuracy(model: Model, dataset, cfg: AttackConfig,
                    repeats: int = 1, batch_size: int = 256) -> float:
    """Fraction of examples whose worst case over restarts stays correct;
    averaged over `repeats` runs with independently derived seeds."""
    inputs, labels = _dataset_arrays(dataset)
    if inputs.shape[0] == 0:
        raise ValueError("robust_accuracy: empty dataset")
    if cfg.eps == 0:
        return clean_accuracy(model, (inputs, labels))
    accs = []
    for rep in range(repeats):
        rep_cfg = replace(cfg, seed=cfg.seed + 131071 * rep)
        correct = 0
        for start in range(0, inputs.shape[0], batch_size):
            stop = min(start + batch_size, inputs.shape[0])
            res = pgd(model, inputs[start:stop], labels[start:stop], rep_cfg,
                      example_ids=np.arange(start, stop))
            correct += int((~res.success).sum())
        accs.append(correct / inputs.shape[0])
    return float(np.mean(accs))


def transfer_attack(proxy: Model, target: Model, dataset, cfg: AttackConfig,
                    batch_size: int = 256) -> float:
    """Craft on the proxy, evaluate target accuracy on the crafted examples."""
    from .models import predict_labels
    if proxy.input_shape != target.input_shape or proxy.num_classes != target.num_classes:
        raise ValueError(
            f"proxy {proxy.input_shape}->{proxy.num_classes} and target "
            f"{target.input_shape}->{target.num_classes} are incompatible")
    inputs, labels = _dataset_arrays(dataset)
    if inputs.shape[0] == 0:
        raise ValueError("transfer_attack: empty dataset")
    correct = 0
    for start in range(0, inputs.shape[0], batch_size):
        stop = min(start + batch_size, inputs.shape[0])
        if cfg.eps == 0:
            x_adv = inputs[start:stop]
        else:
            x_adv = pgd(proxy, inputs[start:stop], labels[start:stop], cfg,
                        example_ids=np.arange(start, stop)).x_adv
        correct += int((predict_labels(target, x_adv) == labels[start:stop]).sum())
    return correct / inputs.shape[0]
