"""Analysis toolkit: decision margins, Jacobian spectral norms,
normalized margins, local-linearity Q, loss/margin surface grids,
robustness curves, correlation statistics, and the linear-model
robustness certificate.

Everything here is read-only on the model.  Quantities that are
mathematically undefined (vanishing spectral norm, zero variance)
come back as NaN rather than raising.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, cw_objective, min_distortion_l2, pgd, robust_accuracy
from .losses import cross_entropy, one_hot
from .models import Model, softmax


@dataclass
class DiagnosticsRecord:
    """Per-example bundle of the margin/Jacobian quantities."""

    example_id: int
    margin: float
    jacobian_norm: float
    normalized_margin: float
    q_nonlinearity: float
    min_distortion: float
    censored: bool = False


def decision_margin(model: Model, X, y) -> float | np.ndarray:
    """Correct-class logit minus the best other logit; positive iff
    strictly correctly classified."""
    logits = model.logits(X)
    single = logits.ndim == 1
    Z = logits[None, :] if single else logits
    yv = np.atleast_1d(np.asarray(y, dtype=int))
    rows = np.arange(Z.shape[0])
    masked = Z.copy()
    masked[rows, yv] = -np.inf
    margin = Z[rows, yv] - masked.max(axis=1)
    return float(margin[0]) if single else margin


def exact_jacobian(model: Model, X) -> np.ndarray:
    """Full (C, d) input Jacobian via one backward pass per class."""
    d = int(np.prod(model.input_shape))
    rows = []
    for c in range(model.num_classes):
        seed = np.zeros(model.num_classes)
        seed[c] = 1.0
        rows.append(model.vjp(X, seed).reshape(d))
    return np.stack(rows)


def jacobian_spectral_norm(model: Model, X, mode: str = "auto",
                           max_iter: int = 500, tol: float = 1e-6,
                           seed: int = 0, return_info: bool = False):
    """Largest singular value of the input Jacobian at X.

    ``exact`` builds the full Jacobian (C backward passes) and takes an
    SVD; ``power_iteration`` runs matrix-free iterations on J^T J via
    jvp/vjp products.  ``auto`` picks exact for C <= 16 and d <= 4096.
    The power estimate approaches the true value from below; if the
    relative change has not dropped under ``tol`` a warning is issued
    and the best estimate returned.
    """
    d = int(np.prod(model.input_shape))
    if mode == "auto":
        mode = "exact" if (model.num_classes <= 16 and d <= 4096) else "power_iteration"
    if mode == "exact":
        value = float(np.linalg.svd(exact_jacobian(model, X), compute_uv=False)[0])
        return (value, {"mode": "exact", "converged": True}) if return_info else value
    if mode != "power_iteration":
        raise ValueError(f"mode must be exact|power_iteration|auto, got {mode!r}")

    rng = np.random.default_rng(seed)
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    sigma = 0.0
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        w = model.jvp(X, v.reshape(model.input_shape))      # J v
        z = model.vjp(X, w).reshape(d)                      # J^T J v
        new_sigma = float(np.linalg.norm(w))
        zn = np.linalg.norm(z)
        if zn == 0.0:
            sigma = 0.0
            converged = True
            break
        v = z / zn
        if iterations > 1 and abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-300):
            sigma = new_sigma
            converged = True
            break
        sigma = new_sigma
    if not converged:
        warnings.warn(
            f"power iteration did not converge in {max_iter} iterations "
            f"(last estimate {sigma:.6g})", RuntimeWarning)
    if return_info:
        return sigma, {"mode": "power_iteration", "converged": converged,
                       "iterations": iterations}
    return sigma


def normalized_margin(model: Model, X, y, mode: str = "auto") -> float:
    """Decision margin divided by the Jacobian spectral norm; NaN when
    the spectral norm vanishes."""
    sigma = jacobian_spectral_norm(model, X, mode=mode)
    if sigma <= 1e-12:
        return float("nan")
    return float(decision_margin(model, X, y)) / sigma


def q_nonlinearity(model: Model, X, X_prime) -> float:
    """Relative deviation of f from its first-order expansion between X
    and X_prime: ||f(X')-f(X)-J(X'-X)|| / ||J(X'-X)||.  Zero for linear
    models; NaN when the linear term vanishes."""
    x = np.asarray(X, dtype=np.float64)
    xp = np.asarray(X_prime, dtype=np.float64)
    fx = model.logits(x)
    fxp = model.logits(xp)
    jac = exact_jacobian(model, x)
    linear = jac @ (xp - x).reshape(-1)
    denom = float(np.linalg.norm(linear))
    if denom <= 1e-12:
        return float("nan")
    return float(np.linalg.norm(fxp - fx - linear)) / denom


# ---------------------------------------------------------------------------
# surface grids


@dataclass
class SurfaceGrid:
    """Loss or margin values over X + e1*d1 + e2*d2.

    d1 is the CE gradient-sign direction at the center, d2 a random
    sign vector with unit Linf norm.
    """

    center: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    eps1: np.ndarray
    eps2: np.ndarray
    values: np.ndarray
    quantity: str

    def rows(self):
        for i, e1 in enumerate(self.eps1):
            for j, e2 in enumerate(self.eps2):
                yield float(e1), float(e2), float(self.values[i, j])


def surface_grid(model: Model, X, y, span: float = 0.04, resolution: int = 21,
                 quantity: str = "loss", seed: int = 0) -> SurfaceGrid:
    """Evaluate CE loss or decision margin over the two-direction grid
    eps1, eps2 in [-span, span]."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    if quantity not in ("loss", "margin"):
        raise ValueError(f"quantity must be 'loss' or 'margin', got {quantity!r}")
    x = np.asarray(X, dtype=np.float64).reshape(model.input_shape)
    yv = int(np.asarray(y))

    from .attacks import input_gradient
    grad = input_gradient(model, x, "ce", yv)
    d1 = np.sign(grad)
    rng = np.random.default_rng(seed)
    d2 = rng.choice([-1.0, 1.0], size=model.input_shape)

    eps = np.linspace(-span, span, resolution)
    grid_pts = np.empty((resolution, resolution) + x.shape)
    for i, e1 in enumerate(eps):
        for j, e2 in enumerate(eps):
            grid_pts[i, j] = x + e1 * d1 + e2 * d2
    flat = grid_pts.reshape(resolution * resolution, *x.shape)

    logits = np.concatenate([model.forward(flat[k:k + 512]).data
                             for k in range(0, flat.shape[0], 512)])
    if quantity == "loss":
        target = one_hot(np.full(flat.shape[0], yv), model.num_classes)
        vals = cross_entropy(softmax(logits), target)
    else:
        rows = np.arange(logits.shape[0])
        masked = logits.copy()
        masked[rows, yv] = -np.inf
        vals = logits[rows, yv] - masked.max(axis=1)
    return SurfaceGrid(center=x, d1=d1, d2=d2, eps1=eps, eps2=eps,
                       values=vals.reshape(resolution, resolution), quantity=quantity)


# ---------------------------------------------------------------------------
# robustness curves


@dataclass
class Curve:
    xs: list[float]
    accuracies: list[float]
    xlabel: str
    converged: bool | None = None


def accuracy_eps_curve(model: Model, dataset, eps_grid, restarts: int = 5,
                       seed: int = 0) -> Curve:
    """Robust accuracy at each eps under the coupled protocol: k =
    round(255*eps) PGD steps with step size 2/255; eps=0 is clean."""
    eps_grid = [float(e) for e in eps_grid]
    if not eps_grid:
        raise ValueError("eps_grid must be nonempty")
    accs = []
    for eps in eps_grid:
        if eps == 0.0:
            from .attacks import clean_accuracy
            accs.append(clean_accuracy(model, dataset))
            continue
        k = max(1, round(eps * 255))
        cfg = AttackConfig(norm="linf", eps=eps, step_size=2 / 255, steps=k,
                           restarts=restarts, seed=seed)
        accs.append(robust_accuracy(model, dataset, cfg))
    return Curve(xs=eps_grid, accuracies=accs, xlabel="eps")


def steps_curve_step_size(eps: float, k: int) -> float:
    """Step size for the fixed-budget step sweep: max(1/510, 2*eps/k)."""
    return max(1 / 510, 2 * eps / k)


def accuracy_steps_curve(model: Model, dataset, eps: float, k_grid,
                         restarts: int = 5, seed: int = 0,
                         convergence_tol: float = 0.003) -> Curve:
    """Robust accuracy per step count at fixed eps; step size
    max(1/510, 2*eps/k).  Converged when consecutive grid points differ
    by less than 0.3%."""
    k_grid = [int(k) for k in k_grid]
    if not k_grid:
        raise ValueError("k_grid must be nonempty")
    accs = []
    for k in k_grid:
        cfg = AttackConfig(norm="linf", eps=eps, step_size=steps_curve_step_size(eps, k),
                           steps=k, restarts=restarts, seed=seed)
        accs.append(robust_accuracy(model, dataset, cfg))
    converged = (len(accs) >= 2 and abs(accs[-1] - accs[-2]) < convergence_tol)
    return Curve(xs=[float(k) for k in k_grid], accuracies=accs, xlabel="steps",
                 converged=converged)


# ---------------------------------------------------------------------------
# statistics over records


def margin_distortion_correlation(records) -> float:
    """Pearson correlation between normalized margin and minimal L2
    distortion; censored records are excluded.  NaN when fewer than two
    usable records or when either variable has zero variance."""
    pairs = [(r.normalized_margin, r.min_distortion) for r in records
             if not r.censored and math.isfinite(r.normalized_margin)
             and math.isfinite(r.min_distortion)]
    if len(pairs) < 2:
        return float("nan")
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def quantile_split(records, key=None, percentile: float = 50.0):
    """Rank-based partition: the lowest ``percentile`` percent of records
    by key go to ``low``, the rest to ``high``.  Percentile 0 puts all
    records in high, 100 puts all in low."""
    records = list(records)
    if not records:
        raise ValueError("quantile_split: no records")
    if key is None:
        key = lambda r: r.q_nonlinearity
    elif isinstance(key, str):
        attr = key
        key = lambda r: getattr(r, attr)
    ranked = sorted(records, key=key)
    cut = int(math.floor(len(ranked) * percentile / 100.0))
    low, high = ranked[:cut], ranked[cut:]
    return high, low


# ---------------------------------------------------------------------------
# linear-model certificate


def is_linear(model: Model) -> bool:
    return all(spec.kind in ("dense", "flatten") for spec in model.layers)


def global_lipschitz_linear(model: Model) -> float:
    """Exact Lipschitz constant of a purely affine model: the spectral
    norm of its (constant) Jacobian."""
    if not is_linear(model):
        raise ValueError("exact Lipschitz constant requires a linear model")
    X = np.zeros(model.input_shape)
    return float(np.linalg.svd(exact_jacobian(model, X), compute_uv=False)[0])


def lipschitz_certificate(model: Model, X, y, delta_norm: float) -> bool:
    """True iff margin >= sqrt(2) * delta_norm * l_f for a linear model:
    no L2 perturbation of norm <= delta_norm can flip the prediction.

    Rejects non-linear models; the bound is only sound with a true
    global Lipschitz constant.
    """
    if not is_linear(model):
        raise ValueError("certificate is only sound for linear models")
    if delta_norm < 0:
        raise ValueError(f"delta_norm must be >= 0, got {delta_norm}")
    margin = float(decision_margin(model, X, y))
    lf = global_lipschitz_linear(model)
    return margin >= math.sqrt(2.0) * delta_norm * lf


# ---------------------------------------------------------------------------
# batch diagnostics + CSV


def compute_diagnostics(model: Model, dataset, attack: AttackConfig,
                        sample_count: int = 500, mode: str = "auto",
                        with_min_distortion: bool = True,
                        seed: int = 0) -> list[DiagnosticsRecord]:
    """Per-example records over the first ``sample_count`` examples.

    Q uses adversarial endpoints from the supplied evaluation attack;
    minimal distortions come from the L2 bisection search.
    """
    inputs = dataset.inputs[:sample_count]
    labels = dataset.labels[:sample_count]
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("compute_diagnostics: empty dataset")

    adv = pgd(model, inputs, labels, attack, example_ids=np.arange(n))
    if with_min_distortion:
        md = min_distortion_l2(model, inputs, labels, seed=seed,
                               example_ids=np.arange(n))
        dists = md.distortion
        censored = md.info["censored"]
    else:
        dists = np.full(n, np.nan)
        censored = np.zeros(n, dtype=bool)

    records = []
    for i in range(n):
        sigma = jacobian_spectral_norm(model, inputs[i], mode=mode)
        margin = float(decision_margin(model, inputs[i], int(labels[i])))
        records.append(DiagnosticsRecord(
            example_id=i,
            margin=margin,
            jacobian_norm=sigma,
            normalized_margin=margin / sigma if sigma > 1e-12 else float("nan"),
            q_nonlinearity=q_nonlinearity(model, inputs[i], adv.x_adv[i]),
            min_distortion=float(dists[i]),
            censored=bool(censored[i])))
    return records


DIAGNOSTICS_COLUMNS = ["example_id", "margin", "jacobian_norm",
                       "normalized_margin", "q_nonlinearity",
                       "min_distortion", "censored"]


def write_diagnostics_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DIAGNOSTICS_COLUMNS)
        for r in records:
            writer.writerow([r.example_id, repr(r.margin), repr(r.jacobian_norm),
                             repr(r.normalized_margin), repr(r.q_nonlinearity),
                             repr(r.min_distortion), int(r.censored)])


def write_surface_csv(grid: SurfaceGrid, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["eps1", "eps2", grid.quantity])
        for e1, e2, v in grid.rows():
            writer.writerow([repr(e1), repr(e2), repr(v)])


def write_curve_csv(curve: Curve, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([curve.xlabel, "accuracy"])
        for x, a in zip(curve.xs, curve.accuracies):
            writer.writerow([repr(x), repr(a)])


def summarize(records) -> dict:
    """Mean of each diagnostic over non-censored records, plus counts."""
    usable = [r for r in records if not r.censored]
    def mean(vals):
        vals = [v for v in vals if math.isfinite(v)]
        return float(np.mean(vals)) if vals else float("nan")
    return {
        "count": len(records),
        "censored": sum(1 for r in records if r.censored),
        "mean_margin": mean(r.margin for r in records),
        "mean_jacobian_norm": mean(r.jacobian_norm for r in records),
        "mean_normalized_margin": mean(r.normalized_margin for r in records),
        "mean_q": mean(r.q_nonlinearity for r in records),
        "mean_min_distortion": mean(r.min_distortion for r in usable),
        "margin_distortion_correlation": margin_distortion_correlation(records),
    }
