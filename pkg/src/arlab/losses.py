"""Loss functions and uncertainty-promoting regularizers.

Two layers of API: plain numpy functions on probability vectors
(`cross_entropy`, `entropy`, `kl_div`) used by diagnostics and tests,
and traced loss builders (`normal_loss`, `entm_loss`, `ls_loss`,
`trades_loss`) whose `.total` is a tape node ready for backward.

Natural logarithms throughout, so the label-smoothing and
entropy-penalty decompositions into KL terms hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Model

# Floor applied inside log on probability inputs; avoids -inf on
# saturated vectors without perturbing unsaturated ones.
PROB_FLOOR = 1e-300


def _check_prob_pair(p, y) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probability vectors differ in shape: {p.shape} vs {y.shape}")
    return p, y


def cross_entropy(p, y) -> float | np.ndarray:
    """CE(y, p) = -sum_i y_i log p_i along the last axis."""
    p, y = _check_prob_pair(p, y)
    ce = -(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    return float(ce) if ce.ndim == 0 else ce


def entropy(p) -> float | np.ndarray:
    """Shannon entropy with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    h = -terms.sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def kl_div(p, q) -> float | np.ndarray:
    """D_KL(p || q) with 0 log 0 = 0 on the p side."""
    p, q = _check_prob_pair(p, q)
    terms = np.where(
        p > 0.0,
        p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(q, PROB_FLOOR))),
        0.0)
    kl = terms.sum(axis=-1)
    return float(kl) if kl.ndim == 0 else kl


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    eye = np.zeros((labels.shape[0], num_classes))
    eye[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return eye


def smooth_labels(y, gamma: float) -> np.ndarray:
    """y_smooth = y - gamma (y - u_C): mass gamma/C off-class, 1-gamma+gamma/C on-class."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"smoothing gamma must be in [0,1], got {gamma}")
    y = np.asarray(y, dtype=np.float64)
    c = y.shape[-1]
    return (1.0 - gamma) * y + gamma / c


@dataclass
class LossValue:
    """Scalar training objective plus its named components.

    ``total`` is a (possibly traced) scalar tensor; components are plain
    floats for reporting and always recombine to the total.
    """

    total: Tensor
    components: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.data.item()


def _as_targets(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim <= 1 and np.issubdtype(y.dtype, np.integer):
        return one_hot(y, num_classes)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[-1] != num_classes:
        raise ValueError(f"targets have {y.shape[-1]} classes, model has {num_classes}")
    return y


def _mean_ce(logp: Tensor, targets: np.ndarray) -> Tensor:
    n = targets.shape[0]
    return (logp * Tensor(targets)).sum() * (-1.0 / n)


def _mean_entropy(logp: Tensor) -> Tensor:
    n = logp.shape[0]
    p = logp.exp()
    return (p * logp).sum() * (-1.0 / n)


def _mean_kl(logp_p: Tensor, logp_q: Tensor) -> Tensor:
    n = logp_p.shape[0]
    return (logp_p.exp() * (logp_p - logp_q)).sum() * (1.0 / n)


def normal_loss(model: Model, X, y) -> LossValue:
    """Mean cross entropy on clean inputs."""
    targets = _as_targets(y, model.num_classes)
    logp = ad.log_softmax(model.forward(X))
    ce = _mean_ce(logp, targets)
    return LossValue(ce, {"ce": ce.data.item()})


def entm_loss(model: Model, X, y, lam: float) -> LossValue:
    """Cross entropy minus lam times the output entropy.

    The entropy term penalizes over-confident predictions; lam = 0
    recovers the plain cross entropy.
    """
    if lam < 0:
        raise ValueError(f"entropy weight lam must be >= 0, got {lam}")
    targets = _as_targets(y, model.num_classes)
    logp = ad.log_softmax(model.forward(X))
    ce = _mean_ce(logp, targets)
    ent = _mean_entropy(logp)
    total = ce - lam * ent
    return LossValue(total, {"ce": ce.data.item(), "entropy": ent.data.item()})


def ls_loss(model: Model, X, y, gamma: float) -> LossValue:
    """Cross entropy against smoothed labels."""
    targets = smooth_labels(_as_targets(y, model.num_classes), gamma)
    logp = ad.log_softmax(model.forward(X))
    sce = _mean_ce(logp, targets)
    return LossValue(sce, {"smoothed_ce": sce.data.item()})


def trades_loss(model: Model, X, X_adv, y, beta: float) -> LossValue:
    """Clean cross entropy plus beta * KL(p(X_adv) || p(X))."""
    if beta < 0:
        raise ValueError(f"trades weight beta must be >= 0, got {beta}")
    targets = _as_targets(y, model.num_classes)
    logp_clean = ad.log_softmax(model.forward(X))
    logp_adv = ad.log_softmax(model.forward(X_adv))
    ce = _mean_ce(logp_clean, targets)
    kl = _mean_kl(logp_adv, logp_clean)
    total = ce + beta * kl
    return LossValue(total, {"ce": ce.data.item(), "kl": kl.data.item()})


def match_gamma_to_reference(reference_model: Model, X, batch_size: int = 512) -> float:
    """Smoothing strength whose target mass off the true class equals the
    reference model's mean non-maximal probability mass.

    A heuristic stand-in for tuning label smoothing against an
    entropy-regularized reference; it matches first moments only.
    """
    from .models import softmax

    X = np.asarray(X, dtype=np.float64)
    masses = []
    for start in range(0, X.shape[0], batch_size):
        probs = softmax(reference_model.forward(X[start:start + batch_size]).data)
        masses.append(1.0 - probs.max(axis=-1))
    mean_mass = float(np.concatenate(masses).mean())
    c = reference_model.num_classes
    return float(np.clip(mean_mass * c / (c - 1), 0.0, 1.0))
