"""Training loop: SGD with momentum, the step schedule, and every
objective variant (Normal, EntM, LS, PAT, PAT-EntM, PAT-LS, TRADES,
TRADES-EntM).

Adversarial variants generate their inner examples with the attacks
module, so the feasibility invariants of that module hold for every
training-time adversarial example as well.  Runs are bitwise
reproducible: batching, init, and inner-attack noise all derive from
the config seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from .attacks import AttackConfig, _pgd_core, kl_objective, make_objective
from .autodiff import Tape, Tensor
from .models import Model, build_mlp, build_mnist_cnn
from .losses import LossValue

METHODS = ("normal", "entm", "ls", "pat", "pat_entm", "pat_ls",
           "trades", "trades_entm")

# MNIST-sized inner adversary: eps=48/255, step 6/255, 10 steps.
MNIST_INNER = AttackConfig(norm="linf", eps=48 / 255, step_size=6 / 255,
                           steps=10, restarts=1, init_noise_std=0.005)


@dataclass
class TrainConfig:
    """Method selection plus optimizer/schedule hyperparameters.

    Defaults follow the small-model recipe: SGD momentum 0.9, weight
    decay 1e-4, initial lr 0.01 decaying by 0.1 at epoch 20, batch 128;
    lam=2 for entropy regularization, alpha=0.5 PAT mixing, beta=3 for
    TRADES.  Desk-scale epochs default to 5 (the full 40-epoch schedule
    is reachable through config).
    """

    method: str = "normal"
    lam: float = 2.0
    gamma: float = 0.0
    alpha: float = 0.5
    beta: float = 3.0
    inner: AttackConfig | None = None
    inner_objective: str = "train"  # "train" (method loss) or "ce" ablation
    epochs: int = 5
    batch_size: int = 128
    lr: float = 0.01
    lr_decay: float = 0.1
    decay_epochs: tuple = (20,)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; known: {METHODS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0,1], got {self.gamma}")
        if self.inner_objective not in ("train", "ce"):
            raise ValueError(f"inner_objective must be 'train' or 'ce'")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)

    def to_json(self) -> str:
        d = asdict(self)
        d["inner"] = self.inner.to_dict() if self.inner is not None else None
        d["decay_epochs"] = list(self.decay_epochs)
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str | dict) -> "TrainConfig":
        d = dict(text) if isinstance(text, dict) else json.loads(text)
        if d.get("inner") is not None:
            d["inner"] = AttackConfig.from_dict(d["inner"])
        if "decay_epochs" in d:
            d["decay_epochs"] = tuple(d["decay_epochs"])
        return TrainConfig(**d)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    components: dict[str, float]
    clean_accuracy: float
    robust_accuracy: float | None = None


@dataclass
class TrainReport:
    method: str
    epochs: list[EpochStats] = field(default_factory=list)
    checkpoint_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "checkpoint_path": self.checkpoint_path,
            "epochs": [asdict(e) for e in self.epochs],
        }


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """initial * decay^(number of decay epochs <= epoch)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    hits = sum(1 for e in cfg.decay_epochs if e <= epoch)
    return cfg.lr * cfg.lr_decay ** hits


class SGD:
    """SGD with momentum; weight decay is added to the raw gradient.

    v <- momentum*v + g + wd*theta;  theta <- theta - lr*v
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float) -> None:
        for name in sorted(params):
            theta = params[name]
            g = grads[name]
            if g.shape != theta.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} shape {theta.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(theta.data)
            v = self.momentum * v + g + self.weight_decay * theta.data
            self.velocity[name] = v
            params[name] = Tensor(theta.data - lr * v)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float,
             state: SGD | None = None, momentum: float = 0.9,
             weight_decay: float = 1e-4) -> SGD:
    """Single optimizer step; returns the (possibly fresh) momentum state."""
    if state is None:
        state = SGD(momentum, weight_decay)
    state.step(params, grads, lr)
    return state


def _clean_loss(method: str, model: Model, X, y, cfg: TrainConfig) -> LossValue:
    base = method.removeprefix("pat_").removeprefix("trades_")
    if method in ("normal", "pat", "trades"):
        return L.normal_loss(model, X, y)
    if base == "entm":
        return L.entm_loss(model, X, y, cfg.lam)
    if base == "ls":
        return L.ls_loss(model, X, y, cfg.gamma)
    raise AssertionError(method)


def _inner_objective(method: str, model: Model, X, cfg: TrainConfig):
    """Attack objective for the inner maximization of the PAT family."""
    if cfg.inner_objective == "ce" or method == "pat":
        return make_objective("ce")
    if method == "pat_entm":
        lam = cfg.lam

        def obj(m, xt, y):
            targets = L.one_hot(y, m.num_classes)
            logp = ad.log_softmax(m.forward(xt))
            ce = (logp * Tensor(targets)).sum() * -1.0
            ent = (logp.exp() * logp).sum() * -1.0
            return ce - lam * ent
        return obj
    if method == "pat_ls":
        return make_objective("smoothed_ce", cfg.gamma)
    raise AssertionError(method)


def _default_model(dataset, seed: int, metadata: dict) -> Model:
    shape = tuple(dataset.inputs.shape[1:])
    if shape == (28, 28, 1):
        return build_mnist_cnn(seed=seed, metadata=metadata)
    if len(shape) == 1:
        return build_mlp([shape[0], 100, dataset.num_classes], seed=seed,
                         metadata=metadata)
    raise ValueError(f"no default architecture for input shape {shape}")


def _batch_objective(method: str, model: Model, xb, yb, cfg: TrainConfig,
                     inner: AttackConfig, seed_tuple) -> LossValue:
    if method in ("normal", "entm", "ls"):
        return _clean_loss(method, model, xb, yb, cfg)

    if method in ("pat", "pat_entm", "pat_ls"):
        atk = replace(inner, seed=seed_tuple)
        res = _pgd_core(model, xb, yb, atk.eps, atk.step_size, atk.steps,
                        atk.restarts, atk.norm, atk.init_noise_std, atk.seed,
                        np.arange(xb.shape[0]),
                        _inner_objective(method, model, xb, cfg),
                        "ce", 0.0)
        clean = _clean_loss(method, model, xb, yb, cfg)
        adv = _clean_loss(method, model, res.x_adv, yb, cfg)
        total = cfg.alpha * clean.total + (1.0 - cfg.alpha) * adv.total
        comps = {f"clean_{k}": v for k, v in clean.components.items()}
        comps.update({f"adv_{k}": v for k, v in adv.components.items()})
        return LossValue(total, comps)

    if method in ("trades", "trades_entm"):
        shifted = model.forward(xb).data
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        ref_logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        atk = replace(inner, seed=seed_tuple)
        res = _pgd_core(model, xb, yb, atk.eps, atk.step_size, atk.steps,
                        atk.restarts, atk.norm, atk.init_noise_std, atk.seed,
                        np.arange(xb.shape[0]), kl_objective(ref_logp), "ce", 0.0)
        if method == "trades":
            return L.trades_loss(model, xb, res.x_adv, yb, cfg.beta)
        # trades_entm: the clean CE term is replaced by the entropy-regularized loss
        targets = L.one_hot(yb, model.num_classes)
        logp_clean = ad.log_softmax(model.forward(xb))
        logp_adv = ad.log_softmax(model.forward(res.x_adv))
        ce = L._mean_ce(logp_clean, targets)
        ent = L._mean_entropy(logp_clean)
        kl = L._mean_kl(logp_adv, logp_clean)
        total = ce - cfg.lam * ent + cfg.beta * kl
        return LossValue(total, {"ce": ce.data.item(), "entropy": ent.data.item(),
                                 "kl": kl.data.item()})

    raise ValueError(f"unknown method {method!r}")


def train(method: str, dataset, cfg: TrainConfig, model: Model | None = None,
          eval_dataset=None, robust_probe: AttackConfig | None = None,
          log=None):
    """Train a model with the selected objective.

    Returns (model, TrainReport).  ``dataset`` supplies ``inputs`` and
    ``labels``; per-epoch clean accuracy is measured on
    ``eval_dataset`` when given, else on the training data.
    """
    from .attacks import clean_accuracy, robust_accuracy

    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; known: {METHODS}")
    if dataset.inputs.shape[0] == 0:
        raise ValueError("train: empty dataset")
    cfg = replace(cfg, method=method)

    metadata = {"method": method, "lam": cfg.lam, "gamma": cfg.gamma,
                "alpha": cfg.alpha, "beta": cfg.beta, "seed": cfg.seed}
    if model is None:
        model = _default_model(dataset, cfg.seed, metadata)
    else:
        model.metadata.update(metadata)
    inner = cfg.inner if cfg.inner is not None else MNIST_INNER

    opt = SGD(cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(method=method)
    n = dataset.inputs.shape[0]
    eval_data = eval_dataset if eval_dataset is not None else dataset

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(n)
        losses: list[float] = []
        comp_sums: dict[str, float] = {}
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = dataset.inputs[idx]
            yb = dataset.labels[idx]
            batch_seed = cfg.seed * 1000003 + epoch * 1009 + bi
            with Tape() as tape:
                loss = _batch_objective(method, model, xb, yb, cfg, inner, batch_seed)
            names = model.param_names()
            grads = tape.backward(loss.total, wrt=[model.params[n] for n in names])
            named = {name: grads[model.params[name]] for name in names}
            opt.step(model.params, named, lr)
            losses.append(loss.value)
            for k, v in loss.components.items():
                comp_sums[k] = comp_sums.get(k, 0.0) + v
        nb = len(losses)
        stats = EpochStats(
            epoch=epoch, lr=lr, loss=float(np.mean(losses)),
            components={k: v / nb for k, v in comp_sums.items()},
            clean_accuracy=clean_accuracy(model, eval_data),
            robust_accuracy=(robust_accuracy(model, eval_data, robust_probe)
                             if robust_probe is not None else None))
        report.epochs.append(stats)
        if log is not None:
            log(f"epoch {epoch}: lr={lr:g} loss={stats.loss:.4f} "
                f"clean={stats.clean_accuracy:.4f}")
    return model, report


def mean_confidence(model: Model, dataset, batch_size: int = 512) -> float:
    """Mean max softmax probability on clean inputs; the confidence that
    entropy-style regularizers push down."""
    from .models import softmax
    total, count = 0.0, 0
    X = dataset.inputs
    for start in range(0, X.shape[0], batch_size):
        probs = softmax(model.forward(X[start:start + batch_size]).data)
        total += float(probs.max(axis=-1).sum())
        count += probs.shape[0]
    return total / count


def mean_output_entropy(model: Model, dataset, batch_size: int = 512) -> float:
    from .models import softmax
    total, count = 0.0, 0
    X = dataset.inputs
    for start in range(0, X.shape[0], batch_size):
        probs = softmax(model.forward(X[start:start + batch_size]).data)
        total += float(np.sum(L.entropy(probs)))
        count += probs.shape[0]
    return total / count
