"""Shared test utilities: the finite-difference oracle and small random
model generators.  The oracle is plain numpy on untraced forwards, so
it stays independent of the tape it is checking."""

import numpy as np

from arlab.models import LayerSpec, Model, _init_params


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        hi = x.copy()
        lo = x.copy()
        hi[idx] += h
        lo[idx] -= h
        grad[idx] = (f(hi) - f(lo)) / (2 * h)
    return grad


def max_relative_error(measured: np.ndarray, reference: np.ndarray,
                       floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(reference), floor)
    return float((np.abs(measured - reference) / denom).max())


def random_mlp(rng: np.random.Generator) -> Model:
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append(LayerSpec("dense", a, b))
        layers.append(LayerSpec("relu"))
    layers.pop()
    return Model((sizes[0],), layers, _init_params(layers, int(rng.integers(0, 2 ** 31))))


def random_small_cnn(rng: np.random.Generator) -> Model:
    channels = int(rng.integers(1, 3))
    filters = int(rng.integers(1, 4))
    classes = int(rng.integers(2, 5))
    layers = [
        LayerSpec("conv5x5", channels, filters),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("flatten"),
        LayerSpec("dense", 2 * 2 * filters, classes),
    ]
    return Model((8, 8, channels), layers,
                 _init_params(layers, int(rng.integers(0, 2 ** 31))))
