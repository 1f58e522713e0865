"""Sequential feed-forward models, builders, and the checkpoint format.

Models are immutable after construction apart from the training loop,
which swaps in freshly built parameter tensors through a single writer.
Checkpoints are bit-exact (raw little-endian float64 payloads) so
transfer attacks and determinism checks reproduce across runs.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


CHECKPOINT_MAGIC = b"ARLB"
CHECKPOINT_VERSION = 1

LAYER_KINDS = ("dense", "conv5x5", "maxpool2", "relu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential network.

    ``in_size``/``out_size`` are features for dense layers and channels
    for conv5x5 layers; shape-only layers leave them at 0.
    """

    kind: str
    in_size: int = 0
    out_size: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in_size": self.in_size, "out_size": self.out_size}

    @staticmethod
    def from_dict(d: dict) -> "LayerSpec":
        return LayerSpec(d["kind"], int(d.get("in_size", 0)), int(d.get("out_size", 0)))


def _layer_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if spec.kind == "dense":
        if len(shape) != 1 or shape[0] != spec.in_size:
            raise ValueError(
                f"dense expects ({spec.in_size},), previous layer yields {shape}")
        return (spec.out_size,)
    if spec.kind == "conv5x5":
        if len(shape) != 3 or shape[2] != spec.in_size:
            raise ValueError(
                f"conv5x5 expects (H,W,{spec.in_size}), previous layer yields {shape}")
        h, w, _ = shape
        if h < 5 or w < 5:
            raise ValueError(f"conv5x5 needs at least 5x5 input, got {h}x{w}")
        return (h - 4, w - 4, spec.out_size)
    if spec.kind == "maxpool2":
        if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
            raise ValueError(f"maxpool2 needs even (H,W,C), previous layer yields {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if spec.kind == "relu":
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    raise AssertionError(spec.kind)


class Model:
    """Sequential network: ordered layer specs plus named parameter tensors."""

    def __init__(self, input_shape, layers, params: dict[str, Tensor],
                 metadata: dict | None = None):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = tuple(layers)
        self.params = dict(params)
        self.metadata = dict(metadata or {})
        shape = self.input_shape
        for spec in self.layers:
            shape = _layer_output_shape(spec, shape)
        if len(shape) != 1:
            raise ValueError(f"model must end in a logit vector, got shape {shape}")
        self.num_classes = shape[0]

    def param_names(self) -> list[str]:
        names = []
        for i, spec in enumerate(self.layers):
            if spec.kind in ("dense", "conv5x5"):
                names.append(f"layer{i}.weight")
                names.append(f"layer{i}.bias")
        return names

    def _batched(self, X) -> tuple[np.ndarray, bool]:
        arr = np.asarray(X, dtype=np.float64)
        if arr.shape == self.input_shape:
            return arr[None, ...], True
        if arr.shape[1:] == self.input_shape:
            return arr, False
        raise ValueError(
            f"input shape {arr.shape} does not match model input {self.input_shape}")

    def forward(self, X) -> Tensor:
        """Logits for a batch (or single example, promoted to a batch of 1).

        Records onto the active tape, so the same call serves training,
        attacks, and plain inference.
        """
        if isinstance(X, Tensor):
            x = X
            if x.shape == self.input_shape:
                x = ad.reshape(x, (1,) + self.input_shape)
        else:
            arr, _ = self._batched(X)
            x = Tensor(arr)
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense":
                x = ad.add(ad.matmul(x, self.params[f"layer{i}.weight"]),
                           self.params[f"layer{i}.bias"])
            elif spec.kind == "conv5x5":
                x = ad.add(ad.conv2d(x, self.params[f"layer{i}.weight"]),
                           self.params[f"layer{i}.bias"])
            elif spec.kind == "maxpool2":
                x = ad.maxpool2(x)
            elif spec.kind == "relu":
                x = ad.relu(x)
            elif spec.kind == "flatten":
                x = ad.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        return x

    def logits(self, X) -> np.ndarray:
        """Untraced forward pass; (C,) for a single example, (N, C) for a batch."""
        arr, single = self._batched(X)
        out = self.forward(arr).data
        return out[0] if single else out

    def vjp(self, X, seed: np.ndarray) -> np.ndarray:
        """Jacobian-transpose product d(logits . seed)/dX for one example."""
        arr, _ = self._batched(X)
        if arr.shape[0] != 1:
            raise ValueError("vjp operates on a single example")
        with Tape() as tape:
            xt = Tensor(arr)
            logits = self.forward(xt)
            weighted = ad.sum_all(ad.mul(logits, Tensor(np.asarray(seed).reshape(1, -1))))
        return tape.backward(weighted, wrt=[xt])[xt][0]

    def jvp(self, X, tangent: np.ndarray) -> np.ndarray:
        """Forward-mode product J @ tangent for one example; returns (C,)."""
        arr, _ = self._batched(X)
        if arr.shape[0] != 1:
            raise ValueError("jvp operates on a single example")
        a = arr
        t = np.asarray(tangent, dtype=np.float64).reshape(arr.shape)
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense":
                w = self.params[f"layer{i}.weight"].data
                b = self.params[f"layer{i}.bias"].data
                a, t = a @ w + b, t @ w
            elif spec.kind == "conv5x5":
                w = self.params[f"layer{i}.weight"].data
                b = self.params[f"layer{i}.bias"].data
                a = ad._conv2d_data(a, w)[0] + b
                t = ad._conv2d_data(t, w)[0]
            elif spec.kind == "relu":
                t = t * (a > 0.0)
                a = np.maximum(a, 0.0)
            elif spec.kind == "maxpool2":
                a, idx = ad._maxpool2_data(a)
                n, h, w_, c = t.shape
                flat = t.reshape(n, h // 2, 2, w_ // 2, 2, c).transpose(
                    0, 1, 3, 2, 4, 5).reshape(n, h // 2, w_ // 2, 4, c)
                t = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            elif spec.kind == "flatten":
                a = a.reshape(1, -1)
                t = t.reshape(1, -1)
        return t[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict(model: Model, X):
    """(label, probabilities); ties break to the lowest class index."""
    arr, single = model._batched(X)
    probs = softmax(model.forward(arr).data)
    labels = probs.argmax(axis=-1)
    if single:
        return int(labels[0]), probs[0]
    return labels, probs


def predict_labels(model: Model, X, batch_size: int = 512) -> np.ndarray:
    """Argmax labels over a (possibly large) batch, evaluated in chunks."""
    arr, single = model._batched(X)
    out = np.empty(arr.shape[0], dtype=np.int64)
    for start in range(0, arr.shape[0], batch_size):
        stop = start + batch_size
        out[start:stop] = model.forward(arr[start:stop]).data.argmax(axis=-1)
    return out[:1] if single else out


def _init_params(layers, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            bound = 1.0 / np.sqrt(spec.in_size)
            params[f"layer{i}.weight"] = Tensor(
                rng.uniform(-bound, bound, (spec.in_size, spec.out_size)))
            params[f"layer{i}.bias"] = Tensor(rng.uniform(-bound, bound, spec.out_size))
        elif spec.kind == "conv5x5":
            fan_in = 25 * spec.in_size
            bound = 1.0 / np.sqrt(fan_in)
            params[f"layer{i}.weight"] = Tensor(
                rng.uniform(-bound, bound, (5, 5, spec.in_size, spec.out_size)))
            params[f"layer{i}.bias"] = Tensor(rng.uniform(-bound, bound, spec.out_size))
    return params


def build_mnist_cnn(seed: int = 0, metadata: dict | None = None) -> Model:
    """Four-layer CNN for 28x28x1 inputs.

    conv(1->10) -> relu -> pool -> conv(10->20) -> relu -> pool ->
    flatten(320) -> dense(320->50) -> relu -> dense(50->10).
    Fan-in-scaled uniform init, seeded.
    """
    layers = [
        LayerSpec("conv5x5", 1, 10),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("conv5x5", 10, 20),
        LayerSpec("relu"),
        LayerSpec("maxpool2"),
        LayerSpec("flatten"),
        LayerSpec("dense", 320, 50),
        LayerSpec("relu"),
        LayerSpec("dense", 50, 10),
    ]
    meta = {"init": "uniform_fan_in", "seed": seed}
    meta.update(metadata or {})
    return Model((28, 28, 1), layers, _init_params(layers, seed), meta)


def build_mlp(layer_sizes, seed: int = 0, metadata: dict | None = None) -> Model:
    """Dense+ReLU stack with a linear final layer; sizes = [in, ..., out]."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"build_mlp needs at least [in, out] sizes, got {sizes}")
    layers: list[LayerSpec] = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers.append(LayerSpec("dense", a, b))
        layers.append(LayerSpec("relu"))
    layers.pop()  # last layer stays linear
    meta = {"init": "uniform_fan_in", "seed": seed}
    meta.update(metadata or {})
    return Model((sizes[0],), layers, _init_params(layers, seed), meta)


def parameter_count(model: Model) -> int:
    return sum(t.size for t in model.params.values())


# ---------------------------------------------------------------------------
# checkpoint io
#
# Layout (all integers little-endian uint32):
#   magic "ARLB" | version | header_len | header JSON (architecture+metadata)
#   | tensor_count | per tensor: name_len, name, rank, dims..., float64 payload


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(
            f"checkpoint truncated: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(f) -> int:
    return int.from_bytes(_read_exact(f, 4), "little")


def save_checkpoint(model: Model, path) -> None:
    header = json.dumps({
        "input_shape": list(model.input_shape),
        "layers": [spec.to_dict() for spec in model.layers],
        "metadata": model.metadata,
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
    buf.write(len(header).to_bytes(4, "little"))
    buf.write(header)
    names = model.param_names()
    buf.write(len(names).to_bytes(4, "little"))
    for name in names:
        tensor = model.params[name]
        encoded = name.encode("utf-8")
        buf.write(len(encoded).to_bytes(4, "little"))
        buf.write(encoded)
        buf.write(len(tensor.shape).to_bytes(4, "little"))
        for dim in tensor.shape:
            buf.write(int(dim).to_bytes(4, "little"))
        buf.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version = _read_u32(f)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
        header = json.loads(_read_exact(f, _read_u32(f)).decode("utf-8"))
        params: dict[str, Tensor] = {}
        for _ in range(_read_u32(f)):
            name = _read_exact(f, _read_u32(f)).decode("utf-8")
            rank = _read_u32(f)
            dims = tuple(_read_u32(f) for _ in range(rank))
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(f, 8 * count)
            params[name] = Tensor(np.frombuffer(payload, dtype="<f8").reshape(dims))
    layers = [LayerSpec.from_dict(d) for d in header["layers"]]
    model = Model(header["input_shape"], layers, params, header["metadata"])
    missing = [n for n in model.param_names() if n not in params]
    if missing:
        raise TruncatedCheckpointError(f"checkpoint missing parameters: {missing}")
    return model
