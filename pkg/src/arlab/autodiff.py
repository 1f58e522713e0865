"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs in 64-bit precision so finite-difference oracles and the
loss-decomposition identity tests have numerical headroom.  Only the
primitives needed by small feed-forward classifiers are provided: dense
and convolutional layers, max pooling, ReLU, and the pointwise pieces
used to assemble cross-entropy style losses.

Tracing is explicit: primitives record onto the innermost active
``Tape`` (a ``with Tape() as tape:`` block) and are plain numpy
computations otherwise.  A tape belongs to the pass that created it;
tensors are immutable values once constructed.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input shapes do not compose for the requested primitive."""


_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tape_stack", None)
    if stack is None:
        stack = _LOCAL.tape_stack = []
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape currently tracing on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of float64 values.

    ``data`` is the row-major numpy array; ``shape`` mirrors
    ``data.shape``.  Tensors never alias gradients or graph state; all
    bookkeeping lives on the tape.
    """

    __slots__ = ("data",)

    def __init__(self, values):
        self.data = np.ascontiguousarray(values, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    # Operator sugar; python scalars are lifted to constant tensors.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so inputs always precede
    the entry that consumes them and the reverse sweep visits each node
    exactly once.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward: Callable[[np.ndarray], tuple]) -> Tensor:
        self.entries.append(TapeEntry(op, inputs, output, backward))
        self._produced.add(id(output))
        return output

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced

    def leaves(self) -> list[Tensor]:
        """Tensors consumed by the tape but not produced by it, in first-use order."""
        seen: set[int] = set()
        out: list[Tensor] = []
        for entry in self.entries:
            for t in entry.inputs:
                if id(t) not in seen and id(t) not in self._produced:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, output: Tensor, wrt=None) -> dict[Tensor, np.ndarray]:
        return backward(self, output, wrt)


def backward(tape: Tape, output: Tensor, wrt=None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar output back to the leaves of the tape.

    Returns a mapping keyed by tensor identity: every leaf when ``wrt``
    is None, else exactly the requested tensors.  Gradient flow is
    pruned to paths that reach ``wrt``, so e.g. attack gradients skip
    the parameter-gradient work entirely.  Tensors that do not
    influence the output get zero gradients.
    """
    if output.data.size != 1:
        raise ShapeError(
            f"backward requires a scalar output, got shape {output.shape}")
    if not tape.produced(output):
        raise ValueError("backward: output was not produced under this tape")

    marked: set[int] | None = None
    if wrt is not None:
        wrt = list(wrt)
        marked = {id(t) for t in wrt}
        for entry in tape.entries:
            if any(id(t) in marked for t in entry.inputs):
                marked.add(id(entry.output))

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for entry in reversed(tape.entries):
        if marked is not None and id(entry.output) not in marked:
            grads.pop(id(entry.output), None)
            continue
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        needed = tuple(marked is None or id(t) in marked for t in entry.inputs)
        for tensor, need, grad in zip(entry.inputs, needed, entry.backward(g, needed)):
            if grad is None or not need:
                continue
            held = grads.get(id(tensor))
            grads[id(tensor)] = grad if held is None else held + grad

    targets = tape.leaves() if wrt is None else wrt
    result: dict[Tensor, np.ndarray] = {}
    for tensor in targets:
        g = grads.get(id(tensor))
        result[tensor] = np.zeros_like(tensor.data) if g is None else g
    return result


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the original shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise / reduction primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _emit("add", (a, b), out, lambda g, needed: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return _emit("sub", (a, b), out, lambda g, needed: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _emit("mul", (a, b), out, lambda g, needed: (
        _unbroadcast(g * b.data, a.shape) if needed[0] else None,
        _unbroadcast(g * a.data, b.shape) if needed[1] else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g, needed: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    # subgradient at 0 is taken as 0
    return _emit("relu", (a,), out, lambda g, needed: (g * (a.data > 0.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g, needed: (g * out,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    return _emit("sum", (a,), out, lambda g, needed: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g, needed: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# linear-algebra primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape[1]} vs {b.shape[0]}")
    out = a.data @ b.data
    return _emit("matmul", (a, b), out,
                 lambda g, needed: (g @ b.data.T if needed[0] else None,
                                    a.data.T @ g if needed[1] else None))


def log_softmax(a) -> Tensor:
    """Log-softmax along the last axis, shifted by the row max for stability."""
    a = as_tensor(a)
    if a.data.ndim < 1:
        raise ShapeError("log_softmax: requires at least one axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward_fn(g, needed):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# convolution / pooling (stride-1 valid conv, 2x2 stride-2 max pool)


def _conv2d_data(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Valid stride-1 correlation.  Returns (output, im2col matrix)."""
    n, h, width, cin = x.shape
    kh, kw, _, cout = w.shape
    oh, ow = h - kh + 1, width - kw + 1
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))  # (n, oh, ow, cin, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * oh * ow, kh * kw * cin)
    out = (cols @ w.reshape(kh * kw * cin, cout)).reshape(n, oh, ow, cout)
    return out, cols


def conv2d(x, w) -> Tensor:
    """2-D convolution, stride 1, no padding.

    ``x`` is (N, H, W, Cin); ``w`` is (KH, KW, Cin, Cout).  A 5x5 kernel
    on a 28x28 input yields 24x24.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d: expects x (N,H,W,Cin) and w (KH,KW,Cin,Cout), got {x.shape}, {w.shape}")
    n, h, width, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {wcin}")
    if h < kh or width < kw:
        raise ShapeError(f"conv2d: input {h}x{width} smaller than kernel {kh}x{kw}")
    out, cols = _conv2d_data(x.data, w.data)
    oh, ow = out.shape[1], out.shape[2]

    def backward_fn(g, needed):
        gm = g.reshape(n * oh * ow, cout)
        dw = (cols.T @ gm).reshape(kh, kw, cin, cout) if needed[1] else None
        dx = None
        if needed[0]:
            # col2im: scatter the column gradients back onto the input
            dcols = (gm @ w.data.reshape(kh * kw * cin, cout).T).reshape(
                n, oh, ow, kh, kw, cin)
            dx = np.zeros((n, h, width, cin))
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i, j, :]
        return dx, dw

    return _emit("conv2d", (x, w), out, backward_fn)


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(
        0, 1, 3, 2, 4, 5).reshape(n, h // 2, w // 2, 4, c)


def _maxpool2_data(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool.  Returns (output, flat argmax per window)."""
    flat = _pool_windows(x)
    idx = flat.argmax(axis=3)
    out = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def maxpool2(x) -> Tensor:
    """Max pooling with 2x2 windows and stride 2; ties route to the first max."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2: expects (N,H,W,C), got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}")
    out = _pool_windows(x.data).max(axis=3)

    def backward_fn(g, needed):
        # argmax recomputed lazily so untraced forwards skip it
        idx = _pool_windows(x.data).argmax(axis=3)
        scattered = np.zeros((n, h // 2, w // 2, 4, c))
        np.put_along_axis(scattered, idx[:, :, :, None, :], g[:, :, :, None, :], axis=3)
        dx = scattered.reshape(n, h // 2, w // 2, 2, 2, c).transpose(
            0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
        return (dx,)

    return _emit("maxpool2", (x,), out, backward_fn)


# ---------------------------------------------------------------------------
# generic dispatch

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "relu": relu,
    "exp": exp,
    "sum": sum_all,
    "reshape": reshape,
    "matmul": matmul,
    "log_softmax": log_softmax,
    "conv2d": conv2d,
    "maxpool2": maxpool2,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by id, recording a tape entry when tracing is on."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}; known: {sorted(PRIMITIVES)}")
    return fn(*inputs, **kwargs)
