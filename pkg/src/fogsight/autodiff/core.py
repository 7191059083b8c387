"""Reverse-mode differentiation core.

A global tape records one TapeNode per differentiable operation, in forward
execution order.  ``backward(loss)`` replays it in reverse, pushing gradient
flow through each node's backward rule and accumulating into the ``.grad``
of every tensor that requires gradients.

Conventions:
  * Tensors hold a contiguous float32 or float64 ndarray; float64 is the
    checking dtype (gradcheck, exact conv equivalence), float32 the
    training dtype.
  * Backward rules receive the upstream gradient and return one array per
    input (None for non-differentiable slots).  Returned arrays must be
    freshly allocated per slot: the engine accumulates into them in place.
  * Repeated backward calls accumulate into ``.grad``; ``zero_grad`` resets.
"""

import contextlib

import numpy as np

from ..errors import DimensionError, UsageError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-d array with optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def _accum_grad(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars fold into scale/shift ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other) if isinstance(other, Tensor) else shift(self, -float(other))

    def __rsub__(self, other):
        return shift(-self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not a supported primitive")
        return scale(self, 1.0 / float(other))


class TapeNode:
    """One recorded op: inputs, output and the rule to push gradients back."""

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


_tape: list = []
_grad_enabled = True


def record(op: str, inputs, out: Tensor, backward) -> Tensor:
    """Append a node to the tape if grads are on and any input needs them."""
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append(TapeNode(op, tuple(inputs), out, backward))
    return out


def tape_nodes() -> list:
    """Snapshot of the active tape (graph introspection, tests)."""
    return list(_tape)


def clear_tape():
    _tape.clear()


def tape_len() -> int:
    return len(_tape)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (eval / data preparation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def backward(loss: Tensor):
    """Accumulate dLoss/dT into every requires_grad tensor reachable from loss."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not _tape:
        raise UsageError("backward on an empty tape")
    flows = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(_tape):
        g = flows.pop(id(node.out), None)
        if g is None:
            continue
        holders.pop(id(node.out), None)
        if node.out.requires_grad:
            node.out._accum_grad(g)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if id(t) in flows:
                flows[id(t)] += gi
            else:
                flows[id(t)] = gi
                holders[id(t)] = t
    for tid, g in flows.items():  # leaves
        t = holders[tid]
        if t.requires_grad:
            t._accum_grad(g)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g.copy()))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return record("scale", (a,), out, lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return record("shift", (a,), out, lambda g: (g.copy(),))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    return record("log", (a,), out, lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return record("sigmoid", (a,), out, lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return record("relu", (a,), out, lambda g: (g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)
    return record("clamp", (a,), out, lambda g: (g * inside,))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())
    return record(
        "sum", (a,), out, lambda g: (np.full(a.data.shape, g, dtype=a.data.dtype),)
    )


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    shape = a.data.shape
    count = a.data.size // out.data.size

    def back(g):
        ge = g
        if not keepdims and axes is not None:
            axs = (axes,) if isinstance(axes, int) else tuple(axes)
            for ax in sorted(ax % len(shape) for ax in axs):
                ge = np.expand_dims(ge, ax)
        return (np.broadcast_to(ge, shape) / count,)

    return record("mean", (a,), out, back)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Strict same-shape addition (feature-map fusion)."""
    return add(a, b)


def concat_channels(tensors) -> Tensor:
    """Concatenate NCHW tensors along the channel axis; values preserved."""
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat_channels of nothing")
    first = tensors[0].data
    for t in tensors[1:]:
        if t.data.ndim != first.ndim or t.data.shape[0] != first.shape[0] or t.data.shape[2:] != first.shape[2:]:
            raise DimensionError(
                f"concat_channels: non-channel dims differ {first.shape} vs {t.data.shape}"
            )
        if t.data.dtype != first.dtype:
            raise DimensionError("concat_channels: dtype mismatch")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return record("concat_channels", tuple(tensors), out, back)


def dropout(a: Tensor, p: float, rng, training: bool = True) -> Tensor:
    """Inverted dropout; mask drawn from the given splitmix stream."""
    if not training or p <= 0.0:
        return a
    keep = ~rng.bernoulli(a.data.shape, p)
    factor = (keep / (1.0 - p)).astype(a.data.dtype)
    out = Tensor(a.data * factor)
    return record("dropout", (a,), out, lambda g: (g * factor,))


def assert_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{what} contains non-finite values")
