"""Dense float64 tensors with tape-based reverse-mode autodiff and SGD.

Every operation builds a node holding its parents and a closure that maps the
upstream gradient to one gradient per parent.  ``backward`` walks the graph in
reverse topological order and accumulates into the ``grad`` buffers of leaf
tensors created with ``requires_grad=True``.

>>> w = Tensor([2.0], requires_grad=True)
>>> loss = sum_(mul(w, w))
>>> backward(loss)
>>> w.grad
array([4.])
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """An n-d float64 array that optionally records the ops producing it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op output; attach graph only if some parent is tracked."""
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite output from {op}")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=DTYPE)
    out.grad = None
    out.name = None
    out._op = op
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Register a hand-written op.

    ``backward_fn(grad_out)`` must return one array (or None) per parent.
    """
    return _node(data, [as_tensor(p) for p in parents], backward_fn, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "mul": mul,
    "add": add,
    "sub": sub,
    "scale": scale,
    "relu": relu,
    "log": log,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _node(out, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for x of shape [..., n_in]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: {a.shape} -> {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, bw, "concat")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[axis] or idx.max() >= a.shape[axis]):
        raise DimensionError(f"take: index out of range for axis of size {a.shape[axis]}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if axis == 0:
            flat = g.reshape((-1,) + a.shape[1:])
            np.add.at(full, idx.reshape(-1), flat)
        else:
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx.reshape(-1), gm.reshape((-1,) + moved.shape[1:]))
        return (full,)

    return _node(out, (a,), bw, "take")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), bw, "getitem")


# ---------------------------------------------------------------- composites with fused gradients


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; masked-out entries get probability 0.

    A slice whose mask is entirely zero yields all zeros.
    """
    a = as_tensor(a)
    if a.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        shifted = np.where(m, x, -np.inf)
        top = np.max(shifted, axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, x - top, 0.0)), 0.0)
        z = e.sum(axis=axis, keepdims=True)
        s = e / np.where(z > 0, z, 1.0)
    else:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), bw, "softmax")


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the origin is taken as 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        unit = a.data / np.expand_dims(safe, axis)
        return (np.expand_dims(g * (n > 0), axis) * unit,)

    return _node(n, (a,), bw, "norm")


def bce_with_logits(logits, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    z = as_tensor(logits)
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != z.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs labels {y.shape}")
    x = z.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    n = x.size

    def bw(g):
        return (g * (s - y) / n,)

    return _node(np.asarray(loss.mean()), (z,), bw, "bce_with_logits")


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() and central differences.

    ``f`` is called with no arguments and must read ``params`` itself.  With
    ``sample`` set, only that many coordinates, drawn uniformly over all
    params with ``rng``, are differenced.
    """
    if not 0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    sizes = [p.size for p in params]
    total = sum(sizes)
    if sample is None or sample >= total:
        picks = np.arange(total)
    else:
        picks = np.sort((rng or np.random.default_rng(0)).choice(total, sample, replace=False))
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for g in picks:
        j = int(np.searchsorted(offsets, g, side="right") - 1)
        k = int(g - offsets[j])
        flat = params[j].data.reshape(-1)
        orig = flat[k]
        with no_grad():
            flat[k] = orig + eps
            hi = f().item()
            flat[k] = orig - eps
            lo = f().item()
        flat[k] = orig
        g_fd = (hi - lo) / (2.0 * eps)
        if not np.isfinite(g_fd):
            raise NumericError("non-finite finite-difference gradient")
        a = grads[j].reshape(-1)[k]
        worst = max(worst, abs(a - g_fd) / max(1e-8, abs(a) + abs(g_fd)))
    return worst


# ---------------------------------------------------------------- optimisation


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 1.0
    decay_factor: float = 0.1
    decay_unit: str = "per-epoch"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.decay_factor <= 1:
            raise ContractError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_unit != "per-epoch":
            raise ContractError(f"unsupported decay_unit {self.decay_unit!r}")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.decay_factor ** epoch


def sgd_step(params: Iterable[Tensor], config: SgdConfig, epoch: int) -> None:
    """In-place ``p -= lr_e * grad`` followed by zeroing the gradients."""
    params = list(params)
    lr = config.lr_at(epoch)
    for p in params:
        if p.requires_grad and p.grad is None:
            raise ContractError(f"parameter {p.name or '?'} has no gradient")
    for p in params:
        if p.grad is None:
            continue
        p.data -= lr * p.grad
        p.grad = None


# ---------------------------------------------------------------- initialisation


def uniform_param(rng: np.random.Generator, shape, scale: float = 0.05, name: str | None = None) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)


def zeros_param(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Mlp:
    """Feed-forward stack; hidden layers use ``activation``, the last is linear.

    Weights are uniform in ``[-scale, scale]``; ``scale=None`` picks the Glorot
    limit sqrt(6 / (fan_in + fan_out)) per layer.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, prefix: str,
                 activation: str = "relu", scale: float | None = 0.05):
        if len(sizes) < 2:
            raise ContractError(f"an MLP needs at least input and output sizes, got {list(sizes)}")
        self.sizes = list(sizes)
        self.activation = activation
        self.weights = [uniform_param(rng, (a, b), math.sqrt(6.0 / (a + b)) if scale is None else scale,
                                      f"{prefix}.w{k}")
                        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.biases = [zeros_param((b,), f"{prefix}.b{k}") for k, b in enumerate(sizes[1:])]

    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x) -> Tensor:
        act = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[self.activation]
        h = as_tensor(x)
        if h.ndim == 1:
            return reshape(self(reshape(h, (1, -1))), (-1,))
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = linear(h, w, b)
            if k < last:
                h = act(h)
        return h
