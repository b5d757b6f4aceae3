"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a new :class:`Tensor`. When any input requires
gradients the output remembers its parents and a local backward rule; a
:class:`Tape` is the topologically ordered list of those records reachable
from a scalar loss.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if requires_grad and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in parameter {name!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mul(tsum(self), 1.0 / self.data.size)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of ``max(a, clamp)``; zero gradient where clamped."""
    x = a.data
    safe = np.maximum(x, clamp)
    live = x >= clamp
    return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index]), (a,), backward)


def take_rows(a: Tensor, rows) -> Tensor:
    """Gather rows of a 2-d tensor (embedding lookup)."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.data[rows], (a,), backward)


def gather(a: Tensor, rows, cols) -> Tensor:
    """Pick ``a[rows[i], cols[i]]`` into a 1-d tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(a.data[rows, cols], (a,), backward)


def segment_mean(a: Tensor, offsets: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Mean over contiguous row segments; ``offsets`` are segment starts."""
    lengths = np.asarray(lengths)
    seg = np.repeat(np.arange(len(lengths)), lengths)
    inv = 1.0 / lengths
    out = np.add.reduceat(a.data, offsets, axis=0) * inv[:, None]
    return _make(out, (a,), lambda g: ((g * inv[:, None])[seg],))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_dot shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.einsum("ij,ij->i", ad, bd)
    return _make(out, (a, b), lambda g: (g[:, None] * bd, g[:, None] * ad))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dot expects equal 1-d shapes: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


# ---------------------------------------------------------------- softmax family


def log_softmax(scores: Tensor) -> Tensor:
    x = scores.data
    z = x - x.max()
    lse = np.log(np.exp(z).sum())
    y = z - lse
    p = np.exp(y)
    return _make(y, (scores,), lambda g: (g - p * g.sum(),))


class Distribution:
    """A probability vector, possibly still attached to the graph."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: Tensor):
        probs = tensor.data
        if probs.ndim != 1 or probs.size == 0:
            raise ShapeError("distribution must be a non-empty 1-d vector")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        self.tensor = tensor

    @classmethod
    def from_probs(cls, probs) -> Distribution:
        return cls(Tensor(probs))

    @property
    def probs(self) -> np.ndarray:
        return self.tensor.data

    @property
    def support_size(self) -> int:
        return self.tensor.data.size

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())

    def __repr__(self) -> str:
        return f"Distribution({np.array2string(self.probs, precision=4)})"


def softmax_temp(scores: Tensor, tau: float = 1.0) -> Distribution:
    """Temperature softmax ``exp(s/tau) / sum exp(s/tau)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = _as_tensor(scores)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ShapeError("softmax_temp expects a non-empty 1-d score vector")
    x = scores.data / tau
    e = np.exp(x - x.max())
    p = e / e.sum()

    def backward(g):
        return ((p * (g - (g * p).sum())) / tau,)

    return Distribution(_make(p, (scores,), backward))


def kl_divergence(p: Distribution, q: Distribution) -> Tensor:
    """``sum_i p_i (ln p_i - ln q_i)`` with ``p`` held constant."""
    if p.support_size != q.support_size:
        raise ShapeError(f"support sizes differ: {p.support_size} vs {q.support_size}")
    pd = p.probs
    mask = pd > 0
    const = float((pd[mask] * np.log(pd[mask])).sum())
    cross = tsum(mul(log(q.tensor), pd))
    return add(neg(cross), const)


# ---------------------------------------------------------------- backward


class Tape:
    """Operation records reachable from a loss, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, loss: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def gradient_check(f: Callable[[], Tensor], params, eps: float = 1e-5,
                   coords: int | None = None, seed: int = 0) -> float:
    """Max relative gap between backprop and central differences.

    ``f`` takes no arguments and reads the current values of ``params``
    (a tensor or a sequence of tensors). ``coords`` limits the check to a
    random subset of coordinates per tensor.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    plist = [params] if isinstance(params, Tensor) else list(params)
    zero_grad(plist)
    backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in plist:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    zero_grad(plist)
    return worst
