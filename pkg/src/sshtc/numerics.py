"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every forward op on a :class:`Tensor` records its parents and a closure that
maps the output gradient to parent gradients. :func:`backward` replays that
record in reverse topological order. The graph is rebuilt on every forward
pass, so there is no global state beyond a thread-local "grad enabled" flag.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "ParameterStore",
    "as_tensor",
    "no_grad",
    "backward",
    "finite_diff_check",
    "relu",
    "tanh",
    "exp",
    "log",
    "safe_sqrt",
    "affine",
    "matmul",
    "mean_pool",
    "sq_euclidean",
    "pairwise_sq_dist",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "concat",
    "stack",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("value", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Tensor({self.value!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p != 2:
            raise ValueError("only squaring is supported")
        return mul(self, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(value, tuple(parents), backward_fn, requires_grad=True)
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def relu(x) -> Tensor:
    """Elementwise max(0, x). The derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.value)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def safe_sqrt(x) -> Tensor:
    """Square root whose derivative at 0 is defined as 0 instead of infinity."""
    x = as_tensor(x)
    y = np.sqrt(x.value)
    pos = y > 0

    def bw(g):
        return (np.where(pos, g / (2.0 * np.where(pos, y, 1.0)), 0.0),)

    return _make(y, (x,), bw)


# structural ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"cannot multiply {av.shape} by {bv.shape}")

    def bw(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2:
            return np.outer(g, bv), av.T @ g
        if bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g * bv, g * av

    return _make(av @ bv, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) / n


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(
        np.concatenate([x.value for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([x.value for x in xs], axis=axis), xs, bw)


# composite ops used by the model ---------------------------------------------


def affine(W, x, b) -> Tensor:
    """``W @ x + b`` for 1-D ``x``, or ``x @ W.T + b`` row-wise for 2-D ``x``."""
    W, x, b = as_tensor(W), as_tensor(x), as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"affine: W{W.shape}, x{x.shape}, b{b.shape}")
    if x.ndim == 1:
        return matmul(W, x) + b
    return matmul(x, transpose(W)) + b


def mean_pool(xs: Sequence) -> Tensor:
    """Elementwise mean of a nonempty sequence of same-shaped arrays."""
    if len(xs) == 0:
        raise ValueError("mean_pool of an empty sequence")
    if isinstance(xs, Tensor):
        return tmean(xs, axis=0)
    shapes = {as_tensor(x).shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"mean_pool: mixed shapes {sorted(shapes)}")
    return tmean(stack(xs), axis=0)


def sq_euclidean(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"sq_euclidean: {a.shape} vs {b.shape}")
    diff = a - b
    return tsum(diff * diff)


def pairwise_sq_dist(X, Y) -> Tensor:
    """(m, d) x (n, d) -> (m, n) matrix of squared Euclidean distances."""
    X, Y = as_tensor(X), as_tensor(Y)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: {X.shape} vs {Y.shape}")
    m, d = X.shape
    n = Y.shape[0]
    diff = reshape(X, (m, 1, d)) - reshape(Y, (1, n, d))
    return tsum(diff * diff, axis=-1)


def softmax(logits, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(logits)
    if x.value.size == 0:
        raise ValueError("softmax of an empty array")
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw)


def cross_entropy(dist, target_index: int) -> Tensor:
    """``-log dist[target_index]`` for a 1-D probability vector."""
    dist = as_tensor(dist)
    n = dist.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"target {target_index} out of range for {n} classes")
    return neg(log(dist[target_index]))


# differentiation -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each named leaf.

    Leaves the loss does not depend on get exact zeros.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node.backward_fn is not None else None
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
    out = {}
    for name, leaf in leaves.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros_like(leaf.value) if g is None else g.reshape(leaf.shape)
    return out


class ParameterStore:
    """Named float64 parameters plus same-keyed gradients."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def set_grads(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            g = np.asarray(grads.get(name, np.zeros_like(arr)), dtype=np.float64)
            if g.shape != arr.shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {arr.shape}")
            self.grads[name] = g

    def zero_grad(self) -> None:
        for name, arr in self.params.items():
            self.grads[name] = np.zeros_like(arr)

    def copy(self) -> "ParameterStore":
        new = ParameterStore(self.params)
        new.grads = {k: v.copy() for k, v in self.grads.items()}
        return new

    def num_values(self) -> int:
        return sum(v.size for v in self.params.values())


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParameterStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` receives a name -> Tensor mapping and must build the loss from
    it deterministically. The per-coordinate error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps coordinates whose true
    gradient is zero from dividing by roundoff. ``params.grads`` is left
    holding the reverse-mode gradients.
    """
    leaves = params.tensors()
    analytic = backward(loss_fn(leaves), leaves)
    params.set_grads(analytic)
    worst = 0.0
    for name in names if names is not None else params.names():
        arr = params.params[name]
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = loss_fn(params.tensors()).item()
                flat[i] = orig - eps
                down = loss_fn(params.tensors()).item()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
