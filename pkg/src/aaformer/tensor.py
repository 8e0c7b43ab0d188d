"""Dense float64 tensors with dynamic reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in a fixed
topological order, so gradients are bit-identical across runs.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("non-finite values in tensor input")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(_wrap(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def mT(self):
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data, out.grad, out.requires_grad = data, None, False
    out._parents, out._backward, out.op = (), None, op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def reciprocal(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), with Phi the standard normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _make(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g, axis) * np.where(n > 0, a.data / safe, 0.0),)

    return _make(np.squeeze(n, axis=axis), (a,), backward, "norm")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to"
    )


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by the per-row maximum.

    With a boolean ``mask`` the softmax runs over the True entries only and
    masked entries get weight exactly 0. Every row needs at least one True.
    """
    x = _wrap(x)
    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax_rows: a row has no unmasked entries")
        masked = np.where(mask, x.data, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps < 0:
        raise ContractError("layer_norm: eps must be non-negative")
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = np.mean(centred * centred, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centred * inv_std
    xhat = np.where(centred == 0, 0.0, xhat)
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------- graph traversal

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: "ParameterStore | Iterable[Tensor] | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Parameters in ``params`` that the loss does not reach get a zero gradient
    if they have none yet. Gradients accumulate across calls; zeroing between
    steps is the caller's job.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topological_order(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        tensors = params.values() if isinstance(params, ParameterStore) else params
        for p in tensors:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


class ParameterStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, tensors: dict[str, np.ndarray | Tensor] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._tensors[n]) for n in self.names()]

    def values(self) -> list[Tensor]:
        return [self._tensors[n] for n in self.names()]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._tensors):
            missing = set(self._tensors) ^ set(state)
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for n, arr in state.items():
            if arr.shape != self._tensors[n].shape:
                raise DimensionError(f"{n}: shape {arr.shape} != {self._tensors[n].shape}")
            self._tensors[n].data = np.array(arr, dtype=np.float64)

    def num_values(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))
