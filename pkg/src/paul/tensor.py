"""Small reverse-mode autodiff over numpy float64 arrays.

Every op builds its node eagerly (dynamic tape). A node stores its parents and
a closure mapping the output gradient to the parents' gradients. Any op whose
output contains NaN or Inf raises :class:`NonFiniteError` immediately.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "NonFiniteError",
    "DimensionError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "concat",
    "logsumexp",
    "lgamma",
    "digamma",
    "grad_check",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """Dense float64 array that can record operations for backpropagation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = _check_finite(arr, _op)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = _parents
        self._backward: Optional[Callable] = _backward
        self._op = _op

    # -- basics -----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ----------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        track = grad_enabled() and any(p.requires_grad for p in parents)
        if track:
            return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, _op=op)
        return Tensor(data, _op=op)

    # -- binary ops ---------------------------------------------------------

    def _binary(self, other, fwd, grads, op):
        other = other if isinstance(other, Tensor) else Tensor(_as_array(other))
        a, b = self.data, other.data
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc
        with np.errstate(all="ignore"):
            out = fwd(a, b)

        def backward(g):
            ga, gb = grads(g, a, b, out)
            return (
                None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape),
            )

        return Tensor._make(out, (self, other), backward, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b, o: (g, g), "add")

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b, o: (g, -g), "sub")

    def __rsub__(self, other):
        return Tensor(_as_array(other)) - self

    def __mul__(self, other):
        return self._binary(other, np.multiply, lambda g, a, b, o: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, np.divide, lambda g, a, b, o: (g / b, -g * a / (b * b)), "div")

    def __rtruediv__(self, other):
        return Tensor(_as_array(other)) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary ops ------------------------------------------------------------

    def _unary(self, out: np.ndarray, dfn: Callable, op: str) -> "Tensor":
        return Tensor._make(_check_finite(out, op), (self,), lambda g: (g * dfn(),), op)

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return self._unary(out, lambda: out, "exp")

    def log(self) -> "Tensor":
        if np.any(self.data <= 0):
            raise ValueError("log: input must be strictly positive")
        x = self.data
        return self._unary(np.log(x), lambda: 1.0 / x, "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return self._unary(out, lambda: 1.0 - out * out, "tanh")

    def abs(self) -> "Tensor":
        x = self.data
        return self._unary(np.abs(x), lambda: np.sign(x), "abs")

    def relu(self) -> "Tensor":
        x = self.data
        return self._unary(np.maximum(x, 0.0), lambda: (x > 0).astype(np.float64), "relu")

    def square(self) -> "Tensor":
        x = self.data
        return self._unary(x * x, lambda: 2.0 * x, "square")

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise ValueError("sqrt: input must be non-negative")
        out = np.sqrt(self.data)
        return self._unary(out, lambda: 0.5 / out, "sqrt")

    # -- reductions and shape ops ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = np.sum(self.data, axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out, dtype=np.float64), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"reshape: {src} -> {shape}") from exc
        return Tensor._make(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = np.ascontiguousarray(np.transpose(self.data, axes))
        return Tensor._make(out, (self,), lambda g: (np.transpose(g, inv),), "permute")

    def transpose(self) -> "Tensor":
        """Swap the last two axes."""
        if self.ndim < 2:
            raise DimensionError("transpose needs at least 2 dims")
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.permute(axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape
        out = np.array(self.data[idx], dtype=np.float64)

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out, (self,), backward, "index")

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        return logsumexp(self, axis=axis, keepdims=keepdims)

    # -- backprop -------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Without ``grad`` the tensor must be a scalar.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch dims when ``b`` is 2-D."""
    b = b if isinstance(b, Tensor) else Tensor(_as_array(b))
    x, w = a.data, b.data
    if x.ndim < 2 or w.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if x.shape[-1] != w.shape[-2]:
        raise DimensionError(f"matmul: {x.shape} @ {w.shape}")
    if w.ndim > 2 and x.shape[:-2] != w.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ {x.shape} @ {w.shape}")
    out = x @ w

    def backward(g):
        ga = g @ np.swapaxes(w, -1, -2)
        if w.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "concat")


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(a))) along ``axis``."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    softmax = np.exp(x - s)
    out = s if keepdims else np.squeeze(s, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * softmax,)

    return Tensor._make(out, (a,), backward, "logsumexp")


def lgamma(a: Tensor) -> Tensor:
    """log Gamma, derivative digamma. Defined here for positive inputs only."""
    x = a.data
    if np.any(x <= 0):
        raise ValueError("lgamma: input must be positive")
    return a._unary(special.gammaln(x), lambda: special.digamma(x), "lgamma")


def digamma(a: Tensor) -> Tensor:
    """Digamma, derivative trigamma. Positive inputs only."""
    x = a.data
    if np.any(x <= 0):
        raise ValueError("digamma: input must be positive")
    return a._unary(special.digamma(x), lambda: special.polygamma(1, x), "digamma")


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, stencil: int = 2) -> float:
    """Max relative error between backprop and central differences of scalar ``f`` at ``x``.

    ``stencil=4`` uses the fourth-order five-point rule, which tolerates a
    larger ``h`` and so loses less to round-off on steep functions.
    """
    # symmetric pairs are differenced first so an unused input gives exactly zero
    if stencil == 2:
        pairs = ((1.0, 1.0 / 2.0),)
    elif stencil == 4:
        pairs = ((1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0))
    else:
        raise ValueError("stencil must be 2 or 4")
    x0 = np.array(_as_array(x), dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0
            for o, w in pairs:
                flat[i] = orig + o * h
                fp = f(Tensor(x0)).item()
                flat[i] = orig - o * h
                fm = f(Tensor(x0)).item()
                acc += w * (fp - fm)
            flat[i] = orig
            num_flat[i] = acc / h
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
