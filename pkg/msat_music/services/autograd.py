# msat_music/services/autograd.py
"""Minimal reverse-mode differentiation over float64 numpy arrays.

A Tensor records its parents and a closure mapping the output gradient to
one gradient per parent. `backward()` walks the graph once in reverse
topological order, accumulates into leaf `.grad`, and releases the graph.
Tensors built only from constants record nothing.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

GradFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class GraphMismatch(RuntimeError):
    pass


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn", "_released")
    # ndarray <op> Tensor falls through to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._released = False

    # ----- plumbing -----
    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], grad_fn: GradFn) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None and not self._released

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _topo(self) -> list["Tensor"]:
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
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._released:
            raise GraphMismatch("graph was already consumed by an earlier backward()")
        if not self.requires_grad:
            raise GraphMismatch("tensor does not depend on any trainable parameter")
        if grad is None:
            if self.data.size != 1:
                raise GraphMismatch(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise GraphMismatch(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if node._released:
                raise GraphMismatch("graph shares a node consumed by an earlier backward()")
            if node._grad_fn is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._grad_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
            node._parents = ()
            node._grad_fn = None
            node._released = True

    # ----- arithmetic -----
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(self.data + other.data, (self, other),
                              lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(self.data - other.data, (self, other),
                              lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(x * y, (self, other),
                              lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(x / y, (self, other),
                              lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        x = self.data
        return Tensor._result(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        x, y = self.data, other.data

        def grad_fn(g: np.ndarray):
            gx = g @ np.swapaxes(y, -1, -2)
            gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._result(x @ y, (self, other), grad_fn)

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # ----- elementwise -----
    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._result(y, (self,), lambda g: (g * (1.0 - y * y),))

    # ----- reductions and shape -----
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def grad_fn(g: np.ndarray):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        inv = np.argsort(axes)
        return Tensor._result(self.data.transpose(*axes), (self,), lambda g: (g.transpose(*inv),))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def grad_fn(g: np.ndarray):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(self.data[idx], (self,), grad_fn)

    # ----- normalizers -----
    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        return Tensor._result(y, (self,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        y = z - lse
        p = np.exp(y)
        return Tensor._result(y, (self,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    data = np.concatenate([p.data for p in parts], axis=axis)
    return Tensor._result(data, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else parts[0].ndim + 1 + axis
    expanded = [p.reshape(*p.shape[:ax], 1, *p.shape[ax:]) for p in parts]
    return concat(expanded, axis=ax)
