"""Reverse-mode automatic differentiation over numpy arrays.

Every :class:`Tensor` wraps a float64 array. Operations on tensors that
require gradients record a node holding the parents and a closure mapping
the output gradient to parent gradients. :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates into the
``grad`` slot of every leaf that requires gradients.

Only what the models in this package need is implemented; it is not meant
to be a general array library.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when the recorded graph cannot be differentiated."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out dimensions that were broadcast in the forward op
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    __array_priority__ = 100.0
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = _op
        self._released = False

    # -- basic properties -------------------------------------------------
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction -----------------------------------------------
    @staticmethod
    def _make(data, parents: Iterable["Tensor"], backward, op: str) -> "Tensor":
        parents = tuple(parents)
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
        if needs:
            out._backward = backward
        return out

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), backward, "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data
        p = float(exponent)

        def backward(g):
            return (g * p * a ** (p - 1.0),)

        return Tensor._make(a**p, (self,), backward, "pow")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul expects 2-D operands")

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor._make(a @ b, (self, other), backward, "matmul")

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    def __getitem__(self, index) -> "Tensor":
        a_shape = self.shape

        def backward(g):
            full = np.zeros(a_shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward, "getitem")

    # -- elementwise functions ---------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.logaddexp(0.0, a)
        return Tensor._make(out, (self,), lambda g: (g * _sigmoid(a),), "softplus")

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * g * a,), "square")

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values; gradient passes only where the input is inside the bounds."""
        a = self.data
        inside = (a >= lo) & (a <= hi)
        return Tensor._make(np.clip(a, lo, hi), (self,), lambda g: (g * inside,), "clip")

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a_shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a_shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(a_shape),), "reshape")

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        shifted = np.exp(a - m)
        total = shifted.sum(axis=axis, keepdims=True)
        out = (m + np.log(total))
        soft = shifted / total

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * soft,)

        value = out if keepdims else np.squeeze(out, axis=axis)
        return Tensor._make(value, (self,), backward, "logsumexp")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        lse = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
        out = a - lse
        soft = np.exp(out)

        def backward(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, (self,), backward, "log_softmax")

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        Repeated calls accumulate. Unless ``retain_graph`` is set the
        backward closures of intermediate nodes are released afterwards, and
        differentiating through a released node raises :class:`TapeError`.
        """
        if grad is None:
            if self.size != 1:
                raise TapeError("invalid tape: backward without a seed needs a scalar output")
            grad = np.ones(self.shape)
        grad = _as_array(grad)
        if not np.all(np.isfinite(self.data)):
            raise TapeError("invalid tape: non-finite loss")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._released or node._backward is None:
                raise TapeError("invalid tape: intermediate node was already released")
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if not node.is_leaf:
                    node._backward = None
                    node._released = True


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order; a grey node seen again means a cycle."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child_idx = stack.pop()
        key = id(node)
        if child_idx == 0:
            if state.get(key) == 2:
                continue
            state[key] = 1
        parents = node._parents
        if child_idx < len(parents):
            stack.append((node, child_idx + 1))
            parent = parents[child_idx]
            pstate = state.get(id(parent))
            if pstate == 1:
                raise TapeError("invalid tape: graph contains a cycle")
            if pstate is None and parent.requires_grad:
                stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * mask, a_shape), _unbroadcast(g * ~mask, b_shape)

    return Tensor._make(np.where(mask, a.data, b.data), (a, b), backward, "where")


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)
