"""Dense tensors with reverse-mode automatic differentiation.

Arrays are stored row-major in numpy, image batches use ``(batch, channel,
height, width)`` ordering. Every differentiable operation records its parents
and a closure mapping the output gradient to parent gradients; ``backward``
walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import NumericError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_float_array(data: ArrayLike, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise UsageError(f"unsupported dtype {dtype}; use float32 or float64")
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float array that can track gradients.

    Leaf tensors created with ``requires_grad=True`` own a ``grad`` array of
    the same shape, which ``backward`` accumulates into. Intermediate results
    keep only the references needed to run the backward pass once.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if self.requires_grad else None
        )
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._released = False
        self.op = ""

    # construction helpers -------------------------------------------------
    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Iterable["Tensor"],
        backward: BackwardFn,
        op: str,
    ) -> "Tensor":
        parents = tuple(parents)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._released = False
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def ensure(value: Union["Tensor", ArrayLike], like: Optional["Tensor"] = None) -> "Tensor":
        if isinstance(value, Tensor):
            return value
        dtype = like.dtype if like is not None else None
        return Tensor(np.asarray(value), dtype=dtype)

    # basic properties -----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # autodiff -------------------------------------------------------------
    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Populate ``grad`` of every leaf reachable from this tensor.

        The root must hold a single value unless an explicit output
        gradient is given. The graph is released afterwards; calling
        ``backward`` again on the same root raises :class:`UsageError`.
        """
        if self._released:
            raise UsageError("backward() called twice on the same graph; rebuild the forward pass")
        if not self.requires_grad:
            raise UsageError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_float_array(grad, self.dtype).reshape(self.shape)

        order = self._topological_order()
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._released = True
                node._backward = None
                node._parents = ()

    def _topological_order(self) -> list:
        order: list = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    if parent._released:
                        raise UsageError("graph was already released by a previous backward()")
                    stack.append((parent, False))
        return order

    # elementwise arithmetic ----------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = Tensor.ensure(other, self)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor.ensure(other, self))

    def __rsub__(self, other) -> "Tensor":
        return Tensor.ensure(other, self) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = Tensor.ensure(other, self)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor.ensure(other, self)
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor.ensure(other, self) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise UsageError("only constant exponents are supported")
        a = self.data
        p = np.asarray(exponent, dtype=a.dtype)
        return Tensor._from_op(a ** p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(a * a, (self,), lambda g: (2 * g * a,), "square")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g / (2 * out),), "sqrt")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._from_op(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def clamp_min(self, low: float) -> "Tensor":
        """max(x, low); the gradient is zero where the clamp is active."""
        a = self.data
        mask = a >= low
        out = np.where(mask, a, np.asarray(low, dtype=a.dtype))
        return Tensor._from_op(out, (self,), lambda g: (g * mask,), "clamp_min")

    # reductions and shape ops --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    def __getitem__(self, index) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._from_op(np.asarray(self.data[index]), (self,), backward, "getitem")


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(data, tensors, backward, "stack")
