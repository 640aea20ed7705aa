import logging
from contextlib import contextmanager
from typing import Any, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from errors import NumericalError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

_DTYPE = np.float32
CHECK_FINITE = True

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def get_dtype() -> type:
    return _DTYPE


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """Temporarily switch the working dtype (float64 is used by gradient checks)."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def as_tensor(value: ArrayLike) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays and `backward`, which receives dL/d[out]
    and returns one gradient array (or None) per input tensor.
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        if CHECK_FINITE and not np.all(np.isfinite(out_data)):
            raise NumericalError(f"non-finite value produced by {cls.__name__}")
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so that grad matches to_shape."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for dim, extent in enumerate(to_shape):
            if extent == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class Tensor:
    """Dense array node of the reverse-mode tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, creator: Optional[Function] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    def __repr__(self):
        return f'<Tensor shape={self.shape} requires_grad={self.requires_grad}>'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Propagate d(self)/d(leaf) to every requires_grad leaf of the graph.

        The root must be a scalar unless an explicit seed gradient is passed. Leaf gradients
        accumulate into `.grad`; intermediate gradients are discarded.
        """
        if not self.requires_grad:
            raise ValidationError("backward called on a tensor detached from any trainable leaf")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, children_done = stack.pop()
            if id(node) in visited:
                continue
            if children_done:
                visited.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node.creator is None:
                if not np.all(np.isfinite(node_grad)):
                    raise NumericalError("non-finite gradient reached a leaf")
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            input_grads = node.creator.backward(node_grad)
            if not isinstance(input_grads, tuple):
                input_grads = (input_grads,)
            for parent, g in zip(node.creator.tensors, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                if g.shape != parent.shape:
                    raise ShapeError(
                        f"{type(node.creator).__name__} produced grad {g.shape} for input {parent.shape}")
                if CHECK_FINITE and not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient in {type(node.creator).__name__}")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + g
                else:
                    grads[id(parent)] = g

    # arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, Neg.apply(as_tensor(other)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(as_tensor(other), Neg.apply(self))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return Div.apply(self, other)
        return Mul.apply(self, as_tensor(1.0 / np.asarray(other, dtype=np.float64)))

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, as_tensor(other))

    def __getitem__(self, idx: Any) -> "Tensor":
        return GetItem.apply(self, idx=idx)

    # movement
    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    # reductions
    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        total = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size // max(total.data.size, 1)
        return total * (1.0 / count)

    # elementwise
    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def square(self) -> "Tensor":
        return Mul.apply(self, self)


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        x, y = self.tensors
        return self.unbroadcast(grad, x.shape), self.unbroadcast(grad, y.shape)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Mul(Function):
    def forward(self, x, y):
        return x * y

    def backward(self, grad):
        x, y = self.tensors
        gx = self.unbroadcast(grad * y.data, x.shape) if x.requires_grad else None
        gy = self.unbroadcast(grad * x.data, y.shape) if y.requires_grad else None
        return gx, gy


class Div(Function):
    def forward(self, x, y):
        return x / y

    def backward(self, grad):
        x, y = self.tensors
        gx = self.unbroadcast(grad / y.data, x.shape) if x.requires_grad else None
        gy = self.unbroadcast(-grad * x.data / (y.data * y.data), y.shape) if y.requires_grad else None
        return gx, gy


class MatMul(Function):
    def forward(self, x, y):
        if x.ndim < 1 or y.ndim < 1 or x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
            raise ShapeError(f"matmul shape mismatch {x.shape} @ {y.shape}")
        return x @ y

    def backward(self, grad):
        x, y = self.tensors
        xd, yd = x.data, y.data
        if yd.ndim == 1:
            gx = np.multiply.outer(grad, yd) if x.requires_grad else None
            gy = (xd.reshape(-1, xd.shape[-1]).T @ grad.reshape(-1)) if y.requires_grad else None
            return gx, gy
        gx = grad @ np.swapaxes(yd, -1, -2) if x.requires_grad else None
        gy = None
        if y.requires_grad:
            if xd.ndim == 1:
                gy = np.multiply.outer(xd, grad)
            else:
                gy = np.swapaxes(xd, -1, -2) @ grad
                gy = self.unbroadcast(gy, yd.shape)
        if gx is not None:
            gx = self.unbroadcast(gx, xd.shape)
        return gx, gy


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        (x,) = self.tensors
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, x.shape).copy(),)


class Reshape(Function):
    def forward(self, x, shape=()):
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.tensors[0].shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, x, idx=None):
        self.idx = idx
        return np.array(x[idx])

    def backward(self, grad):
        out = np.zeros_like(self.tensors[0].data)
        np.add.at(out, self.idx, grad)
        return (out,)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Sqrt(Function):
    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)
