"""Network ops on top of the core tape: convolution, pooling, activations, fixed linear maps."""
from collections import OrderedDict
from typing import Callable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from autodiff.tensor import Function, Tensor, as_tensor
from errors import ShapeError

Padding = Union[int, Tuple[int, int, int, int]]


def same_padding(kernel: int) -> Tuple[int, int, int, int]:
    """(top, bottom, left, right) keeping H, W at stride 1; even kernels pad bottom/right."""
    before = (kernel - 1) // 2
    after = kernel - 1 - before
    return before, after, before, after


def _normalize_padding(padding: Padding) -> Tuple[int, int, int, int]:
    if isinstance(padding, int):
        return padding, padding, padding, padding
    if len(padding) != 4:
        raise ShapeError(f"padding must be an int or 4-tuple, got {padding}")
    return tuple(int(p) for p in padding)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return x * self.mask

    def backward(self, grad):
        return (grad * self.mask,)


class Conv2d(Function):
    """NCHW cross-correlation with weight [C_out, C_in, k, k], bias [C_out]."""

    def forward(self, x, weight, bias, stride=1, padding=0):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError(f"conv2d input {x.shape} incompatible with weight {weight.shape}")
        self.stride = stride
        self.padding = _normalize_padding(padding)
        top, bottom, left, right = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        k = weight.shape[2]
        n, c, hp, wp = xp.shape
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = windows.shape[2], windows.shape[3]
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output would be empty for input {x.shape}")
        self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        self.padded_shape = xp.shape
        self.out_hw = (ho, wo)
        w_mat = weight.reshape(weight.shape[0], -1)
        out = self.cols @ w_mat.T + bias
        return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, grad):
        x, weight, bias = self.tensors
        c_out, c_in, k, _ = weight.shape
        n = x.shape[0]
        ho, wo = self.out_hw
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ self.cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ weight.data.reshape(c_out, -1)).reshape(n, ho, wo, c_in, k, k)
            dxp = np.zeros(self.padded_shape, dtype=grad.dtype)
            s = self.stride
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            top, _, left, _ = self.padding
            gx = dxp[:, :, top:top + x.shape[2], left:left + x.shape[3]]
        return gx, gw, gb


class MaxPool2d(Function):
    """2x2 window, stride 2, floor mode; ties go to the first element in row-major order."""

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 < 1 or w2 < 1:
            raise ShapeError(f"max-pool needs at least 2x2 input, got {x.shape}")
        blocks = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h2, w2, 4)
        self.argmax = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        (x,) = self.tensors
        n, c, h, w = x.shape
        h2, w2 = grad.shape[2], grad.shape[3]
        onehot = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
        np.put_along_axis(onehot, self.argmax[..., None], grad[..., None], axis=-1)
        blocks = onehot.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        out = np.zeros_like(x.data)
        out[:, :, :2 * h2, :2 * w2] = blocks
        return (out,)


class UpsampleNearest(Function):
    def forward(self, x, factor=2):
        self.factor = factor
        return np.repeat(np.repeat(x, factor, axis=2), factor, axis=3)

    def backward(self, grad):
        n, c, h, w = self.tensors[0].shape
        f = self.factor
        return (grad.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class LinearOperator(Function):
    """Applies a fixed linear map; the backward pass is its exact adjoint."""

    def forward(self, x, forward_fn=None, adjoint_fn=None):
        self.adjoint_fn = adjoint_fn
        return forward_fn(x)

    def backward(self, grad):
        return (self.adjoint_fn(grad),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: Padding = 0) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def max_pool2d(x: Tensor) -> Tensor:
    return MaxPool2d.apply(x)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    return UpsampleNearest.apply(x, factor=factor)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return x @ weight + bias


def apply_linear(x: Tensor, forward_fn: Callable[[np.ndarray], np.ndarray],
                 adjoint_fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    return LinearOperator.apply(as_tensor(x), forward_fn=forward_fn, adjoint_fn=adjoint_fn)


class Module:
    """Ordered container of named trainable Tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add_param(self, name: str, value: np.ndarray, requires_grad: bool = True) -> Tensor:
        tensor = Tensor(value, requires_grad=requires_grad)
        self._params[name] = tensor
        return tensor

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self._params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = [name for name in self._params if name not in state]
        unexpected = [name for name in state if name not in self._params]
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in self._params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype)
