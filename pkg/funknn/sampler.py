"""
Differentiable patch extraction (the spatial-transformer step of FunkNN).

Images are sampled with the Keys cubic-convolution kernel (a = -1/2) on normalized coordinates
in [-1, 1]^2 with pixel-center alignment. Indices falling outside the image are reflected
(i -> -i - 1 on the low side, i -> 2n - i - 1 on the high side, repeated as needed). All
derivatives are analytic and taken with respect to the continuous query coordinate.
"""
import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from autodiff.tensor import Function, Tensor, as_tensor
from errors import ShapeError, ValidationError
from models import ImageGrid

logger = logging.getLogger(__name__)

KEYS_A = -0.5
GAMMA_MIN = 1e-3
TAPS = np.arange(-1, 3)

# derivative orders per axis for each patch kind
ORDERS = {
    'value': (0, 0),
    'dx': (1, 0),
    'dy': (0, 1),
    'dxx': (2, 0),
    'dyy': (0, 2),
}


def keys_kernel(t: Union[float, np.ndarray], order: int = 0) -> Union[float, np.ndarray]:
    """Keys cubic-convolution kernel (order 0) or its piecewise first/second derivative."""
    if order not in (0, 1, 2):
        raise ValidationError(f"kernel order must be 0, 1 or 2, got {order}")
    scalar = np.isscalar(t)
    t = np.asarray(t, dtype=np.float64)
    s = np.abs(t)
    a = KEYS_A
    if order == 2:
        # right-limit at the knots |t| = 1, 2
        inner = (s < 1) | ((s == 1) & (t < 0))
        outer = ~inner & ((s < 2) | ((s == 2) & (t < 0)))
    else:
        inner = s <= 1
        outer = (s > 1) & (s < 2)
    out = np.zeros_like(t)
    if order == 0:
        out = np.where(inner, (a + 2) * s ** 3 - (a + 3) * s ** 2 + 1, out)
        out = np.where(outer, a * s ** 3 - 5 * a * s ** 2 + 8 * a * s - 4 * a, out)
    elif order == 1:
        sign = np.sign(t)
        out = np.where(inner, sign * (3 * (a + 2) * s ** 2 - 2 * (a + 3) * s), out)
        out = np.where(outer, sign * (3 * a * s ** 2 - 10 * a * s + 8 * a), out)
    else:
        out = np.where(inner, 6 * (a + 2) * s - 2 * (a + 3), out)
        out = np.where(outer, 6 * a * s - 10 * a, out)
    return float(out) if scalar else out


def reflect_index(idx: np.ndarray, size: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).copy()
    while True:
        low = idx < 0
        high = idx >= size
        if not (low.any() or high.any()):
            return idx
        idx = np.where(low, -idx - 1, idx)
        idx = np.where(high, 2 * size - idx - 1, idx)


def _axis_terms(coord: np.ndarray, size: int, order: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Tap indices and weights along one axis; weights include the d/dcoord chain factor."""
    pos = ((np.asarray(coord, dtype=np.float64) + 1.0) * size - 1.0) / 2.0
    nearest = np.round(pos)
    pos = np.where(np.abs(pos - nearest) < 1e-9, nearest, pos)
    base = np.floor(pos)
    frac = pos - base
    idx = reflect_index(base[..., None].astype(np.int64) + TAPS, size)
    weights = keys_kernel(frac[..., None] - TAPS, order) * (size / 2.0) ** order
    on_knot = frac == 0.0
    return idx, weights, on_knot


@dataclass
class PatchSpec:
    p: int = 9
    gamma_x: float = 1.0
    gamma_y: float = 1.0

    def __post_init__(self):
        if self.p < 1 or self.p % 2 == 0:
            raise ValidationError(f"patch size must be odd, got {self.p}")
        if self.gamma_x <= 0 or self.gamma_y <= 0:
            raise ValidationError(f"patch gammas must be positive, got ({self.gamma_x}, {self.gamma_y})")


def patch_offsets(p: int, gamma_x: float, gamma_y: float, height: int, width: int) -> np.ndarray:
    """[p, p, 2] offsets (dx, dy); sample (k, l) sits (l - c, k - c) gamma-scaled pixels from the query."""
    steps = np.arange(p, dtype=np.float64) - (p - 1) / 2.0
    dx = steps[None, :] * gamma_x * 2.0 / width
    dy = steps[:, None] * gamma_y * 2.0 / height
    return np.stack(np.broadcast_arrays(dx, dy), axis=-1)


class _Stencil:
    """Precomputed 4x4 gather pattern for a set of sample points on a [B, H, W, C] stack."""

    def __init__(self, points: np.ndarray, height: int, width: int, order_x: int, order_y: int):
        # points: [B, S, 2]
        self.batch = points.shape[0]
        self.rows, self.wy, knot_y = _axis_terms(points[..., 1], height, order_y)
        self.cols, self.wx, knot_x = _axis_terms(points[..., 0], width, order_x)
        self.on_knot = (knot_x & (order_x == 2)) | (knot_y & (order_y == 2))
        self.b_idx = np.arange(self.batch)[:, None, None, None]

    def gather(self, images: np.ndarray) -> np.ndarray:
        taps = images[self.b_idx, self.rows[..., :, None], self.cols[..., None, :]]
        out = np.einsum('bsa,bsn,bsanc->bsc', self.wy, self.wx, taps)
        return out.astype(images.dtype)

    def scatter(self, grad: np.ndarray, image_shape: Tuple[int, ...]) -> np.ndarray:
        contrib = self.wy[..., :, None, None] * self.wx[..., None, :, None] * grad[..., None, None, :]
        out = np.zeros(image_shape, dtype=np.float64)
        np.add.at(out, (np.broadcast_to(self.b_idx, self.rows.shape[:2] + (4, 4)),
                        np.broadcast_to(self.rows[..., :, None], self.rows.shape[:2] + (4, 4)),
                        np.broadcast_to(self.cols[..., None, :], self.rows.shape[:2] + (4, 4))), contrib)
        return out.astype(grad.dtype)


def _as_stack(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim == 3:
        values = values[None]
    if values.ndim != 4 or min(values.shape) < 1:
        raise ShapeError(f"expected an image stack [B, H, W, C], got {values.shape}")
    return values


def _as_points(coords: np.ndarray, batch: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim == 1:
        coords = coords[None, None, :]
    elif coords.ndim == 2:
        coords = np.broadcast_to(coords[None], (batch,) + coords.shape)
    if coords.shape[-1] != 2 or coords.shape[0] != batch:
        raise ShapeError(f"coordinates of shape {coords.shape} do not fit {batch} images")
    return coords


def sample_points(images: np.ndarray, coords: np.ndarray, kind: str = 'value') -> np.ndarray:
    """Sample a [B, H, W, C] stack at [B, M, 2] (or shared [M, 2]) coordinates -> [B, M, C]."""
    images = _as_stack(images)
    points = _as_points(coords, images.shape[0])
    order_x, order_y = ORDERS[kind]
    return _Stencil(points, images.shape[1], images.shape[2], order_x, order_y).gather(images.astype(np.float64))


def sample_bicubic(img: ImageGrid, coord, order: int = 0) -> np.ndarray:
    """
    Sample one image at (x, y).

    order 0 -> [C] value; order 1 -> [2, C] (d/dx, d/dy); order 2 -> [2, C] (d2/dx2, d2/dy2).
    Accepts a single (x, y) or an [M, 2] array, in which case a leading M axis is added.
    """
    if order not in (0, 1, 2):
        raise ValidationError(f"sampling order must be 0, 1 or 2, got {order}")
    coords = np.asarray(coord, dtype=np.float64)
    single = coords.ndim == 1
    coords = coords.reshape(-1, 2)
    if order == 0:
        out = sample_points(img.values, coords, 'value')[0]
    else:
        kinds = ('dx', 'dy') if order == 1 else ('dxx', 'dyy')
        out = np.stack([sample_points(img.values, coords, k)[0] for k in kinds], axis=1)
    out = out.astype(np.float32)
    return out[0] if single else out


def extract_patch(img: ImageGrid, coord, spec: PatchSpec, jacobian: bool = False):
    """
    [p, p, C] patch around (x, y); with jacobian=True also returns d(patch)/d(coord) as [p, p, C, 2].

    The central sample equals sample_bicubic(img, coord).
    """
    coord = np.asarray(coord, dtype=np.float64).reshape(2)
    offsets = patch_offsets(spec.p, spec.gamma_x, spec.gamma_y, img.height, img.width)
    points = (coord + offsets).reshape(1, -1, 2)
    patch = sample_points(img.values, points, 'value')[0].reshape(spec.p, spec.p, -1).astype(np.float32)
    if not jacobian:
        return patch
    jac = np.stack([sample_points(img.values, points, k)[0].reshape(spec.p, spec.p, -1)
                    for k in ('dx', 'dy')], axis=-1)
    return patch, jac.astype(np.float32)


class PatchSample(Function):
    """
    Batched patch extraction as a tape node.

    Inputs: images [B, H, W, C] and gammas [2]. Output: [B * M, C, p, p] patches of the
    requested kind ('value' or a coordinate derivative). Linear in the image values; the
    gamma gradient is provided for value patches only.
    """

    def forward(self, images, gammas, coords=None, p=9, kind='value'):
        self.p = p
        self.kind = kind
        batch, height, width, channels = images.shape
        points = _as_points(coords, batch)
        self.m = points.shape[1]
        self.height, self.width = height, width
        offsets = patch_offsets(p, float(gammas[0]), float(gammas[1]), height, width)
        self.steps = offsets / np.array([float(gammas[0]), float(gammas[1])])
        self.points = (points[:, :, None, None, :] + offsets[None, None]).reshape(batch, -1, 2)
        order_x, order_y = ORDERS[kind]
        self.stencil = _Stencil(self.points, height, width, order_x, order_y)
        values = self.stencil.gather(images.astype(np.float64))
        return self._to_patches(values).astype(images.dtype)

    def _to_patches(self, values: np.ndarray) -> np.ndarray:
        batch, _, channels = values.shape
        patches = values.reshape(batch, self.m, self.p, self.p, channels)
        return patches.transpose(0, 1, 4, 2, 3).reshape(batch * self.m, channels, self.p, self.p)

    def _from_patches(self, grad: np.ndarray) -> np.ndarray:
        channels = grad.shape[1]
        batch = grad.shape[0] // self.m
        patches = grad.reshape(batch, self.m, channels, self.p, self.p).transpose(0, 1, 3, 4, 2)
        return patches.reshape(batch, self.m * self.p * self.p, channels)

    def backward(self, grad):
        images, gammas = self.tensors
        flat = self._from_patches(grad.astype(np.float64))
        g_img = self.stencil.scatter(flat, images.shape) if images.requires_grad else None
        g_gamma = None
        if gammas.requires_grad and self.kind == 'value':
            data = images.data.astype(np.float64)
            g_gamma = np.zeros(2, dtype=np.float64)
            for axis, kind in enumerate(('dx', 'dy')):
                order_x, order_y = ORDERS[kind]
                deriv = _Stencil(self.points, self.height, self.width, order_x, order_y).gather(data)
                step = np.broadcast_to(self.steps[..., axis].reshape(1, 1, -1, 1),
                                       (deriv.shape[0], self.m, self.p * self.p, 1)).reshape(deriv.shape[0], -1, 1)
                g_gamma[axis] = np.sum(flat * deriv * step)
        return g_img, g_gamma


def sample_patches(images: Tensor, gammas: Tensor, coords: np.ndarray, p: int = 9,
                   kind: str = 'value') -> Tensor:
    if kind not in ORDERS:
        raise ValidationError(f"unknown patch kind '{kind}', expected one of {sorted(ORDERS)}")
    return PatchSample.apply(as_tensor(images), as_tensor(gammas), coords=coords, p=p, kind=kind)


def project_gammas(gammas: Tensor, minimum: float = GAMMA_MIN) -> None:
    """Keep the receptive-field scales positive after an optimizer step."""
    if np.any(gammas.data < minimum):
        logger.debug("projecting gammas %s onto [%g, inf)", gammas.data, minimum)
        np.maximum(gammas.data, minimum, out=gammas.data)


def patch_knot_mask(coords: np.ndarray, spec: PatchSpec, height: int, width: int) -> np.ndarray:
    """Per coordinate: does any sample of its patch sit exactly on a pixel center (a second-order knot)?"""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    offsets = patch_offsets(spec.p, spec.gamma_x, spec.gamma_y, height, width)
    points = coords[:, None, None, :] + offsets[None]
    _, _, knot_x = _axis_terms(points[..., 0], width, 0)
    _, _, knot_y = _axis_terms(points[..., 1], height, 0)
    return np.any(knot_x | knot_y, axis=(1, 2))
