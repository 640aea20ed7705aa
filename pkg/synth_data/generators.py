"""Synthetic images: Gaussian bumps with closed-form derivatives, random ellipse phantoms, resampling."""
import logging
from typing import Optional, Tuple

import numpy as np

from errors import ShapeError, ValidationError
from funknn.sampler import sample_points
from models import Dataset, DerivativeField, GaussianSpec, ImageGrid, grid_coords

logger = logging.getLogger(__name__)

ELLIPSE_AXES = (0.1, 0.5)
ELLIPSE_INTENSITY = (0.1, 0.5)
ELLIPSE_CENTER = 0.6


def gaussian_values(spec: GaussianSpec, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """g, grad g [N, 2] and Laplacian of g at coords [N, 2], all in float64."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    dx = coords[:, 0] - spec.x0
    dy = coords[:, 1] - spec.y0
    r2 = dx * dx + dy * dy
    s2 = spec.sigma ** 2
    g = np.exp(-r2 / (2.0 * s2))
    grad = -np.stack([dx, dy], axis=1) * (g / s2)[:, None]
    lap = (r2 / s2 ** 2 - 2.0 / s2) * g
    return g, grad, lap


def gaussian_image(spec: GaussianSpec, n: int) -> Tuple[ImageGrid, DerivativeField]:
    if n < 4:
        raise ValidationError(f"gaussian images need n >= 4, got {n}")
    coords = grid_coords(n, n)
    g, grad, lap = gaussian_values(spec, coords)
    img = ImageGrid(g.reshape(n, n, 1))
    field = DerivativeField(coords, grad[:, :, None], lap[:, None], grid_size=n)
    return img, field


def ellipse_phantom(seed: int, n: int, k_ellipses: int = 6) -> ImageGrid:
    """Sum of k rotated ellipses with random intensities, clipped to [0, 1]."""
    if n < 1 or k_ellipses < 0:
        raise ValidationError(f"invalid phantom size {n} / ellipse count {k_ellipses}")
    rng = np.random.default_rng(seed)
    coords = grid_coords(n, n)
    x, y = coords[:, 0], coords[:, 1]
    out = np.zeros(n * n)
    for _ in range(k_ellipses):
        cx, cy = rng.uniform(-ELLIPSE_CENTER, ELLIPSE_CENTER, size=2)
        a, b = rng.uniform(*ELLIPSE_AXES, size=2)
        theta = rng.uniform(0.0, np.pi)
        value = rng.uniform(*ELLIPSE_INTENSITY)
        c, s = np.cos(theta), np.sin(theta)
        u = (x - cx) * c + (y - cy) * s
        v = -(x - cx) * s + (y - cy) * c
        out += value * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return ImageGrid(np.clip(out, 0.0, 1.0).reshape(n, n, 1))


def downsample(img: ImageGrid, factor: int) -> ImageGrid:
    """Non-overlapping box average."""
    if factor < 1 or img.height % factor or img.width % factor:
        raise ShapeError(f"factor {factor} does not divide {img.height}x{img.width}")
    if factor == 1:
        return ImageGrid(img.values.copy())
    h, w, c = img.values.shape
    blocks = img.values.astype(np.float64).reshape(h // factor, factor, w // factor, factor, c)
    return ImageGrid(blocks.mean(axis=(1, 3)))


def _area_matrix(size_in: int, size_out: int) -> np.ndarray:
    """[size_out, size_in] exact overlap weights of output cells against input pixels."""
    edges_out = np.arange(size_out + 1) * (size_in / size_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(size_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(1, size_in + 1)[None, :])
    return np.clip(hi - lo, 0.0, None) * (size_out / size_in)


def area_resize(img: ImageGrid, size: int) -> ImageGrid:
    """Area-weighted resampling to size x size; equals `downsample` when the factor is integral."""
    if size < 1:
        raise ShapeError(f"target size must be positive, got {size}")
    if img.height % size == 0 and img.width % size == 0 and img.height // size == img.width // size:
        return downsample(img, img.height // size)
    my = _area_matrix(img.height, size)
    mx = _area_matrix(img.width, size)
    values = np.einsum('ih,hwc,jw->ijc', my, img.values.astype(np.float64), mx)
    return ImageGrid(values)


def _split(count: int, test_count: int) -> Tuple[list, list]:
    if not 0 <= test_count <= count:
        raise ValidationError(f"test_count {test_count} outside [0, {count}]")
    return list(range(count - test_count)), list(range(count - test_count, count))


def gaussian_dataset(count: int, n: int, seed: int = 0, test_count: int = 0) -> Dataset:
    specs = [GaussianSpec.from_rng(np.random.default_rng([seed, i])) for i in range(count)]
    images = [gaussian_image(spec, n)[0] for spec in specs]
    train, test = _split(count, test_count)
    logger.info("generated %d gaussian images at %d^2 (seed %d)", count, n, seed)
    return Dataset(images, kind='gaussian', seed=seed, specs=specs, train=train, test=test)


def phantom_dataset(count: int, n: int, seed: int = 0, test_count: int = 0,
                    k_ellipses: int = 6) -> Dataset:
    images = [ellipse_phantom(int(np.random.default_rng([seed, i]).integers(2 ** 31)), n, k_ellipses)
              for i in range(count)]
    train, test = _split(count, test_count)
    logger.info("generated %d phantoms at %d^2 (seed %d)", count, n, seed)
    return Dataset(images, kind='phantom', seed=seed, train=train, test=test)


def make_dataset(kind: str, count: int, n: int, seed: int = 0, test_count: int = 0,
                 ellipses: int = 6, channels: Optional[int] = 1) -> Dataset:
    if channels not in (None, 1):
        raise ValidationError(f"synthetic generators produce 1 channel, got {channels}")
    if kind == 'gaussian':
        return gaussian_dataset(count, n, seed, test_count)
    if kind == 'phantom':
        return phantom_dataset(count, n, seed, test_count, ellipses)
    raise ValidationError(f"unknown dataset kind '{kind}', expected one of ['gaussian', 'phantom']")


def derivative_observations(source, n: int) -> DerivativeField:
    """
    Derivative field on the n x n pixel-center grid.

    A GaussianSpec uses the closed-form gradient and Laplacian; an ImageGrid uses the derivatives
    of its bicubic interpolant.
    """
    if isinstance(source, GaussianSpec):
        return gaussian_image(source, n)[1]
    if isinstance(source, ImageGrid):
        coords = grid_coords(n, n)
        stack = source.values[None]
        grad = np.stack([sample_points(stack, coords, k)[0] for k in ('dx', 'dy')], axis=1)
        lap = sample_points(stack, coords, 'dxx')[0] + sample_points(stack, coords, 'dyy')[0]
        return DerivativeField(coords, grad, lap, grid_size=n)
    raise ValidationError(f"cannot build derivative observations from {type(source).__name__}")
