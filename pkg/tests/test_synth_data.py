import numpy as np
import pytest
from PIL import Image

from errors import ShapeError, UnsupportedFormatError, ValidationError
from models import GaussianSpec, ImageGrid, grid_coords
from synth_data.generators import (area_resize, derivative_observations, downsample, ellipse_phantom,
                                   gaussian_values, make_dataset)
from synth_data.image_io import (load_image, load_png, read_dataset, save_png, save_png_grid, save_raw, tile_grid,
                                 write_dataset)


def test_grid_coords_are_pixel_centers():
    """Centers of a 2x2 image sit at +/- 0.5, row-major over (row, col)."""
    assert np.allclose(grid_coords(2, 2), [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])


def test_gaussian_derivatives_match_finite_differences(gaussian_spec, rng):
    """Closed-form gradient and Laplacian agree with central differences."""
    coords = rng.uniform(-1, 1, size=(50, 2))
    _, grad, lap = gaussian_values(gaussian_spec, coords)
    h = 1e-5
    ex, ey = np.array([h, 0.0]), np.array([0.0, h])
    g0 = gaussian_values(gaussian_spec, coords)[0]
    fd_x = (gaussian_values(gaussian_spec, coords + ex)[0] - gaussian_values(gaussian_spec, coords - ex)[0]) / (2 * h)
    fd_y = (gaussian_values(gaussian_spec, coords + ey)[0] - gaussian_values(gaussian_spec, coords - ey)[0]) / (2 * h)
    assert np.allclose(grad, np.stack([fd_x, fd_y], axis=1), atol=1e-6)
    second = sum(gaussian_values(gaussian_spec, coords + e)[0] + gaussian_values(gaussian_spec, coords - e)[0] - 2 * g0
                 for e in (ex, ey)) / h ** 2
    assert np.allclose(lap, second, atol=1e-3)


def test_gaussian_spec_validation():
    """Widths outside [0.1, 0.4] and centers outside the field of view are rejected."""
    with pytest.raises(ValidationError):
        GaussianSpec(0.0, 0.0, 0.05)
    with pytest.raises(ValidationError):
        GaussianSpec(1.5, 0.0, 0.2)


def test_gaussian_field_layout(gaussian64):
    """Image peaks at one; the derivative field covers every pixel center."""
    img, field = gaussian64
    assert img.values.max() <= 1.0
    assert len(field) == 64 * 64 and field.grid_size == 64
    assert field.laplacians.shape == (64 * 64, 1)


def test_phantoms_are_seeded_and_bounded():
    """Same seed, same phantom; values stay in [0, 1]."""
    a = ellipse_phantom(seed=3, n=32)
    assert np.array_equal(a.values, ellipse_phantom(seed=3, n=32).values)
    assert not np.array_equal(a.values, ellipse_phantom(seed=4, n=32).values)
    assert a.values.min() >= 0.0 and a.values.max() <= 1.0


def test_area_resize_preserves_the_mean(phantom64):
    """Area weights conserve intensity at integral and fractional factors."""
    for size in (32, 24, 13):
        assert area_resize(phantom64, size).values.mean() == pytest.approx(phantom64.values.mean(), rel=1e-5)
    assert np.allclose(area_resize(phantom64, 16).values, downsample(phantom64, 4).values)
    with pytest.raises(ShapeError):
        downsample(phantom64, 5)


def test_derivative_observations_from_an_image(phantom64):
    """Image sources use the interpolant derivatives on the n x n grid."""
    field = derivative_observations(phantom64, 32)
    assert field.gradients.shape == (32 * 32, 2, 1)
    assert field.grid_size == 32
    with pytest.raises(ValidationError):
        derivative_observations('not an image', 32)


def test_dataset_directory_round_trip(tmp_path):
    """Images, split and Gaussian specs survive write and read."""
    dataset = make_dataset('gaussian', count=5, n=16, seed=1, test_count=2)
    write_dataset(dataset, tmp_path / 'data')
    loaded = read_dataset(tmp_path / 'data')
    assert loaded.train == [0, 1, 2] and loaded.test == [3, 4]
    assert loaded.specs[0] == dataset.specs[0]
    assert np.array_equal(loaded.images[4].values, dataset.images[4].values)
    with pytest.raises(ValidationError):
        read_dataset(tmp_path)


def test_unknown_dataset_kind():
    """Only gaussian and phantom families exist."""
    with pytest.raises(ValidationError):
        make_dataset('noise', count=1, n=8)


def test_png_quantizes_to_eight_bits(tmp_path, random_image):
    """PNG export rounds to 1/255; raw export is exact."""
    back = load_png(save_png(tmp_path / 'x.png', random_image))
    assert np.max(np.abs(back.values - random_image.values)) <= 0.5 / 255 + 1e-7
    exact = load_image(save_raw(tmp_path / 'x.bin', random_image))
    assert np.array_equal(exact.values, random_image.values)


def test_sixteen_bit_png_is_rejected(tmp_path):
    """Only 8-bit modes are supported."""
    path = tmp_path / 'deep.png'
    Image.fromarray(np.zeros((4, 4), dtype=np.uint16)).save(path)
    with pytest.raises(UnsupportedFormatError):
        load_png(path)


def test_rgb_images_keep_three_channels(tmp_path):
    """Color PNGs load as [H, W, 3]."""
    path = tmp_path / 'rgb.png'
    save_png(path, ImageGrid(np.full((4, 4, 3), 0.5)))
    assert load_png(path).channels == 3


def test_grid_tiles_row_major_with_white_gaps(tmp_path):
    """Five 4x4 images on three columns: two rows, one-pixel white separators, blank last cell."""
    images = [ImageGrid(np.full((4, 4, 1), k / 10.0)) for k in range(5)]
    grid = tile_grid(images, columns=3)
    assert grid.values.shape == (9, 14, 1)
    assert np.all(grid.values[5:9, 5:9] == np.float32(0.4))
    assert np.all(grid.values[4] == 1.0) and np.all(grid.values[:, 4] == 1.0)
    assert np.all(grid.values[5:9, 10:14] == 1.0)
    assert load_png(save_png_grid(tmp_path / 'grid.png', images)).values.shape == (9, 14, 1)


def test_grid_rejects_mixed_sizes():
    with pytest.raises(ValidationError):
        tile_grid([ImageGrid(np.zeros((4, 4, 1))), ImageGrid(np.zeros((8, 8, 1)))])
