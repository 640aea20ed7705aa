import logging
import math

import numpy as np
import pytest

from autodiff.tensor import Tensor, precision
from errors import ShapeError, UnsupportedFormatError, ValidationError
from inverse.radon import (RadonOperator, add_noise, angles_from_range, detector_count, fbp, full_view_angles,
                           fbp_warnings, load_sinogram, radon_adjoint, radon_forward, row_snr, save_sinogram)
from metrics import snr
from models import GaussianSpec, ImageGrid
from synth_data.generators import gaussian_image


def test_detector_count_spans_the_diagonal():
    """n_det = ceil(sqrt(2) n)"""
    assert detector_count(64) == 91
    assert detector_count(32) == 46


def test_zero_image_gives_zero_sinogram():
    """No mass, no projections."""
    sino = radon_forward(ImageGrid(np.zeros((16, 16, 1))), full_view_angles(12))
    assert sino.values.shape == (12, detector_count(16))
    assert not sino.values.any()


def test_forward_is_linear(rng):
    """R(a x + b y) = a R(x) + b R(y)"""
    angles = full_view_angles(20)
    x = rng.uniform(0, 1, size=(24, 24))
    y = rng.uniform(0, 1, size=(24, 24))
    op = RadonOperator(24, angles)
    combined = op.forward(2.0 * x - 0.5 * y)
    assert np.allclose(combined, 2.0 * op.forward(x) - 0.5 * op.forward(y), atol=1e-6)


def test_adjoint_inner_product(rng):
    """<R x, s> = <x, R^T s>"""
    op = RadonOperator(32, angles_from_range(-70, 70, 60))
    x = rng.standard_normal((32, 32))
    s = rng.standard_normal((60, op.n_det))
    lhs = np.sum(op.forward(x) * s)
    rhs = np.sum(x * op.adjoint(s))
    assert abs(lhs - rhs) <= 1e-4 * abs(lhs)


def test_projections_conserve_mass(gaussian64):
    """Every row integrates to the image integral."""
    img, _ = gaussian64
    sino = radon_forward(img, full_view_angles(8))
    mass = float(img.values.sum()) * (2.0 / 64) ** 2
    assert np.allclose(sino.values.sum(axis=1) * sino.detector_spacing, mass, rtol=1e-2)


def test_centered_gaussian_rows_agree():
    """A rotationally symmetric image projects the same at every angle."""
    img, _ = gaussian_image(GaussianSpec(0.0, 0.0, 0.2), 64)
    values = radon_forward(img, full_view_angles(16)).values
    assert np.max(np.abs(values - values[0])) <= 1e-2 * np.max(np.abs(values))


def test_differentiable_apply_matches_adjoint(rng):
    """apply() backpropagates R^T g."""
    op = RadonOperator(16, full_view_angles(10))
    with precision(np.float64):
        image = Tensor(rng.standard_normal((16, 16)), requires_grad=True)
        g = rng.standard_normal((10, op.n_det))
        op.apply(image).backward(g)
    assert np.allclose(image.grad, op.adjoint(g))


def test_fbp_round_trip_on_a_smooth_image(gaussian64):
    """Full-view FBP of a smooth image recovers it to >= 20 dB."""
    img, _ = gaussian64
    recon = fbp(radon_forward(img, full_view_angles(180)), window='ramlak')
    assert snr(recon, img) >= 20.0


def test_limited_view_is_worse_than_full_view(phantom64):
    """Removing the [70, 110] degree wedge costs FBP quality."""
    full = fbp(radon_forward(phantom64, full_view_angles(180)))
    limited = fbp(radon_forward(phantom64, angles_from_range(-70, 70, 60)))
    assert snr(limited, phantom64) < snr(full, phantom64)


def test_fbp_checks_detector_count(gaussian64):
    """A sinogram from another geometry is refused."""
    sino = radon_forward(gaussian64[0], full_view_angles(10))
    bad = sino.with_values(sino.values[:, :-1])
    with pytest.raises(ShapeError):
        fbp(bad)


def test_adjoint_of_sinogram(gaussian64):
    """radon_adjoint returns an n x n image."""
    sino = radon_forward(gaussian64[0], full_view_angles(10))
    assert radon_adjoint(sino).values.shape == (64, 64, 1)


def test_noise_hits_the_requested_row_snr(gaussian64):
    """Averaged over seeds, each row sits at 30 dB."""
    sino = radon_forward(gaussian64[0], angles_from_range(-70, 70, 60))
    measured = [row_snr(sino, add_noise(sino, 30.0, seed)).mean() for seed in range(20)]
    assert np.mean(measured) == pytest.approx(30.0, abs=0.5)


def test_noise_is_seeded_and_infinite_snr_is_clean(gaussian64):
    """Same seed, same noise; +inf leaves the data unchanged."""
    sino = radon_forward(gaussian64[0], full_view_angles(10))
    assert np.array_equal(add_noise(sino, 30.0, 4).values, add_noise(sino, 30.0, 4).values)
    assert not np.array_equal(add_noise(sino, 30.0, 4).values, add_noise(sino, 30.0, 5).values)
    assert np.array_equal(add_noise(sino, math.inf, 4).values, sino.values)
    with pytest.raises(ValidationError):
        add_noise(sino, math.nan, 4)


def test_sinogram_save_and_load(tmp_path, gaussian64):
    """Header and payload survive a round trip."""
    sino = add_noise(radon_forward(gaussian64[0], angles_from_range(-70, 70, 12)), 30.0, 1)
    loaded = load_sinogram(save_sinogram(sino, tmp_path / 'sino'))
    assert np.array_equal(loaded.values, sino.values)
    assert np.allclose(loaded.angles, sino.angles)
    assert loaded.metadata['snr_db'] == 30.0
    with pytest.raises(UnsupportedFormatError):
        load_sinogram(tmp_path / 'missing')


def test_empty_angle_list_is_rejected():
    """At least one projection angle is needed."""
    with pytest.raises(ValidationError):
        RadonOperator(16, [])
    with pytest.raises(ValidationError):
        angles_from_range(0, 10, 0)


def test_non_square_images_are_rejected():
    """The geometry assumes a square single-channel image."""
    with pytest.raises(ShapeError):
        radon_forward(ImageGrid(np.zeros((8, 16, 1))), full_view_angles(4))


def test_single_view_fbp_is_flagged(gaussian64, caplog):
    """One view still back-projects, but the condition is reported and logged."""
    sino = radon_forward(gaussian64[0], angles_from_range(0, 0, 1))
    assert fbp_warnings(sino) == ['single_view: the result is only a smeared back-projection']
    assert fbp_warnings(radon_forward(gaussian64[0], full_view_angles(4))) == []
    with caplog.at_level(logging.WARNING):
        recon = fbp(sino)
    assert recon.values.shape == (64, 64, 1)
    assert 'single_view' in caplog.text
