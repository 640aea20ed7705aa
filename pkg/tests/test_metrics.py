import json

import numpy as np
import pytest

from errors import ShapeError, ValidationError
from metrics import (SNR_CAP_DB, affine_fit, bilinear_upsample, derivative_report, si_snr, snr, superres_report,
                     write_reports, write_trace)
from models import Dataset, ImageGrid, MetricReport
from synth_data.generators import gaussian_dataset


def test_snr_of_a_one_percent_error():
    """|e|^2 = 0.01 |x|^2 is 20 dB."""
    x = np.zeros(10)
    x[0] = 1.0
    x_hat = x.copy()
    x_hat[1] = 0.1
    assert snr(x_hat, x) == pytest.approx(20.0)


def test_snr_is_capped_and_checks_inputs():
    """A perfect estimate scores the cap; zero references and shape mismatches are refused."""
    x = np.linspace(0, 1, 5)
    assert snr(x, x) == SNR_CAP_DB
    with pytest.raises(ValidationError):
        snr(x, np.zeros(5))
    with pytest.raises(ShapeError):
        snr(x, np.zeros(4))


def test_si_snr_ignores_scale_and_shift(rng):
    """si-SNR of a x + b equals si-SNR of x."""
    x = rng.uniform(0, 1, size=100)
    x_hat = x + rng.normal(0, 0.05, size=100)
    assert si_snr(3.0 * x_hat - 0.7, x) == pytest.approx(si_snr(x_hat, x), abs=1e-9)
    assert si_snr(x_hat, x) >= snr(x_hat, x) - 1e-9


def test_affine_fit_recovers_coefficients(rng):
    """An exact affine map is found."""
    x_hat = rng.uniform(0, 1, size=50)
    a, b = affine_fit(x_hat, 2.0 * x_hat + 0.5)
    assert (a, b) == (pytest.approx(2.0), pytest.approx(0.5))


def test_bilinear_upsample_keeps_constants_and_ramps():
    """Constants stay constant; interior samples of a ramp stay on the ramp."""
    const = bilinear_upsample(ImageGrid(np.full((4, 4, 1), 0.3)), 8)
    assert np.allclose(const.values, 0.3)
    ramp = ImageGrid(np.tile(np.arange(4, dtype=float), (4, 1)))
    up = bilinear_upsample(ramp, 8).values[0, :, 0]
    assert np.allclose(np.diff(up[1:-1]), 0.5)


def test_superres_report_layout(fresh_model):
    """Reports hold one value per image and scale, with hierarchical entries when requested."""
    dataset = gaussian_dataset(count=2, n=16, seed=0)
    reports = superres_report(fresh_model, dataset, scales=(2.0, 4.0), hierarchical_factor=2)
    assert set(reports) == {'funknn_x2', 'bilinear_x2', 'hierarchical_x2', 'funknn_x4', 'bilinear_x4',
                            'hierarchical_x4'}
    assert all(len(r.values) == 2 for r in reports.values())
    assert reports['hierarchical_x2'].values == reports['funknn_x2'].values


def test_derivative_report_needs_analytic_ground_truth(fresh_model, phantom64):
    """Items without Gaussian specs cannot be scored."""
    with pytest.raises(ValidationError):
        derivative_report(fresh_model, Dataset([phantom64]), lr_size=32)
    reports = derivative_report(fresh_model, gaussian_dataset(count=1, n=32, seed=0), lr_size=16)
    assert set(reports) == {'image', 'gradient', 'laplacian'}
    assert reports['image'].aggregate > reports['laplacian'].aggregate


def test_write_reports_and_trace(tmp_path):
    """CSV per item plus JSON aggregates; traces take the union of row keys."""
    report = MetricReport.from_values('snr', [10.0, 20.0], scale=2)
    write_reports([report], tmp_path, stem='sr', kind='gaussian')
    assert (tmp_path / 'sr.csv').read_text().splitlines()[0] == 'item,snr'
    summary = json.loads((tmp_path / 'sr.json').read_text())
    assert summary['reports'][0]['mean'] == pytest.approx(15.0)
    assert summary['metadata'] == {'kind': 'gaussian'}
    path = write_trace([{'step': 0, 'loss': 1.0}, {'step': 1, 'loss': 0.5, 'best': 0.5}], tmp_path / 't.csv')
    assert path.read_text().splitlines()[0] == 'step,loss,best'
