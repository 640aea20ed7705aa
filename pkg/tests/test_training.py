import logging

import numpy as np
import pytest

from errors import ConfigValidationError, ValidationError
from funknn.model import FunkNN
from funknn.sampler import sample_points
from funknn.training import TrainConfig, batch_loss, canonical_order, hierarchical_superres, make_batch, train

from metrics import derivative_report, superres_report
from models import ImageGrid
from synth_data.generators import gaussian_dataset


@pytest.fixture
def small_dataset():
    return gaussian_dataset(count=4, n=16, seed=2)


def _tiny_config(**overrides):
    values = dict(mode='single', n=16, d=8, patch=5, pixels_per_batch=16, images_per_batch=2,
                  steps=3, checkpoint_every=2, log_every=1, lr=1e-3)
    values.update(overrides)
    return TrainConfig(**values)


def test_config_rejects_unknown_mode():
    """Only single, continuous and factor are accepted."""
    with pytest.raises(ConfigValidationError):
        TrainConfig(mode='random')


def test_factor_sizes_respect_the_target_resolution():
    """d runs over [d_min, d_max] in d_step and d * s never exceeds n."""
    cfg = TrainConfig(mode='factor', n=64, d_min=16, d_max=40, d_step=8, s=2.0)
    assert cfg.factor_sizes() == [(16, 32), (24, 48), (32, 64)]
    with pytest.raises(ConfigValidationError):
        TrainConfig(mode='factor', n=16, d_min=16, d_max=32, s=2.0)


def test_single_mode_defaults_to_half_resolution():
    """d defaults to n / 2."""
    assert TrainConfig(mode='single', n=64, d=None).d == 32


def test_batches_share_one_size_draw(small_dataset):
    """Every image of a batch uses the same (d, target) pair."""
    cfg = _tiny_config(mode='factor', d_min=4, d_max=8, d_step=4, s=2.0, images_per_batch=3)
    batch = make_batch(small_dataset, cfg, np.random.default_rng(0))
    assert batch.img_lr.shape == (3, batch.d, batch.d, 1)
    assert batch.coords.shape == (3, 16, 2)
    assert batch.targets.shape == (3, 16, 1)
    assert batch.target_size == 2 * batch.d


def test_continuous_mode_draws_scales_in_range(small_dataset):
    """Drawn scales stay inside [s_min, s_max] up to rounding of d."""
    cfg = _tiny_config(mode='continuous', s_min=1.25, s_max=4.0)
    for seed in range(10):
        batch = make_batch(small_dataset, cfg, np.random.default_rng(seed))
        assert 4 <= batch.d <= 13
        assert batch.target_size == 16


def test_batch_rejects_wrong_resolution(small_dataset):
    """The dataset must be at the configured n."""
    with pytest.raises(ValidationError):
        make_batch(small_dataset, _tiny_config(n=32, d=8), np.random.default_rng(0))


def test_batch_loss_is_finite(small_dataset):
    """The loss is finite and non-negative."""
    batch = make_batch(small_dataset, _tiny_config(), np.random.default_rng(0))
    loss = batch_loss(FunkNN(channels=1, p=5, width=4), batch)
    assert np.isfinite(loss.item()) and loss.item() >= 0.0


def test_canonical_order_ignores_input_order(small_dataset):
    """Shuffling the dataset does not change the canonical order."""
    shuffled = small_dataset.subset([3, 1, 0, 2])
    a = canonical_order(small_dataset)
    b = canonical_order(shuffled)
    assert all(np.array_equal(x.values, y.values) for x, y in zip(a.images, b.images))


def test_train_writes_checkpoints_and_trace(tmp_path, small_dataset):
    """A short run leaves step, best and final checkpoints plus loss_trace.csv."""
    result = train(small_dataset, _tiny_config(), tmp_path, model=FunkNN(channels=1, p=5, width=4))
    assert len(result.trace) == 3
    assert (tmp_path / 'step_000002' / 'manifest.json').is_file()
    assert (tmp_path / 'final' / 'manifest.json').is_file()
    assert (tmp_path / 'best' / 'manifest.json').is_file()
    assert (tmp_path / 'loss_trace.csv').read_text().startswith('step,loss')
    assert result.best_loss == min(row['loss'] for row in result.trace)
    assert np.all(result.model.gammas.data > 0)


def test_train_is_deterministic(small_dataset):
    """Same seed, same data, same losses."""
    first = train(small_dataset, _tiny_config(), model=FunkNN(channels=1, p=5, width=4, seed=1))
    second = train(small_dataset, _tiny_config(), model=FunkNN(channels=1, p=5, width=4, seed=1))
    assert [r['loss'] for r in first.trace] == [r['loss'] for r in second.trace]


def test_hierarchical_warns_on_mode_mismatch(tiny_model, caplog):
    """A continuous checkpoint still runs, with a warning."""
    tiny_model.metadata = {'mode': 'continuous', 's': None}
    img = ImageGrid(np.zeros((4, 4, 1)))
    with caplog.at_level(logging.WARNING):
        outputs = hierarchical_superres(tiny_model, img, 2.0, 1)
    assert outputs[-1].height == 8
    assert 'continuous' in caplog.text


@pytest.mark.slow
def test_factor_training_reduces_the_loss(tmp_path):
    """A few hundred factor-mode steps on Gaussians bring the loss well below its start."""
    dataset = gaussian_dataset(count=40, n=32, seed=0)
    cfg = TrainConfig(mode='factor', n=32, d_min=16, d_max=16, s=2.0, pixels_per_batch=128, images_per_batch=8,
                      steps=300, lr=1e-3, checkpoint_every=0, log_every=50)
    result = train(dataset, cfg, tmp_path)
    assert result.best_loss < result.trace[0]['loss']
    assert (tmp_path / 'best' / 'manifest.json').is_file()


def test_one_step_updates_the_gammas(small_dataset):
    """A single Adam step backpropagates into the patch gammas and moves them."""
    model = FunkNN(channels=1, p=5, width=4, seed=1)
    rng = np.random.default_rng(0)
    head = model['head/weight']
    head.data = (rng.standard_normal(head.shape) * 0.3).astype(head.data.dtype)
    before = model.gammas.data.copy()
    result = train(small_dataset, _tiny_config(steps=1), model=model)
    assert len(result.trace) == 1
    assert model.gammas.grad is not None and np.all(np.isfinite(model.gammas.grad))
    assert not np.array_equal(model.gammas.data, before)


def test_step_zero_loss_is_the_bicubic_error(small_dataset):
    """Before any update the loss is the MSE of plain bicubic interpolation."""
    batch = make_batch(small_dataset, _tiny_config(), np.random.default_rng(3))
    loss = batch_loss(FunkNN(channels=1, p=5, width=4, seed=0), batch).item()
    bicubic = sample_points(batch.img_lr, batch.coords)
    assert loss == pytest.approx(float(np.mean((bicubic - batch.targets) ** 2)), rel=1e-4)


@pytest.mark.slow
def test_desk_model_derivative_snr(desk_funknn, desk_gaussians):
    """Held-out Gaussians at 2x: image >= 40 dB, gradient >= 20 dB, Laplacian >= 8 dB, in that order."""
    reports = derivative_report(desk_funknn, desk_gaussians.test_set(), lr_size=32, chunk_size=512)
    image, gradient, laplacian = (reports[k].aggregate for k in ('image', 'gradient', 'laplacian'))
    assert image >= 40.0
    assert gradient >= 20.0
    assert laplacian >= 8.0
    assert image > gradient > laplacian


@pytest.mark.slow
def test_desk_model_beats_bilinear(desk_funknn, desk_gaussians):
    """At least 1 dB over bilinear at 2x and 0.5 dB at hierarchical 4x."""
    reports = superres_report(desk_funknn, desk_gaussians.test_set(), scales=(2.0, 4.0),
                              hierarchical_factor=2, chunk_size=512)
    assert reports['funknn_x2'].aggregate >= reports['bilinear_x2'].aggregate + 1.0
    assert reports['hierarchical_x4'].aggregate >= reports['bilinear_x4'].aggregate + 0.5
