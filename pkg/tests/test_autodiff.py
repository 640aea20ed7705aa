import json

import numpy as np
import pytest

from autodiff.checkpoint import Checkpoint
from autodiff.functional import Module, apply_linear, concat, conv2d, max_pool2d, relu, same_padding, upsample_nearest
from autodiff.optim import AdamState, adam_step, sgd_step
from autodiff.tensor import Tensor, precision
from errors import CheckpointError, NumericalError, ShapeError, UnsupportedFormatError


def test_matmul_tanh_gradient(rng, numeric_grad):
    """Gradient of sum(tanh(x @ W)) w.r.t. W matches central differences."""
    with precision(np.float64):
        x = Tensor(rng.standard_normal((5, 4)))
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        (x @ w).tanh().sum().backward()
        expected = numeric_grad(lambda: float(np.tanh(x.data @ w.data).sum()), w.data)
    assert np.allclose(w.grad, expected, rtol=1e-5, atol=1e-8)


def test_conv2d_gradients(rng, numeric_grad):
    """Strided and padded conv: input, weight and bias gradients."""
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 2, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)
        weights = rng.standard_normal((2, 4, 3, 3))

        def loss():
            out = conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride=2, padding=(0, 1, 0, 1))
            return float((out.data * weights).sum())

        (conv2d(x, w, b, stride=2, padding=(0, 1, 0, 1)) * weights).sum().backward()
        for leaf in (x, w, b):
            assert np.allclose(leaf.grad, numeric_grad(loss, leaf.data), rtol=1e-5, atol=1e-7)


def test_same_padding_keeps_size():
    """Even kernels pad one extra row and column at the bottom/right."""
    assert same_padding(2) == (0, 1, 0, 1)
    assert same_padding(3) == (1, 1, 1, 1)
    x = Tensor(np.ones((1, 1, 5, 5)))
    out = conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)), padding=same_padding(2))
    assert out.shape == (1, 1, 5, 5)
    # bottom-right corner only sees one real pixel
    assert out.data[0, 0, -1, -1] == pytest.approx(1.0)
    assert out.data[0, 0, 0, 0] == pytest.approx(4.0)


def test_max_pool_routes_gradient_to_maximum():
    """Only the argmax of each 2x2 window receives gradient."""
    x = Tensor(np.array([[[[1.0, 5.0], [3.0, 2.0]]]]), requires_grad=True)
    max_pool2d(x).sum().backward()
    assert np.array_equal(x.grad, np.array([[[[0.0, 1.0], [0.0, 0.0]]]]))


def test_relu_and_upsample_gradients():
    """Nearest upsampling sums gradients over each block; ReLU masks negatives."""
    x = Tensor(np.array([[[[-1.0, 2.0]]]]), requires_grad=True)
    upsample_nearest(relu(x), 2).sum().backward()
    assert np.array_equal(x.grad, np.array([[[[0.0, 4.0]]]]))


def test_concat_and_getitem_split_gradients():
    """Concat and slicing pass gradients to the right slots."""
    a = Tensor(np.ones((2, 1)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    joined = concat([a, b], axis=1)
    (joined[:, 1:] * 3.0).sum().backward()
    assert np.array_equal(a.grad, np.zeros((2, 1)))
    assert np.array_equal(b.grad, np.full((2, 2), 3.0))


def test_linear_operator_uses_adjoint(rng):
    """apply_linear backpropagates through the supplied adjoint."""
    m = rng.standard_normal((3, 4))
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    y = apply_linear(x, lambda v: m @ v, lambda g: m.T @ g)
    g = rng.standard_normal(3)
    y.backward(g)
    assert np.allclose(x.grad, m.T @ g, atol=1e-5)


def test_non_finite_forward_raises():
    """NaN produced in a forward pass is reported, not propagated."""
    with pytest.raises(NumericalError):
        with np.errstate(invalid='ignore'):
            Tensor(np.array([-1.0]), requires_grad=True).sqrt()


def test_backward_requires_scalar_root():
    """A non-scalar root needs an explicit seed gradient."""
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_adam_first_step_moves_by_lr():
    """With bias correction the first Adam step has magnitude lr per coordinate."""
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.fresh([p], lr=0.1)
    adam_step([p], [np.array([0.5, -3.0])], state)
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-6)
    assert state.step_count == 1


def test_sgd_step_skips_missing_gradients():
    """Plain gradient descent; None leaves the parameter untouched."""
    a = Tensor(np.array([1.0, 1.0]))
    b = Tensor(np.array([2.0]))
    sgd_step([a, b], [np.array([1.0, -1.0]), None], lr=0.5)
    assert np.allclose(a.data, [0.5, 1.5])
    assert np.allclose(b.data, [2.0])


def test_checkpoint_save_and_load(tmp_path, rng):
    """Names, order, shapes and values survive a save/load."""
    params = {'conv1/weight': rng.standard_normal((2, 1, 2, 2)), 'fc/bias': rng.standard_normal(3)}
    Checkpoint('funknn', {'width': 2}, params, {'step': 7}).save(tmp_path / 'ckpt')
    loaded = Checkpoint.load(tmp_path / 'ckpt', kind='funknn')
    assert list(loaded.params) == ['conv1/weight', 'fc/bias']
    assert np.allclose(loaded.params['conv1/weight'], params['conv1/weight'].astype(np.float32))
    assert loaded.metadata == {'step': 7}
    assert loaded.parameter_count() == 11


def test_checkpoint_rejects_wrong_kind_and_version(tmp_path):
    """Kind mismatch and unknown format versions are refused."""
    path = Checkpoint('flow', {}, {'w': np.zeros(2)}).save(tmp_path / 'ckpt')
    with pytest.raises(CheckpointError):
        Checkpoint.load(path, kind='funknn')
    manifest = json.loads((path / 'manifest.json').read_text())
    manifest['format_version'] = 99
    (path / 'manifest.json').write_text(json.dumps(manifest))
    with pytest.raises(UnsupportedFormatError):
        Checkpoint.load(path)


def test_module_state_dict_mismatch():
    """Loading a state with missing or reshaped tensors fails loudly."""
    module = Module()
    module.add_param('a', np.zeros(3))
    module.add_param('b', np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        module.load_state_dict({'a': np.zeros(3)})
    with pytest.raises(ShapeError):
        module.load_state_dict({'a': np.zeros(3), 'b': np.zeros(4)})
    module.load_state_dict({'a': np.ones(3), 'b': np.ones((2, 2))})
    assert module.parameter_count() == 7
    assert np.all(module['a'].data == 1.0)
