import numpy as np
import pytest
from click.testing import CliRunner

from app import create_app
from config import Config, RunConfig, TestingConfig
from extensions import pool
from funknn.model import FunkNN
from funknn.training import TrainConfig, train
from models import GaussianSpec, ImageGrid
from prior.autoencoder import Autoencoder
from prior.flow import Flow
from prior.generator import Prior
from prior.training import PriorConfig, prepare_images, train_ae, train_flow
from synth_data.generators import ellipse_phantom, gaussian_dataset, gaussian_image, phantom_dataset


@pytest.fixture
def app():
    """CLI group built with the testing configuration"""
    cli = create_app(config_object=TestingConfig)
    yield cli
    pool.resize(1)


@pytest.fixture
def runner():
    """click test runner"""
    return CliRunner()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    """32x32 single-channel image with values in [0, 1]"""
    return ImageGrid(rng.uniform(0.0, 1.0, size=(32, 32, 1)))


@pytest.fixture
def gaussian_spec():
    return GaussianSpec(x0=0.1, y0=-0.15, sigma=0.25)


@pytest.fixture
def gaussian64(gaussian_spec):
    """(image, derivative field) of the fixture Gaussian at 64x64"""
    return gaussian_image(gaussian_spec, 64)


@pytest.fixture
def phantom64():
    return ellipse_phantom(seed=7, n=64)


@pytest.fixture
def fresh_model():
    return FunkNN(channels=1, seed=0)


@pytest.fixture
def tiny_model():
    """Narrow FunkNN for tests that run the solvers"""
    return FunkNN(channels=1, p=5, width=4, seed=3)


@pytest.fixture
def tiny_prior():
    """Small untrained autoencoder + flow on 32x32 images"""
    ae = Autoencoder(image_size=32, channels=1, latent_dim=6, base_channels=2, seed=0)
    flow = Flow(dim=6, blocks=2, hidden=[8], seed=0)
    return Prior(ae, flow)


def _central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = f()
        flat[i] = keep - eps
        down = f()
        flat[i] = keep
        out[i] = (up - down) / (2.0 * eps)
    return grad


@pytest.fixture
def numeric_grad():
    """central differences of a scalar closure over an array that it reads in place"""
    return _central_difference


@pytest.fixture(scope='session')
def desk_config():
    """json/desk_config.json merged over the defaults"""
    return RunConfig.load(Config.DESK_RUN_CONFIG)


@pytest.fixture(scope='session')
def desk_gaussians(desk_config):
    data = desk_config['data']
    return gaussian_dataset(data['count'], data['n'], seed=0, test_count=data['test_count'])


@pytest.fixture(scope='session')
def desk_phantoms(desk_config):
    return phantom_dataset(205, desk_config['data']['n'], seed=1, test_count=5)


@pytest.fixture(scope='session')
def desk_funknn(desk_config, desk_gaussians, tmp_path_factory):
    """Factor-2 FunkNN trained with the desk configuration (several minutes)"""
    cfg = TrainConfig.from_run_config(desk_config)
    return train(desk_gaussians.train_set(), cfg, tmp_path_factory.mktemp('desk_funknn')).model


@pytest.fixture(scope='session')
def desk_phantom_funknn(desk_config, desk_phantoms):
    cfg = TrainConfig.from_run_config(desk_config, steps=1000)
    return train(desk_phantoms.train_set(), cfg).model


@pytest.fixture(scope='session')
def desk_prior(desk_config, desk_phantoms):
    """Autoencoder and flow trained on the desk phantoms"""
    cfg = PriorConfig.from_run_config(desk_config)
    train_set = desk_phantoms.train_set()
    ae, _ = train_ae(train_set, cfg)
    lowres = [ImageGrid.from_channels_first(x) for x in prepare_images(train_set, cfg.image_size)]
    flow, _ = train_flow(ae.encode_batch(lowres), cfg)
    return Prior(ae, flow)
