import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from autodiff.optim import Adam
from autodiff.tensor import Tensor
from errors import ConfigValidationError, NumericalError, ValidationError
from metrics import write_trace
from models import Dataset
from prior.autoencoder import Autoencoder, reconstruction_loss
from prior.flow import Flow
from synth_data.generators import area_resize

logger = logging.getLogger(__name__)

ACTNORM_INIT_BATCH = 512


@dataclass
class PriorConfig:
    image_size: int = 32
    latent_dim: int = 64
    base_channels: int = 16
    ae_steps: int = 3000
    ae_batch: int = 16
    ae_lr: float = 1e-3
    grad_weight: float = 0.1
    flow_blocks: int = 5
    flow_hidden: List[int] = field(default_factory=lambda: [128, 64])
    flow_steps: int = 3000
    flow_batch: int = 64
    flow_lr: float = 1e-3
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.latent_dim < 1 or self.flow_blocks < 1:
            raise ConfigValidationError("latent_dim and flow_blocks must be positive")
        if self.grad_weight < 0:
            raise ConfigValidationError(f"grad_weight must be >= 0, got {self.grad_weight}")

    @classmethod
    def from_run_config(cls, run_config, **overrides: Any) -> "PriorConfig":
        section = dict(run_config['prior'])
        values = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        values['image_size'] = int(run_config['funknn']['d'])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def prepare_images(dataset: Dataset, size: int) -> np.ndarray:
    """[N, C, size, size] stack; area-resized when the dataset is stored at another resolution."""
    if len(dataset) == 0:
        raise ValidationError("cannot train a prior on an empty dataset")
    if dataset.resolution != size:
        logger.info("resizing %d images from %d^2 to %d^2 for the prior", len(dataset), dataset.resolution, size)
        images = [area_resize(img, size) for img in dataset.images]
    else:
        images = dataset.images
    return np.stack([img.channels_first() for img in images])


def _check_loss(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        logger.error("%s training diverged at step %d", what, step)
        raise NumericalError(f"{what} loss is {value} at step {step}")


def train_ae(dataset: Dataset, cfg: PriorConfig, out_dir: Union[str, Path, None] = None) -> Tuple[Autoencoder, List[Dict]]:
    """Adam on MSE + grad_weight * gradient-matching reconstruction loss."""
    stack = prepare_images(dataset, cfg.image_size)
    ae = Autoencoder(cfg.image_size, stack.shape[1], cfg.latent_dim, cfg.base_channels, seed=cfg.seed)
    optimizer = Adam(ae.parameters(), lr=cfg.ae_lr)
    trace = []
    logger.info("training autoencoder: %d steps, L=%d", cfg.ae_steps, cfg.latent_dim)
    for step in range(cfg.ae_steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(len(stack), size=cfg.ae_batch, replace=len(stack) < cfg.ae_batch)
        x = Tensor(stack[idx])
        optimizer.zero_grad()
        loss = reconstruction_loss(ae.decode_tensor(ae.encode_tensor(x)), x, cfg.grad_weight)
        value = loss.item()
        _check_loss(value, 'autoencoder', step)
        loss.backward()
        optimizer.step()
        trace.append({'step': step, 'phase': 'ae', 'loss': value})
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("ae step %d loss %.6g", step, value)
    if out_dir is not None:
        write_trace(trace, Path(out_dir) / 'ae_trace.csv')
    return ae, trace


def train_flow(latents: np.ndarray, cfg: PriorConfig, out_dir: Union[str, Path, None] = None) -> Tuple[Flow, List[Dict]]:
    """Maximum likelihood under a standard-normal base; actnorms are initialized from the data first."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise ValidationError(f"need at least two latent vectors [N, L], got {latents.shape}")
    flow = Flow(latents.shape[1], cfg.flow_blocks, cfg.flow_hidden, seed=cfg.seed)
    init_rng = np.random.default_rng(cfg.seed)
    init_idx = init_rng.permutation(len(latents))[:ACTNORM_INIT_BATCH]
    flow.data_init(latents[init_idx])
    optimizer = Adam(flow.parameters(), lr=cfg.flow_lr)
    trace = []
    logger.info("training flow: %d steps, %d blocks", cfg.flow_steps, cfg.flow_blocks)
    for step in range(cfg.flow_steps):
        rng = np.random.default_rng([cfg.seed, step])
        idx = rng.choice(len(latents), size=cfg.flow_batch, replace=len(latents) < cfg.flow_batch)
        optimizer.zero_grad()
        loss = flow.nll(Tensor(latents[idx]))
        value = loss.item()
        _check_loss(value, 'flow', step)
        loss.backward()
        optimizer.step()
        trace.append({'step': step, 'phase': 'flow', 'loss': value})
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("flow step %d nll %.6g", step, value)
    if out_dir is not None:
        write_trace(trace, Path(out_dir) / 'flow_trace.csv')
    return flow, trace


def mean_nll(flow: Flow, latents: np.ndarray) -> float:
    return flow.nll(Tensor(np.asarray(latents))).item()
