"""The low-resolution generator G(z) = decode(flow(z)) and its checkpoint bundle."""
import logging
from pathlib import Path
from typing import List, Union

import numpy as np

from autodiff.checkpoint import Checkpoint
from autodiff.tensor import Tensor
from errors import ShapeError
from metrics import snr
from models import Dataset, ImageGrid, MetricReport
from prior.autoencoder import Autoencoder
from prior.flow import Flow

logger = logging.getLogger(__name__)


class Prior:
    """Autoencoder + flow; stored as `ae/` and `flow/` checkpoints under one directory."""

    def __init__(self, ae: Autoencoder, flow: Flow):
        if ae.latent_dim != flow.dim:
            raise ShapeError(f"autoencoder latent dim {ae.latent_dim} != flow dim {flow.dim}")
        self.ae = ae
        self.flow = flow

    def __repr__(self):
        return f'<Prior {self.ae!r} + {self.flow!r}>'

    @property
    def latent_dim(self) -> int:
        return self.flow.dim

    @property
    def image_size(self) -> int:
        return self.ae.image_size

    def generate_tensor(self, z: Tensor) -> Tensor:
        """z [N, L] -> images [N, H, W, C] (sampler layout), differentiable in z and decoder weights."""
        w, _ = self.flow.forward_tensor(z)
        return self.ae.decode_tensor(w).transpose(0, 2, 3, 1)

    def clone(self) -> "Prior":
        """Independent copy; solvers fine-tune the copy and leave the loaded weights untouched."""
        ae = Autoencoder.from_checkpoint(self.ae.to_checkpoint())
        flow = Flow.from_checkpoint(self.flow.to_checkpoint())
        return Prior(ae, flow)

    def sample(self, count: int, seed: int) -> List[ImageGrid]:
        if count == 0:
            return []
        z = np.random.default_rng(seed).standard_normal((count, self.latent_dim))
        images = self.generate_tensor(Tensor(z)).data
        return [ImageGrid(img) for img in images]

    def save(self, directory: Union[str, Path], **metadata) -> Path:
        directory = Path(directory)
        self.ae.to_checkpoint(**metadata).save(directory / 'ae')
        self.flow.to_checkpoint(**metadata).save(directory / 'flow')
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "Prior":
        directory = Path(directory)
        ae = Autoencoder.from_checkpoint(Checkpoint.load(directory / 'ae', kind='autoencoder'))
        flow = Flow.from_checkpoint(Checkpoint.load(directory / 'flow', kind='flow'))
        return cls(ae, flow)


def encode(ae: Autoencoder, img: ImageGrid) -> np.ndarray:
    return ae.encode(img)


def decode(ae: Autoencoder, latent: np.ndarray) -> ImageGrid:
    return ae.decode(latent)


def generate(prior: Prior, z: Tensor) -> Tensor:
    return prior.generate_tensor(z)


def sample(ae: Autoencoder, fp: Flow, count: int, seed: int) -> List[ImageGrid]:
    return Prior(ae, fp).sample(count, seed)


def reconstruction_report(ae: Autoencoder, dataset: Dataset) -> MetricReport:
    """SNR of decode(encode(x)) against x for every item."""
    report = MetricReport('ae_snr', metadata={'latent_dim': ae.latent_dim, 'kind': dataset.kind})
    for idx, img in enumerate(dataset.images):
        report.add(snr(ae.decode(ae.encode(img)), img), str(idx))
    logger.info("%r", report)
    return report
