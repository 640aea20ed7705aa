"""
Masked affine coupling flow on the autoencoder latent space.

The forward direction transports the Gaussian base variable z to a latent code w; each block
applies a coupling then an activation normalization. Inversion runs the blocks in reverse.
"""
import logging
import math
from typing import Dict, Sequence, Tuple

import numpy as np

from autodiff.checkpoint import Checkpoint
from autodiff.functional import Module, relu
from autodiff.tensor import Tensor
from errors import CheckpointError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'flow'
ACTNORM_EPS = 1e-6


def coupling_mask(dim: int, block: int) -> np.ndarray:
    """Alternating binary mask; entries with mask 1 pass through unchanged."""
    return ((np.arange(dim) + block) % 2).astype(np.float64)


class Flow(Module):

    def __init__(self, dim: int = 64, blocks: int = 5, hidden: Sequence[int] = (128, 64), seed: int = 0):
        super().__init__()
        self.dim = dim
        self.blocks = blocks
        self.hidden = list(hidden)
        self.initialized = False
        self.masks = [coupling_mask(dim, b) for b in range(blocks)]
        rng = np.random.default_rng(seed)
        sizes = [dim] + self.hidden
        for b in range(blocks):
            for j, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                self.add_param(f'block{b}/fc{j}/weight', rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in))
                self.add_param(f'block{b}/fc{j}/bias', np.zeros(n_out))
            # zero output layer: the coupling starts as the identity
            self.add_param(f'block{b}/out/weight', np.zeros((sizes[-1], 2 * dim)))
            self.add_param(f'block{b}/out/bias', np.zeros(2 * dim))
            self.add_param(f'block{b}/actnorm/loc', np.zeros(dim))
            self.add_param(f'block{b}/actnorm/log_scale', np.zeros(dim))

    def __repr__(self):
        return f'<Flow L={self.dim} blocks={self.blocks} hidden={self.hidden}>'

    def _scale_shift(self, b: int, x_masked: Tensor) -> Tuple[Tensor, Tensor]:
        p = self._params
        h = x_masked
        for j in range(len(self.hidden)):
            h = relu(h @ p[f'block{b}/fc{j}/weight'] + p[f'block{b}/fc{j}/bias'])
        out = h @ p[f'block{b}/out/weight'] + p[f'block{b}/out/bias']
        free = 1.0 - self.masks[b]
        s = out[:, :self.dim].tanh() * free
        t = out[:, self.dim:] * free
        return s, t

    def _check(self, x: Tensor) -> None:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"flow expects [N, {self.dim}], got {x.shape}")

    def forward_tensor(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        """z [N, L] -> (w [N, L], log|det dw/dz| [N])"""
        self._check(z)
        p = self._params
        x = z
        logdet = None
        for b in range(self.blocks):
            m = self.masks[b]
            s, t = self._scale_shift(b, x * m)
            x = x * m + (x * s.exp() + t) * (1.0 - m)
            log_scale = p[f'block{b}/actnorm/log_scale']
            x = x * log_scale.exp() + p[f'block{b}/actnorm/loc']
            term = s.sum(axis=1) + log_scale.sum()
            logdet = term if logdet is None else logdet + term
        return x, logdet

    def inverse_tensor(self, w: Tensor) -> Tuple[Tensor, Tensor]:
        """w [N, L] -> (z [N, L], log|det dz/dw| [N])"""
        self._check(w)
        p = self._params
        x = w
        logdet = None
        for b in reversed(range(self.blocks)):
            log_scale = p[f'block{b}/actnorm/log_scale']
            x = (x - p[f'block{b}/actnorm/loc']) * (-log_scale).exp()
            m = self.masks[b]
            s, t = self._scale_shift(b, x * m)
            x = x * m + ((x - t) * (-s).exp()) * (1.0 - m)
            term = -(s.sum(axis=1) + log_scale.sum())
            logdet = term if logdet is None else logdet + term
        return x, logdet

    def data_init(self, latents: np.ndarray) -> None:
        """Set every actnorm so its inverse output has zero mean and unit variance on `latents`."""
        x = np.asarray(latents, dtype=np.float64)
        for b in reversed(range(self.blocks)):
            loc = x.mean(axis=0)
            std = x.std(axis=0) + ACTNORM_EPS
            self[f'block{b}/actnorm/loc'].data = loc.astype(self[f'block{b}/actnorm/loc'].data.dtype)
            self[f'block{b}/actnorm/log_scale'].data = np.log(std).astype(self[f'block{b}/actnorm/loc'].data.dtype)
            x = (x - loc) / std
            m = self.masks[b]
            s, t = self._scale_shift(b, Tensor(x * m))
            x = x * m + (x - t.data) * np.exp(-s.data) * (1.0 - m)
        self.initialized = True

    def nll(self, w: Tensor) -> Tensor:
        """Mean negative log-likelihood (nats) of latents under the standard-normal base."""
        z, logdet = self.inverse_tensor(w)
        per_item = (z * z).sum(axis=1) * 0.5 + (0.5 * self.dim * math.log(2.0 * math.pi)) - logdet
        return per_item.mean()

    def architecture(self) -> Dict:
        return {'dim': self.dim, 'blocks': self.blocks, 'hidden': self.hidden, 'direction': 'base->latent'}

    def to_checkpoint(self, **metadata) -> Checkpoint:
        metadata = dict(metadata, initialized=self.initialized)
        return Checkpoint(CHECKPOINT_KIND, self.architecture(), self.state_dict(), metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Flow":
        if ckpt.kind != CHECKPOINT_KIND:
            raise CheckpointError(f"not a flow checkpoint: kind '{ckpt.kind}'")
        arch = ckpt.architecture
        flow = cls(int(arch['dim']), int(arch['blocks']), [int(h) for h in arch['hidden']])
        flow.load_state_dict(ckpt.params)
        flow.initialized = bool(ckpt.metadata.get('initialized', True))
        return flow


def flow_forward(fp: Flow, z: np.ndarray) -> Tuple[np.ndarray, float]:
    single = np.ndim(z) == 1
    w, logdet = fp.forward_tensor(Tensor(np.atleast_2d(z)))
    if not np.all(np.isfinite(w.data)):
        raise NumericalError("non-finite flow output")
    return (w.data[0], float(logdet.data[0])) if single else (w.data, logdet.data)


def flow_inverse(fp: Flow, w: np.ndarray) -> np.ndarray:
    single = np.ndim(w) == 1
    z, _ = fp.inverse_tensor(Tensor(np.atleast_2d(w)))
    return z.data[0] if single else z.data
