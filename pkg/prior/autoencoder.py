"""
Convolutional autoencoder for d x d images (d divisible by 32).

Encoder: six 3x3 Conv+ReLU blocks at d, d/2, ..., d/32 joined by stride-2 2x2 convolutions,
then a linear map to the latent code. Blocks whose input and output shapes agree carry an
additive skip. The decoder mirrors this with nearest 2x upsampling followed by a 3x3 conv.
"""
import logging
from typing import Dict, List, Sequence

import numpy as np

from autodiff.checkpoint import Checkpoint
from autodiff.functional import Module, conv2d, relu, same_padding, upsample_nearest
from autodiff.tensor import Tensor
from errors import CheckpointError, ShapeError, ValidationError
from models import ImageGrid

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'autoencoder'
N_BLOCKS = 6
DOWNSAMPLE = 2 ** (N_BLOCKS - 1)


def block_widths(base: int) -> List[int]:
    return [base, 2 * base, 2 * base, 4 * base, 4 * base, 4 * base]


class Autoencoder(Module):

    def __init__(self, image_size: int = 32, channels: int = 1, latent_dim: int = 64,
                 base_channels: int = 16, seed: int = 0):
        super().__init__()
        if image_size % DOWNSAMPLE or image_size < DOWNSAMPLE:
            raise ValidationError(f"image size must be a multiple of {DOWNSAMPLE}, got {image_size}")
        self.image_size = image_size
        self.channels = channels
        self.latent_dim = latent_dim
        self.base_channels = base_channels
        self.widths = block_widths(base_channels)
        self.bottom = image_size // DOWNSAMPLE
        self.flat = self.widths[-1] * self.bottom * self.bottom

        rng = np.random.default_rng(seed)

        def conv(name: str, c_out: int, c_in: int, k: int) -> None:
            fan_in = c_in * k * k
            self.add_param(f'{name}/weight', rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in))
            self.add_param(f'{name}/bias', np.zeros(c_out))

        def dense(name: str, n_in: int, n_out: int) -> None:
            self.add_param(f'{name}/weight', rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in))
            self.add_param(f'{name}/bias', np.zeros(n_out))

        w = self.widths
        conv('enc0', w[0], channels, 3)
        for i in range(1, N_BLOCKS):
            conv(f'enc_down{i}', w[i], w[i - 1], 2)
            conv(f'enc{i}', w[i], w[i], 3)
        dense('enc_fc', self.flat, latent_dim)
        dense('dec_fc', latent_dim, self.flat)
        for i in range(N_BLOCKS - 1, 0, -1):
            conv(f'dec{i}', w[i], w[i], 3)
            conv(f'dec_up{i}', w[i - 1], w[i], 3)
        conv('dec0', w[0], w[0], 3)
        conv('dec_out', channels, w[0], 3)

    def __repr__(self):
        return f'<Autoencoder {self.image_size}^2x{self.channels} -> {self.latent_dim} params={self.parameter_count()}>'

    def encode_tensor(self, x: Tensor) -> Tensor:
        """[N, C, d, d] -> [N, L]"""
        if x.ndim != 4 or x.shape[1:] != (self.channels, self.image_size, self.image_size):
            raise ShapeError(f"expected [N, {self.channels}, {self.image_size}, {self.image_size}], got {x.shape}")
        p = self._params
        pad = same_padding(3)
        h = relu(conv2d(x, p['enc0/weight'], p['enc0/bias'], padding=pad))
        for i in range(1, N_BLOCKS):
            h = relu(conv2d(h, p[f'enc_down{i}/weight'], p[f'enc_down{i}/bias'], stride=2))
            h = relu(conv2d(h, p[f'enc{i}/weight'], p[f'enc{i}/bias'], padding=pad)) + h
        h = h.reshape(h.shape[0], -1)
        return h @ p['enc_fc/weight'] + p['enc_fc/bias']

    def decode_tensor(self, latent: Tensor) -> Tensor:
        """[N, L] -> [N, C, d, d], raw (unclamped) intensities."""
        if latent.ndim != 2 or latent.shape[1] != self.latent_dim:
            raise ShapeError(f"expected latents [N, {self.latent_dim}], got {latent.shape}")
        p = self._params
        pad = same_padding(3)
        h = relu(latent @ p['dec_fc/weight'] + p['dec_fc/bias'])
        h = h.reshape(latent.shape[0], self.widths[-1], self.bottom, self.bottom)
        for i in range(N_BLOCKS - 1, 0, -1):
            h = relu(conv2d(h, p[f'dec{i}/weight'], p[f'dec{i}/bias'], padding=pad)) + h
            h = upsample_nearest(h, 2)
            h = relu(conv2d(h, p[f'dec_up{i}/weight'], p[f'dec_up{i}/bias'], padding=pad))
        h = relu(conv2d(h, p['dec0/weight'], p['dec0/bias'], padding=pad)) + h
        return conv2d(h, p['dec_out/weight'], p['dec_out/bias'], padding=pad)

    def decoder_parameters(self) -> List[Tensor]:
        return [t for name, t in self.named_parameters() if name.startswith('dec')]

    def encode(self, img: ImageGrid) -> np.ndarray:
        if img.height != self.image_size or img.width != self.image_size or img.channels != self.channels:
            raise ShapeError(f"autoencoder expects {self.image_size}^2 x {self.channels}, got {img!r}")
        return self.encode_tensor(Tensor(img.channels_first()[None])).data[0]

    def encode_batch(self, images: Sequence[ImageGrid]) -> np.ndarray:
        return np.stack([self.encode(img) for img in images]) if images else np.zeros((0, self.latent_dim))

    def decode(self, latent: np.ndarray) -> ImageGrid:
        out = self.decode_tensor(Tensor(np.asarray(latent).reshape(1, -1))).data[0]
        return ImageGrid.from_channels_first(out)

    def architecture(self) -> Dict:
        return {'image_size': self.image_size, 'channels': self.channels, 'latent_dim': self.latent_dim,
                'base_channels': self.base_channels, 'blocks': N_BLOCKS, 'upsampling': 'nearest+conv3x3',
                'downsampling': 'conv2x2/stride2'}

    def to_checkpoint(self, **metadata) -> Checkpoint:
        return Checkpoint(CHECKPOINT_KIND, self.architecture(), self.state_dict(), metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Autoencoder":
        if ckpt.kind != CHECKPOINT_KIND:
            raise CheckpointError(f"not an autoencoder checkpoint: kind '{ckpt.kind}'")
        arch = ckpt.architecture
        model = cls(int(arch['image_size']), int(arch['channels']), int(arch['latent_dim']), int(arch['base_channels']))
        model.load_state_dict(ckpt.params)
        return model


def image_gradients(x: Tensor):
    """Forward differences along W and H of an [N, C, H, W] tensor."""
    dx = x[:, :, :, 1:] - x[:, :, :, :-1]
    dy = x[:, :, 1:, :] - x[:, :, :-1, :]
    return dx, dy


def reconstruction_loss(recon: Tensor, target: Tensor, grad_weight: float = 0.1) -> Tensor:
    """MSE plus grad_weight times the MSE between finite-difference image gradients."""
    diff = recon - target
    loss = (diff * diff).mean()
    if grad_weight:
        rdx, rdy = image_gradients(recon)
        tdx, tdy = image_gradients(target)
        ex, ey = rdx - tdx, rdy - tdy
        loss = loss + ((ex * ex).mean() + (ey * ey).mean()) * grad_weight
    return loss
