"""
FunkNN: a small CNN reading a p x p patch sampled around a query coordinate and returning the
C-channel intensity there, as a residual on top of the bicubic center sample.
"""
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff.checkpoint import Checkpoint
from autodiff.functional import Module, concat, conv2d, max_pool2d, relu, same_padding
from autodiff.tensor import Tensor
from errors import CheckpointError, ShapeError, ValidationError
from extensions import pool
from funknn.sampler import PatchSpec, patch_knot_mask, sample_patches
from models import ImageGrid, grid_coords

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'funknn'
CONV_KERNEL = 2
N_CONV = 8
# max-pool follows these convs (1-based)
POOL_AFTER = (3, 6)
DEFAULT_CHUNK = 2048


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class FunkNN(Module):
    """
    Parameter bundle and forward pass.

    Layer schedule: conv1-3 at p x p, pool, conv4-6, pool, conv7-8, flatten, fc1-fc3, head.
    Convs are 2x2 with "same" padding; consecutive same-shape blocks carry additive skips.
    The head starts at zero so a fresh model is exactly bicubic interpolation.
    """

    def __init__(self, channels: int = 1, p: int = 9, width: int = 64, seed: int = 0):
        super().__init__()
        if channels < 1:
            raise ValidationError(f"channels must be >= 1, got {channels}")
        PatchSpec(p=p)
        pooled = (p // 2) // 2
        if pooled < 1:
            raise ValidationError(f"patch size {p} too small for two 2x2 pools")
        self.channels = channels
        self.p = p
        self.width = width
        self.flat = width * pooled * pooled

        rng = np.random.default_rng(seed)
        c_in = channels
        for i in range(1, N_CONV + 1):
            fan_in = c_in * CONV_KERNEL * CONV_KERNEL
            self.add_param(f'conv{i}/weight', _he(rng, (width, c_in, CONV_KERNEL, CONV_KERNEL), fan_in))
            self.add_param(f'conv{i}/bias', np.zeros(width))
            c_in = width
        self.add_param('fc1/weight', _he(rng, (self.flat, width), self.flat))
        self.add_param('fc1/bias', np.zeros(width))
        for name in ('fc2', 'fc3'):
            self.add_param(f'{name}/weight', _he(rng, (width, width), width))
            self.add_param(f'{name}/bias', np.zeros(width))
        self.add_param('head/weight', np.zeros((width, channels)))
        self.add_param('head/bias', np.zeros(channels))
        self.add_param('gammas', np.ones(2))
        self.metadata: Dict = {}

    def __repr__(self):
        return f'<FunkNN C={self.channels} p={self.p} params={self.parameter_count()}>'

    @property
    def gammas(self) -> Tensor:
        return self['gammas']

    @property
    def spec(self) -> PatchSpec:
        gx, gy = (float(g) for g in self.gammas.data)
        return PatchSpec(p=self.p, gamma_x=gx, gamma_y=gy)

    def architecture(self) -> Dict:
        return {
            'channels': self.channels,
            'patch': self.p,
            'width': self.width,
            'conv_kernel': CONV_KERNEL,
            'padding': list(same_padding(CONV_KERNEL)),
            'n_conv': N_CONV,
            'pool_after': list(POOL_AFTER),
            'fc': ['fc1', 'fc2', 'fc3', 'head'],
            'flatten': self.flat,
        }

    def frozen(self) -> Dict[str, Tensor]:
        """Detached views of the parameters (no tape is recorded through them)."""
        return {name: p.detach() for name, p in self.named_parameters()}

    # network
    def forward(self, patches: Tensor, centers: Tensor, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """patches [N, C, p, p], centers [N, C] -> [N, C]"""
        params = params if params is not None else self._params
        if patches.ndim != 4 or patches.shape[1:] != (self.channels, self.p, self.p):
            raise ShapeError(f"expected patches [N, {self.channels}, {self.p}, {self.p}], got {patches.shape}")
        pad = same_padding(CONV_KERNEL)
        h = patches
        for i in range(1, N_CONV + 1):
            out = relu(conv2d(h, params[f'conv{i}/weight'], params[f'conv{i}/bias'], padding=pad))
            h = out if out.shape != h.shape else out + h
            if i in POOL_AFTER:
                h = max_pool2d(h)
        f = h.reshape(h.shape[0], -1)
        f = relu(f @ params['fc1/weight'] + params['fc1/bias'])
        for name in ('fc2', 'fc3'):
            f = relu(f @ params[f'{name}/weight'] + params[f'{name}/bias']) + f
        return f @ params['head/weight'] + params['head/bias'] + centers

    def query(self, images: Tensor, coords: np.ndarray, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """
        Evaluate at coordinates against an image stack.

        images: [B, H, W, C] (a Tensor, possibly produced by a generator); coords: [M, 2] shared
        or [B, M, 2]. Returns [B * M, C]; gradients reach the images, the gammas and the weights.
        """
        params = params if params is not None else self._params
        c = (self.p - 1) // 2
        patches = sample_patches(images, params['gammas'], coords, p=self.p, kind='value')
        centers = patches[:, :, c, c]
        return self.forward(patches, centers, params)

    # inference
    def evaluate(self, img: ImageGrid, coords: np.ndarray, chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
        """Intensities [N, C] at coords [N, 2]; chunks run on the shared pool in fixed order."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        if coords.shape[0] == 0:
            return np.zeros((0, img.channels), dtype=np.float32)
        self._check_image(img)
        params = self.frozen()
        images = Tensor(img.values[None])

        def run(chunk: np.ndarray) -> np.ndarray:
            return self.query(images, chunk, params).data

        parts = pool.map(run, _chunks(coords, chunk_size))
        return np.concatenate(parts, axis=0).astype(np.float32)

    def patch_sensitivity(self, images: np.ndarray, coords: np.ndarray,
                          params: Optional[Mapping[str, Tensor]] = None) -> np.ndarray:
        """
        d(output)/d(patch) per output channel: [C_out, N, C_in, p, p].

        The network is piecewise linear in its patch (conv, ReLU, max-pool, affine, skips), so this
        is constant almost everywhere in the image values.
        """
        params = params if params is not None else self.frozen()
        c = (self.p - 1) // 2
        stack = np.asarray(images)
        patches = sample_patches(Tensor(stack), params['gammas'], coords, p=self.p, kind='value')
        leaf = Tensor(patches.data, requires_grad=True)
        out = self.forward(leaf, leaf[:, :, c, c], params)
        sensitivity = []
        for ch in range(self.channels):
            leaf.zero_grad()
            out[:, ch].sum().backward()
            sensitivity.append(leaf.grad)
        return np.stack(sensitivity, axis=0)

    def derivative_tensor(self, images: Tensor, coords: np.ndarray, order: int = 1,
                          params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
        """
        Differentiable spatial derivative against an image stack.

        order 1 -> [B * M, 2, C] gradient; order 2 -> [B * M, C] Laplacian. The patch sensitivity
        is held fixed (exact almost everywhere) and the derivative patches carry the image gradient.
        """
        if order not in (1, 2):
            raise ValidationError(f"derivative order must be 1 or 2, got {order}")
        params = params if params is not None else self.frozen()
        gammas = params['gammas'].detach()
        sens = self.patch_sensitivity(images.data, coords, params)
        kinds = ('dx', 'dy') if order == 1 else ('dxx', 'dyy')
        axes = []
        for kind in kinds:
            deriv = sample_patches(images, gammas, coords, p=self.p, kind=kind)
            per_channel = [(deriv * sens[ch]).sum(axis=(1, 2, 3)).reshape(-1, 1) for ch in range(self.channels)]
            axes.append(concat(per_channel, axis=1))
        if order == 2:
            return axes[0] + axes[1]
        n = axes[0].shape[0]
        return concat([a.reshape(n, 1, self.channels) for a in axes], axis=1)

    def spatial_derivatives(self, img: ImageGrid, coords: np.ndarray, order: int = 1,
                            chunk_size: int = DEFAULT_CHUNK) -> Tuple[np.ndarray, np.ndarray]:
        """
        Gradients [N, 2, C] (order 1) or Laplacians [N, C] (order 2) at coords, plus a per-coordinate
        flag marking order-2 values taken at a kernel knot (right-limit values).
        """
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        shape = (0, 2, img.channels) if order == 1 else (0, img.channels)
        if coords.shape[0] == 0:
            return np.zeros(shape, dtype=np.float32), np.zeros(0, dtype=bool)
        self._check_image(img)
        params = self.frozen()
        images = Tensor(img.values[None])

        def run(chunk: np.ndarray) -> np.ndarray:
            return self.derivative_tensor(images, chunk, order, params).data

        values = np.concatenate(pool.map(run, _chunks(coords, chunk_size)), axis=0)
        if order == 1:
            return values.astype(np.float32), np.zeros(coords.shape[0], dtype=bool)
        knots = patch_knot_mask(coords, self.spec, img.height, img.width)
        if knots.any():
            logger.debug("%d of %d Laplacian queries sit on a kernel knot", int(knots.sum()), knots.size)
        return values.astype(np.float32), knots

    def hierarchical(self, img: ImageGrid, s: float, levels: int, chunk_size: int = DEFAULT_CHUNK) -> List[ImageGrid]:
        """[img, u1, ..., u_levels] where u_i is FunkNN evaluated on u_{i-1} at s^i times the input size."""
        if levels < 0:
            raise ValidationError(f"levels must be >= 0, got {levels}")
        outputs = [img]
        current = img
        for _ in range(levels):
            h, w = current.height * s, current.width * s
            if abs(h - round(h)) > 1e-9 or abs(w - round(w)) > 1e-9:
                raise ValidationError(f"scale {s} gives a non-integer size from {current.height}x{current.width}")
            h, w = int(round(h)), int(round(w))
            values = self.evaluate(current, grid_coords(h, w), chunk_size=chunk_size)
            current = ImageGrid(values.reshape(h, w, current.channels))
            outputs.append(current)
        return outputs

    def _check_image(self, img: ImageGrid) -> None:
        if img.channels != self.channels:
            raise ShapeError(f"model expects {self.channels} channels, image has {img.channels}")

    # persistence
    def to_checkpoint(self, **metadata) -> Checkpoint:
        return Checkpoint(CHECKPOINT_KIND, self.architecture(), self.state_dict(), metadata)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FunkNN":
        if ckpt.kind != CHECKPOINT_KIND:
            raise CheckpointError(f"not a FunkNN checkpoint: kind '{ckpt.kind}'")
        arch = ckpt.architecture
        model = cls(channels=int(arch['channels']), p=int(arch['patch']), width=int(arch['width']))
        expected = model.architecture()
        for key in ('conv_kernel', 'padding', 'n_conv', 'pool_after'):
            if key in arch and arch[key] != expected[key]:
                raise CheckpointError(f"checkpoint {key} {arch[key]} does not match this build ({expected[key]})")
        model.load_state_dict(ckpt.params)
        model.metadata = dict(ckpt.metadata)
        return model

    @classmethod
    def load(cls, path) -> "FunkNN":
        return cls.from_checkpoint(Checkpoint.load(path, kind=CHECKPOINT_KIND))

    def save(self, path, **metadata):
        return self.to_checkpoint(**metadata).save(path)


def _chunks(coords: np.ndarray, size: int) -> List[np.ndarray]:
    size = max(int(size), 1)
    return [coords[i:i + size] for i in range(0, coords.shape[0], size)]


# functional surface

def init_params(channels: int = 1, seed: int = 0, p: int = 9) -> FunkNN:
    return FunkNN(channels=channels, p=p, seed=seed)


def forward(params: FunkNN, patch: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Single patch [p, p, C] and center [C] -> [C]."""
    patch = np.asarray(patch)
    if patch.ndim != 3:
        raise ShapeError(f"expected a [p, p, C] patch, got {patch.shape}")
    x = Tensor(np.transpose(patch, (2, 0, 1))[None])
    out = params.forward(x, Tensor(np.asarray(center).reshape(1, -1)), params.frozen())
    return out.data[0]


def evaluate(params: FunkNN, img_lr: ImageGrid, coords: Sequence) -> np.ndarray:
    return params.evaluate(img_lr, np.asarray(coords, dtype=np.float64).reshape(-1, 2))


def spatial_derivative(params: FunkNN, img_lr: ImageGrid, coord, order: int = 1):
    """Gradient [2, C] (order 1) or Laplacian [C] (order 2) at one coordinate, plus the knot flag."""
    values, knots = params.spatial_derivatives(img_lr, np.asarray(coord, dtype=np.float64).reshape(1, 2), order)
    return values[0], bool(knots[0])
