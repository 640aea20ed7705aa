"""
Latent-space solvers for inverse problems with the continuous generator FunkNN(x, G(z)).

Each solve runs two phases. Phase 1 optimizes z (Adam, starting from z = 0) with the prior fixed.
Phase 2 keeps z fixed and refines the decoder weights by plain gradient descent. Solvers work on a
private copy of the prior, so one loaded prior can serve several concurrent solves.

Objectives
  grad         sum_j |grad f(x_j) - grad u(x_j)|^2 + lambda |z|^2
  sparse_grad  the same over the selected coordinates + lambda2 TV(G(z))
  ct           sum_i |A(alpha_i) f - v_i|^2 + lambda |z|^2, with f evaluated on the n x n grid
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from autodiff.optim import Adam, sgd_step
from autodiff.tensor import Tensor
from errors import ConfigValidationError, NumericalError, ShapeError, ValidationError
from funknn.model import DEFAULT_CHUNK, FunkNN
from funknn.sampler import sample_patches
from inverse.radon import RadonOperator
from models import DerivativeField, ImageGrid, Sinogram, grid_coords
from prior.generator import Prior

logger = logging.getLogger(__name__)

PROBLEMS = ('grad', 'sparse_grad', 'ct')
TRACE_FIELDS = ['step', 'phase', 'objective', 'data', 'reg_z', 'tv', 'best']


@dataclass
class SolveConfig:
    problem: str = 'grad'
    lam: float = 0.0
    lam2: float = 1e-2
    fraction: float = 0.2
    z_steps: int = 2500
    ct_steps: int = 5000
    finetune_steps: int = 1000
    lr_z: float = 1e-2
    lr_finetune: float = 1e-5
    coords_per_step: int = 1024
    tv_eps: float = 1e-8
    chunk_size: int = DEFAULT_CHUNK
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        self.problem = self.problem.replace('-', '_')
        if self.problem not in PROBLEMS:
            raise ConfigValidationError(
                f"unknown problem '{self.problem}', expected one of {['grad', 'sparse-grad', 'ct']}")
        if self.lam < 0 or self.lam2 < 0:
            raise ConfigValidationError(f"regularization weights must be >= 0, got {self.lam}, {self.lam2}")
        if min(self.z_steps, self.ct_steps, self.finetune_steps, self.coords_per_step) < 0:
            raise ConfigValidationError("step counts must be >= 0")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigValidationError(f"fraction must lie in (0, 1], got {self.fraction}")

    @property
    def steps(self) -> int:
        return self.ct_steps if self.problem == 'ct' else self.z_steps

    @classmethod
    def from_run_config(cls, run_config, **overrides: Any) -> "SolveConfig":
        section = dict(run_config['solver'])
        section['lam'] = section.pop('lambda', cls.lam)
        section['lam2'] = section.pop('lambda2', cls.lam2)
        values = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        values['chunk_size'] = int(run_config['funknn'].get('eval_chunk', DEFAULT_CHUNK))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'problem': self.problem, 'lambda': self.lam, 'lambda2': self.lam2, 'fraction': self.fraction,
            'z_steps': self.z_steps, 'ct_steps': self.ct_steps, 'finetune_steps': self.finetune_steps,
            'lr_z': self.lr_z, 'lr_finetune': self.lr_finetune, 'coords_per_step': self.coords_per_step,
            'tv_eps': self.tv_eps, 'chunk_size': self.chunk_size, 'seed': self.seed,
        }


def select_top_gradients(field: DerivativeField, fraction: float) -> DerivativeField:
    """Keep the ceil(fraction * N) entries of largest gradient norm; ties go to the earlier coordinate."""
    if len(field) == 0:
        raise ValidationError("cannot select from an empty derivative field")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    keep = int(math.ceil(round(fraction * len(field), 9)))
    order = np.argsort(-field.norms(), kind='stable')
    return field.subset(np.sort(order[:keep]))


def tv_norm(images: Tensor, eps: float = 1e-8) -> Tensor:
    """Isotropic forward-difference TV of an [B, H, W, C] stack; exactly zero on constant images."""
    base = images[:, :-1, :-1, :]
    dx = images[:, :-1, 1:, :] - base
    dy = images[:, 1:, :-1, :] - base
    return ((dx * dx + dy * dy + eps).sqrt() - math.sqrt(eps)).sum()


def _chunks(index: np.ndarray, size: int) -> List[np.ndarray]:
    size = max(int(size), 1)
    return [index[i:i + size] for i in range(0, index.size, size)]


class LatentObjective:
    """
    Scalar objective of one inverse problem as a function of z and the decoder weights.

    `value_and_grad` runs the network part chunk by chunk against a detached copy of G(z), then
    pushes the accumulated image gradient back through the generator once.
    """

    def __init__(self, prior: Prior, model: FunkNN, cfg: SolveConfig):
        if prior.ae.channels != model.channels:
            raise ShapeError(f"prior has {prior.ae.channels} channels, FunkNN expects {model.channels}")
        self.prior = prior
        self.model = model
        self.cfg = cfg
        self.params = model.frozen()

    def network_term(self, images: Tensor, rng: Optional[np.random.Generator]) -> float:
        raise NotImplementedError

    def use_tv(self) -> bool:
        return False

    def value_and_grad(self, z: Tensor, rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
        images = self.prior.generate_tensor(z)
        leaf = Tensor(images.data, requires_grad=True)
        data = self.network_term(leaf, rng)
        tv = 0.0
        if self.use_tv() and self.cfg.lam2 > 0:
            tv_term = tv_norm(leaf, self.cfg.tv_eps)
            tv = tv_term.item()
            (tv_term * self.cfg.lam2).backward()
        if images.requires_grad and leaf.grad is not None:
            images.backward(leaf.grad)
        reg_z = 0.0
        if self.cfg.lam > 0:
            reg = (z * z).sum()
            reg_z = reg.item()
            if z.requires_grad:
                (reg * self.cfg.lam).backward()
        objective = data + self.cfg.lam * reg_z + self.cfg.lam2 * tv
        return {'objective': objective, 'data': data, 'reg_z': reg_z, 'tv': tv}

    def value(self, z: np.ndarray) -> float:
        """Full objective at z (all observations, no gradients kept)."""
        return self.value_and_grad(Tensor(np.asarray(z).reshape(1, -1)))['objective']


class DerivativeObjective(LatentObjective):
    """sum_j |grad FunkNN(x_j, G(z)) - g_j|^2 over a (possibly sparse) observed field."""

    def __init__(self, prior: Prior, model: FunkNN, cfg: SolveConfig, obs: DerivativeField, tv: bool = False):
        super().__init__(prior, model, cfg)
        if len(obs) == 0:
            raise ValidationError("no derivative observations")
        if obs.channels != model.channels:
            raise ShapeError(f"observations have {obs.channels} channels, FunkNN expects {model.channels}")
        self.obs = obs
        self.tv = tv

    def use_tv(self) -> bool:
        return self.tv

    def _index(self, rng: Optional[np.random.Generator]) -> np.ndarray:
        n_obs = len(self.obs)
        per_step = self.cfg.coords_per_step
        if rng is None or per_step == 0 or per_step >= n_obs:
            return np.arange(n_obs)
        return np.sort(rng.choice(n_obs, size=per_step, replace=False))

    def network_term(self, images: Tensor, rng: Optional[np.random.Generator]) -> float:
        index = self._index(rng)
        # minibatch sums are rescaled to estimate the full sum
        scale = len(self.obs) / index.size
        total = 0.0
        for chunk in _chunks(index, self.cfg.chunk_size):
            grads = self.model.derivative_tensor(images, self.obs.coords[chunk], order=1, params=self.params)
            residual = grads - self.obs.gradients[chunk]
            term = (residual * residual).sum() * scale
            total += term.item()
            term.backward()
        return total


class CTObjective(LatentObjective):
    """sum_i |A(alpha_i) FunkNN(x, G(z)) - v_i|^2 with x the n x n pixel centers."""

    def __init__(self, prior: Prior, model: FunkNN, cfg: SolveConfig, sino: Sinogram):
        super().__init__(prior, model, cfg)
        if model.channels != 1:
            raise ShapeError("limited-view CT needs a single-channel FunkNN")
        self.sino = sino
        self.n = sino.image_size
        self.op = RadonOperator(self.n, sino.angles, sino.metadata.get('oversample', 2))
        if self.op.n_det != sino.n_det:
            raise ShapeError(f"sinogram has {sino.n_det} detectors, a {self.n}^2 grid needs {self.op.n_det}")
        self.coords = grid_coords(self.n, self.n)
        self.target = sino.values.astype(np.float64)

    def network_term(self, images: Tensor, rng: Optional[np.random.Generator]) -> float:
        chunks = _chunks(np.arange(self.coords.shape[0]), self.cfg.chunk_size)
        detached = images.detach()
        pixels = np.concatenate([self.model.query(detached, self.coords[c], self.params).data for c in chunks])
        residual = self.op.forward(pixels.reshape(self.n, self.n)) - self.target
        if not images.requires_grad:
            return float(np.sum(residual ** 2))
        seed = (2.0 * self.op.adjoint(residual)).reshape(-1, 1)
        # second pass rebuilds each chunk's tape and seeds it with d(objective)/d(pixel)
        for c in chunks:
            out = self.model.query(images, self.coords[c], self.params)
            out.backward(seed[c].astype(out.data.dtype))
        return float(np.sum(residual ** 2))

    def image(self, z: np.ndarray) -> ImageGrid:
        return _evaluate(self.prior, self.model, z, self.n, self.cfg.chunk_size)


def _evaluate(prior: Prior, model: FunkNN, z: np.ndarray, n: int, chunk_size: int) -> ImageGrid:
    low = prior.generate_tensor(Tensor(np.asarray(z).reshape(1, -1))).data[0]
    values = model.evaluate(ImageGrid(low), grid_coords(n, n), chunk_size=chunk_size)
    return ImageGrid(values.reshape(n, n, -1))


def _set_trainable(prior: Prior, decoder: bool) -> None:
    for p in prior.ae.parameters() + prior.flow.parameters():
        p.requires_grad = False
        p.zero_grad()
    if decoder:
        for p in prior.ae.decoder_parameters():
            p.requires_grad = True


def _record(trace: List[Dict], step: int, phase: str, parts: Dict[str, float], log_every: int) -> None:
    if not math.isfinite(parts['objective']):
        logger.error("%s objective diverged at step %d", phase, step)
        raise NumericalError(f"non-finite objective at {phase} step {step}")
    best = min(parts['objective'], trace[-1]['best']) if trace else parts['objective']
    trace.append({'step': step, 'phase': phase, **parts, 'best': best})
    if log_every and step % log_every == 0:
        logger.info("%s step %d objective %.6g (data %.6g)", phase, step, parts['objective'], parts['data'])


def run_latent_solve(objective: LatentObjective, steps: int, n: int) -> Tuple[np.ndarray, ImageGrid, List[Dict]]:
    """Phase 1 (Adam on z from 0) then phase 2 (gradient descent on decoder weights)."""
    cfg = objective.cfg
    prior = objective.prior
    z = Tensor(np.zeros((1, prior.latent_dim)), requires_grad=True)
    trace: List[Dict] = []

    _set_trainable(prior, decoder=False)
    optimizer = Adam([z], lr=cfg.lr_z)
    for step in range(steps):
        optimizer.zero_grad()
        parts = objective.value_and_grad(z, np.random.default_rng([cfg.seed, step]))
        _record(trace, step, 'z', parts, cfg.log_every)
        optimizer.step()

    z_star = z.data.copy()
    z_fixed = Tensor(z_star)
    _set_trainable(prior, decoder=True)
    decoder = prior.ae.decoder_parameters()
    for step in range(cfg.finetune_steps):
        for p in decoder:
            p.zero_grad()
        parts = objective.value_and_grad(z_fixed, np.random.default_rng([cfg.seed, steps + step]))
        _record(trace, steps + step, 'finetune', parts, cfg.log_every)
        sgd_step(decoder, [p.grad for p in decoder], cfg.lr_finetune)
    _set_trainable(prior, decoder=False)

    image = _evaluate(prior, objective.model, z_star, n, cfg.chunk_size)
    if trace:
        logger.info("solve finished: objective %.4g -> %.4g", trace[0]['objective'], trace[-1]['objective'])
    return z_star[0], image, trace


def _output_size(obs: DerivativeField, prior: Prior) -> int:
    if obs.grid_size:
        return int(obs.grid_size)
    return 2 * prior.image_size


def solve_gradient_inversion(obs: DerivativeField, prior: Prior, model: FunkNN,
                             cfg: SolveConfig) -> Tuple[np.ndarray, ImageGrid, List[Dict]]:
    """Match dense gradient observations; the image mean is not identifiable."""
    private = prior.clone()
    objective = DerivativeObjective(private, model, cfg, obs, tv=False)
    logger.info("gradient inversion: %d observations, %d z steps", len(obs), cfg.z_steps)
    return run_latent_solve(objective, cfg.z_steps, _output_size(obs, prior))


def solve_sparse_gradient(obs_masked: DerivativeField, prior: Prior, model: FunkNN,
                          cfg: SolveConfig) -> Tuple[np.ndarray, ImageGrid, List[Dict]]:
    """Gradient matching on the selected coordinates plus lambda2 TV on the low-resolution G(z)."""
    private = prior.clone()
    objective = DerivativeObjective(private, model, cfg, obs_masked, tv=True)
    logger.info("sparse gradient inversion: %d observations, lambda2=%g", len(obs_masked), cfg.lam2)
    return run_latent_solve(objective, cfg.z_steps, _output_size(obs_masked, prior))


def solve_limited_ct(sino: Sinogram, prior: Prior, model: FunkNN,
                     cfg: SolveConfig) -> Tuple[np.ndarray, ImageGrid, List[Dict]]:
    """Fit projections of the n x n FunkNN output of G(z)."""
    private = prior.clone()
    objective = CTObjective(private, model, cfg, sino)
    logger.info("limited-view CT: %d views, %d z steps", sino.n_views, cfg.ct_steps)
    return run_latent_solve(objective, cfg.ct_steps, sino.image_size)


def solve_sparse_gradient_baseline(obs_masked: DerivativeField, cfg: SolveConfig, n: Optional[int] = None,
                                   channels: int = 1) -> Tuple[ImageGrid, List[Dict]]:
    """Prior-free reference: Adam directly on n x n pixels against the bicubic-interpolant gradients, plus TV."""
    n = n or obs_masked.grid_size
    if not n:
        raise ValidationError("the baseline needs an output size")
    pixels = Tensor(np.zeros((1, n, n, channels)), requires_grad=True)
    unit = Tensor(np.ones(2))
    coords = obs_masked.coords
    target = obs_masked.gradients
    optimizer = Adam([pixels], lr=cfg.lr_z)
    trace: List[Dict] = []
    for step in range(cfg.z_steps):
        optimizer.zero_grad()
        gx = sample_patches(pixels, unit, coords, p=1, kind='dx').reshape(-1, 1, channels)
        gy = sample_patches(pixels, unit, coords, p=1, kind='dy').reshape(-1, 1, channels)
        residual_x = gx - target[:, 0:1, :]
        residual_y = gy - target[:, 1:2, :]
        data = (residual_x * residual_x).sum() + (residual_y * residual_y).sum()
        tv = tv_norm(pixels, cfg.tv_eps)
        total = data + tv * cfg.lam2
        total.backward()
        _record(trace, step, 'pixels', {'objective': total.item(), 'data': data.item(), 'reg_z': 0.0,
                                        'tv': tv.item()}, cfg.log_every)
        optimizer.step()
    return ImageGrid(pixels.data[0]), trace
