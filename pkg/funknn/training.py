"""
Regression of FunkNN on (coordinate, high-res intensity) pairs.

Three regimes pick the low-res size d and the target size of each batch:
  single      d fixed (default n / 2), target n
  continuous  s log-uniform in [s_min, s_max], d = round(n / s), target n
  factor      d drawn from [d_min, d_max] in steps of d_step, target d * s
All images of one batch share the drawn (d, target) pair.
"""
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from autodiff.optim import Adam
from autodiff.tensor import Tensor
from errors import ConfigValidationError, NumericalError, ValidationError
from extensions import pool
from funknn.model import FunkNN
from funknn.sampler import project_gammas
from metrics import write_trace
from models import Dataset, ImageGrid, grid_coords
from synth_data.generators import area_resize

logger = logging.getLogger(__name__)

MODES = ('single', 'continuous', 'factor')


@dataclass
class TrainConfig:
    mode: str = 'factor'
    n: int = 64
    d: Optional[int] = None
    d_min: int = 16
    d_max: int = 32
    d_step: int = 8
    s: float = 2.0
    s_min: float = 1.25
    s_max: float = 4.0
    patch: int = 9
    width: int = 64
    pixels_per_batch: int = 512
    images_per_batch: int = 64
    lr: float = 1e-4
    steps: int = 5000
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigValidationError(f"unknown training mode '{self.mode}', expected one of {list(MODES)}")
        if self.d is None:
            self.d = self.n // 2
        if self.pixels_per_batch < 1 or self.images_per_batch < 1 or self.steps < 0 or self.width < 1:
            raise ConfigValidationError("batch sizes and width must be positive and steps non-negative")
        if self.mode == 'single' and not 1 <= self.d <= self.n:
            raise ConfigValidationError(f"single mode needs 1 <= d <= n, got d={self.d}, n={self.n}")
        if self.mode == 'continuous' and not 1.0 <= self.s_min <= self.s_max:
            raise ConfigValidationError(f"continuous mode needs 1 <= s_min <= s_max, got [{self.s_min}, {self.s_max}]")
        if self.mode == 'factor':
            if not self.factor_sizes():
                raise ConfigValidationError(
                    f"no admissible d in [{self.d_min}, {self.d_max}] with d * {self.s} <= {self.n}")

    def factor_sizes(self) -> List[Tuple[int, int]]:
        """Admissible (d, target) pairs of factor mode."""
        pairs = []
        for d in range(self.d_min, self.d_max + 1, max(self.d_step, 1)):
            target = d * self.s
            if abs(target - round(target)) < 1e-9 and round(target) <= self.n:
                pairs.append((d, int(round(target))))
        return pairs

    @classmethod
    def from_run_config(cls, run_config, **overrides: Any) -> "TrainConfig":
        section = dict(run_config['funknn'])
        values = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        values['n'] = run_config['data']['n']
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Batch:
    img_lr: np.ndarray
    coords: np.ndarray
    targets: np.ndarray
    d: int
    target_size: int
    s: float


@dataclass
class TrainResult:
    model: FunkNN
    trace: List[Dict[str, Any]] = field(default_factory=list)
    best_loss: float = math.inf
    checkpoints: List[Path] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.trace[-1]['loss'] if self.trace else math.nan


def canonical_order(dataset: Dataset) -> Dataset:
    """Order images by content digest so batches do not depend on the on-disk order."""
    keys = [hashlib.sha256(np.ascontiguousarray(img.values).tobytes()).hexdigest() for img in dataset.images]
    order = sorted(range(len(dataset)), key=lambda i: keys[i])
    return dataset.subset(order)


def draw_sizes(cfg: TrainConfig, rng: np.random.Generator) -> Tuple[int, int, float]:
    if cfg.mode == 'single':
        return cfg.d, cfg.n, cfg.n / cfg.d
    if cfg.mode == 'continuous':
        s = math.exp(rng.uniform(math.log(cfg.s_min), math.log(cfg.s_max)))
        d = max(1, int(round(cfg.n / s)))
        return d, cfg.n, cfg.n / d
    pairs = cfg.factor_sizes()
    d, target = pairs[int(rng.integers(len(pairs)))]
    return d, target, cfg.s


def make_batch(dataset: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    if len(dataset) == 0:
        raise ValidationError("cannot draw a batch from an empty dataset")
    if dataset.resolution != cfg.n:
        raise ValidationError(f"dataset resolution {dataset.resolution} != configured n={cfg.n}")
    d, target, s = draw_sizes(cfg, rng)
    picks = rng.choice(len(dataset), size=cfg.images_per_batch, replace=len(dataset) < cfg.images_per_batch)
    grid = grid_coords(target, target)
    lows, coords, targets = [], [], []
    for i in picks:
        img = dataset.images[int(i)]
        hr = img if target == cfg.n else area_resize(img, target)
        lows.append(area_resize(hr, d).values)
        idx = rng.integers(target * target, size=cfg.pixels_per_batch)
        coords.append(grid[idx])
        targets.append(hr.values.reshape(-1, hr.channels)[idx])
    return Batch(np.stack(lows), np.stack(coords), np.stack(targets), d, target, s)


def batch_loss(model: FunkNN, batch: Batch) -> Tensor:
    """Mean squared residual over every (image, pixel, channel) of the batch."""
    pred = model.query(Tensor(batch.img_lr), batch.coords)
    diff = pred - batch.targets.reshape(-1, model.channels)
    return (diff * diff).mean()


def save_checkpoint(model: FunkNN, path: Path, **metadata: Any) -> Tuple[bool, str]:
    try:
        model.save(path, **metadata)
    except OSError as e:
        return False, f"could not write checkpoint {path}: {e}"
    return True, f"checkpoint written to {path}"


def train(dataset: Dataset, cfg: TrainConfig, out_dir: Union[str, Path, None] = None,
          model: Optional[FunkNN] = None) -> TrainResult:
    """
    Adam on the mean squared regression loss.

    With `out_dir`, writes step_XXXXXX/ every `checkpoint_every` steps plus best/ and final/
    checkpoints and loss_trace.csv. A non-finite loss aborts after saving last_good/.
    """
    dataset = canonical_order(dataset)
    model = model or FunkNN(channels=dataset.channels, p=cfg.patch, width=cfg.width, seed=cfg.seed)
    optimizer = Adam(model.parameters(), lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model)
    meta = {'mode': cfg.mode, 's': cfg.s, 'n': cfg.n, 'seed': cfg.seed}
    best_state = None

    def batch_for(step: int) -> Batch:
        return make_batch(dataset, cfg, np.random.default_rng([cfg.seed, step]))

    logger.info("training FunkNN: mode %s, %d steps", cfg.mode, cfg.steps)
    pending = pool.submit(batch_for, 0) if pool.size > 1 and cfg.steps > 0 else None
    for step in range(cfg.steps):
        batch = pending.result() if pending is not None else batch_for(step)
        if pool.size > 1 and step + 1 < cfg.steps:
            pending = pool.submit(batch_for, step + 1)

        optimizer.zero_grad()
        try:
            loss = batch_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"loss is {value} at step {step}")
            state_before = model.state_dict() if value < result.best_loss else None
            loss.backward()
        except NumericalError:
            logger.error("training diverged at step %d", step)
            if out_dir is not None:
                ok, msg = save_checkpoint(model, out_dir / 'last_good', step=step, **meta)
                logger.error(msg)
            raise

        optimizer.step()
        project_gammas(model.gammas)
        if state_before is not None:
            result.best_loss = value
            best_state = state_before
        result.trace.append({'step': step, 'loss': value, 'lr': cfg.lr, 'mode': cfg.mode,
                             'd': batch.d, 'target': batch.target_size, 's': round(batch.s, 6)})
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d loss %.6g (d=%d -> %d)", step, value, batch.d, batch.target_size)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = out_dir / f'step_{step + 1:06d}'
            ok, msg = save_checkpoint(model, path, step=step + 1, **meta)
            if ok:
                result.checkpoints.append(path)
            else:
                logger.warning(msg)

    if out_dir is not None:
        final = out_dir / 'final'
        model.save(final, step=cfg.steps, final_loss=result.final_loss, **meta)
        result.checkpoints.append(final)
        if best_state is not None:
            best_model = FunkNN(channels=model.channels, p=model.p, width=model.width)
            best_model.load_state_dict(best_state)
            best_model.save(out_dir / 'best', best_loss=result.best_loss, **meta)
            result.checkpoints.append(out_dir / 'best')
        write_trace(result.trace, out_dir / 'loss_trace.csv')
    logger.info("training finished: final loss %.6g, best %.6g", result.final_loss, result.best_loss)
    return result


def hierarchical_superres(model: FunkNN, img: ImageGrid, s: float, levels: int,
                          chunk_size: int = 2048) -> List[ImageGrid]:
    """Repeated fixed-factor super-resolution: sizes d_i = s^i * d."""
    meta: Mapping[str, Any] = getattr(model, 'metadata', {}) or {}
    if meta.get('mode') not in (None, 'factor') or (meta.get('s') is not None and float(meta['s']) != float(s)):
        logger.warning("checkpoint was trained in %s mode with s=%s; running hierarchical s=%s",
                       meta.get('mode'), meta.get('s'), s)
    return model.hierarchical(img, s, levels, chunk_size=chunk_size)
