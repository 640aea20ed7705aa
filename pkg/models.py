from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from errors import ShapeError, ValidationError

SIGMA_RANGE = (0.1, 0.4)


def grid_coords(height: int, width: int) -> np.ndarray:
    """Pixel-center coordinates (x, y) in [-1, 1]^2, row-major over (row, col)."""
    xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ys = -1.0 + (2.0 * np.arange(height) + 1.0) / height
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class ImageGrid:
    """Discrete image [H, W, C]; pixel (i, j) sits at x = -1 + (2j+1)/W, y = -1 + (2i+1)/H."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(f"degenerate image of shape {values.shape}")
        self.values = values

    def __repr__(self):
        return f'<ImageGrid {self.height}x{self.width}x{self.channels}>'

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_channels_first(cls, array: np.ndarray) -> "ImageGrid":
        """[C, H, W] (network layout) to [H, W, C]."""
        return cls(np.transpose(np.asarray(array), (1, 2, 0)))

    def channels_first(self) -> np.ndarray:
        return np.ascontiguousarray(np.transpose(self.values, (2, 0, 1)))

    def clipped(self) -> "ImageGrid":
        return ImageGrid(np.clip(self.values, 0.0, 1.0))


@dataclass
class Sinogram:
    """One row per projection angle (radians), detector axis spanning the image diagonal."""
    angles: np.ndarray
    values: np.ndarray
    image_size: int
    detector_spacing: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != self.angles.size:
            raise ShapeError(f"sinogram values {self.values.shape} do not match {self.angles.size} angles")

    def __repr__(self):
        return f'<Sinogram {self.n_views} views x {self.n_det} detectors for {self.image_size}^2>'

    @property
    def n_views(self) -> int:
        return self.values.shape[0]

    @property
    def n_det(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray, **metadata: Any) -> "Sinogram":
        merged = dict(self.metadata)
        merged.update(metadata)
        return Sinogram(self.angles.copy(), values, self.image_size, self.detector_spacing, merged)


@dataclass
class DerivativeField:
    """Gradient vectors (and optional Laplacians) sampled at a set of coordinates."""
    coords: np.ndarray
    gradients: np.ndarray
    laplacians: Optional[np.ndarray] = None
    grid_size: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.gradients = np.asarray(self.gradients, dtype=np.float32)
        if self.gradients.ndim == 2:
            self.gradients = self.gradients[:, :, None]
        if self.gradients.shape[:2] != (self.coords.shape[0], 2):
            raise ShapeError(
                f"{self.coords.shape[0]} coordinates but gradients of shape {self.gradients.shape}")
        if self.laplacians is not None:
            self.laplacians = np.asarray(self.laplacians, dtype=np.float32).reshape(self.coords.shape[0], -1)

    def __repr__(self):
        return f'<DerivativeField {len(self)} points x {self.channels} channels>'

    def __len__(self):
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.gradients.shape[2]

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.gradients.astype(np.float64) ** 2, axis=(1, 2)))

    def subset(self, index: np.ndarray) -> "DerivativeField":
        laplacians = None if self.laplacians is None else self.laplacians[index]
        return DerivativeField(self.coords[index], self.gradients[index], laplacians, self.grid_size)


@dataclass
class GaussianSpec:
    """g(x, y) = exp(-((x - x0)^2 + (y - y0)^2) / (2 sigma^2))"""
    x0: float
    y0: float
    sigma: float

    def __post_init__(self):
        if not SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1]:
            raise ValidationError(f"sigma {self.sigma} outside {SIGMA_RANGE}")
        if abs(self.x0) > 1.0 or abs(self.y0) > 1.0:
            raise ValidationError(f"center ({self.x0}, {self.y0}) outside the field of view")

    @classmethod
    def from_rng(cls, rng: np.random.Generator) -> "GaussianSpec":
        x0, y0 = rng.uniform(-1.0, 1.0, size=2)
        return cls(float(x0), float(y0), float(rng.uniform(*SIGMA_RANGE)))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GaussianSpec":
        return cls(float(data.get('x0', 0.0)), float(data.get('y0', 0.0)), float(data.get('sigma', 0.2)))

    def to_dict(self) -> Dict[str, float]:
        return {'x0': self.x0, 'y0': self.y0, 'sigma': self.sigma}


@dataclass
class MetricReport:
    """Per-item metric values; `aggregate` is their arithmetic mean."""
    name: str
    values: List[float] = field(default_factory=list)
    item_ids: List[str] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __repr__(self):
        return f'<MetricReport {self.name}: {self.aggregate:.2f} dB over {len(self.values)} items>'

    def add(self, value: float, item_id: Optional[str] = None) -> None:
        self.values.append(float(value))
        self.item_ids.append(item_id if item_id is not None else str(len(self.values) - 1))

    @property
    def aggregate(self) -> float:
        return float(np.mean(self.values)) if self.values else float('nan')

    def rows(self) -> List[Dict[str, Any]]:
        return [{'item': i, self.name: v} for i, v in zip(self.item_ids, self.values)]

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'mean': self.aggregate, 'count': len(self.values),
                'values': list(self.values), 'metadata': dict(self.metadata)}

    @classmethod
    def from_values(cls, name: str, values: Sequence[float], **metadata: Any) -> "MetricReport":
        report = cls(name, metadata=dict(metadata))
        for v in values:
            report.add(v)
        return report


@dataclass
class Dataset:
    """Images of one resolution with their train/test split; Gaussian items keep their specs."""
    images: List[ImageGrid]
    kind: str = 'custom'
    seed: Optional[int] = None
    specs: Optional[List[GaussianSpec]] = None
    train: List[int] = field(default_factory=list)
    test: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.images:
            shapes = {img.values.shape for img in self.images}
            if len(shapes) != 1:
                raise ShapeError(f"dataset mixes image shapes {sorted(shapes)}")
        if not self.train and not self.test:
            self.train = list(range(len(self.images)))
        if self.specs is not None and len(self.specs) != len(self.images):
            raise ValidationError(f"{len(self.specs)} specs for {len(self.images)} images")

    def __repr__(self):
        return f'<Dataset {self.kind}: {len(self.images)} images at {self.resolution}>'

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self) -> Optional[int]:
        return self.images[0].height if self.images else None

    @property
    def channels(self) -> Optional[int]:
        return self.images[0].channels if self.images else None

    def subset(self, index: Sequence[int]) -> "Dataset":
        specs = None if self.specs is None else [self.specs[i] for i in index]
        return Dataset([self.images[i] for i in index], self.kind, self.seed, specs)

    def train_set(self) -> "Dataset":
        return self.subset(self.train)

    def test_set(self) -> "Dataset":
        return self.subset(self.test)
