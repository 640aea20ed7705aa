"""
Parallel-beam Radon transform on the [-1, 1]^2 image domain.

The operator is assembled once per (size, angles, oversampling) as a sparse matrix: each detector
row integrates the bilinear interpolant of the image along its ray with step dt / oversample.
Detector spacing equals the pixel size 2 / n and n_det = ceil(sqrt(2) n) bins span the diagonal.
"""
import json
import logging
import math
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from autodiff.checkpoint import DTYPE_TAG, read_blob, write_blob
from autodiff.functional import apply_linear
from autodiff.tensor import Tensor
from errors import ShapeError, UnsupportedFormatError, ValidationError
from models import ImageGrid, Sinogram

logger = logging.getLogger(__name__)

SINOGRAM_FORMAT_VERSION = 1
DEFAULT_OVERSAMPLE = 2
WINDOWS = ('hann', 'ramlak')


def detector_count(n: int) -> int:
    return int(math.ceil(math.sqrt(2.0) * n))


def angles_from_range(lo_deg: float, hi_deg: float, views: int, endpoint: bool = True) -> np.ndarray:
    """`views` angles in radians, uniform over [lo, hi] (or [lo, hi) with endpoint=False)."""
    if views < 1:
        raise ValidationError(f"need at least one view, got {views}")
    return np.deg2rad(np.linspace(lo_deg, hi_deg, views, endpoint=endpoint))


def full_view_angles(views: int = 180) -> np.ndarray:
    return angles_from_range(0.0, 180.0, views, endpoint=False)


def _bilinear_taps(coord: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    pos = ((coord + 1.0) * n - 1.0) / 2.0
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    return np.stack([lo, lo + 1], axis=-1), np.stack([1.0 - frac, frac], axis=-1)


@lru_cache(maxsize=16)
def _system_matrix(n: int, angles: Tuple[float, ...], oversample: int) -> sp.csr_matrix:
    n_det = detector_count(n)
    dt = 2.0 / n
    ds = dt / oversample
    t = (np.arange(n_det) - (n_det - 1) / 2.0) * dt
    n_s = oversample * n_det
    s = (np.arange(n_s) - (n_s - 1) / 2.0) * ds
    rows = []
    for theta in angles:
        c, si = math.cos(theta), math.sin(theta)
        x = t[:, None] * c - s[None, :] * si
        y = t[:, None] * si + s[None, :] * c
        cols_x, wx = _bilinear_taps(x, n)
        rows_y, wy = _bilinear_taps(y, n)
        # [n_det, n_s, 2 (y tap), 2 (x tap)]
        yi = rows_y[:, :, :, None]
        xi = cols_x[:, :, None, :]
        weight = wy[:, :, :, None] * wx[:, :, None, :] * ds
        valid = (yi >= 0) & (yi < n) & (xi >= 0) & (xi < n) & (weight != 0.0)
        det = np.broadcast_to(np.arange(n_det)[:, None, None, None], valid.shape)
        pixel = np.broadcast_to(yi * n + xi, valid.shape)
        block = sp.coo_matrix((np.broadcast_to(weight, valid.shape)[valid], (det[valid], pixel[valid])),
                              shape=(n_det, n * n)).tocsr()
        rows.append(block)
    return sp.vstack(rows, format='csr')


class RadonOperator:
    """A(alpha) for one image size and angle set; `adjoint` is the exact transpose."""

    def __init__(self, n: int, angles: Sequence[float], oversample: int = DEFAULT_OVERSAMPLE):
        angles = np.asarray(angles, dtype=np.float64).reshape(-1)
        if angles.size == 0:
            raise ValidationError("the angle list is empty")
        if n < 2:
            raise ShapeError(f"image size must be >= 2, got {n}")
        self.n = n
        self.angles = angles
        self.oversample = int(oversample)
        self.n_det = detector_count(n)
        self.detector_spacing = 2.0 / n
        self.matrix = _system_matrix(n, tuple(float(a) for a in angles), self.oversample)

    def __repr__(self):
        return f'<RadonOperator n={self.n} views={self.angles.size} n_det={self.n_det}>'

    def forward(self, values: np.ndarray) -> np.ndarray:
        """[n, n] or [n*n] -> [views, n_det]"""
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        if flat.size != self.n * self.n:
            raise ShapeError(f"expected an image of {self.n}x{self.n}, got {np.shape(values)}")
        return (self.matrix @ flat).reshape(self.angles.size, self.n_det)

    def adjoint(self, sino_values: np.ndarray) -> np.ndarray:
        """[views, n_det] -> [n, n]"""
        flat = np.asarray(sino_values, dtype=np.float64).reshape(-1)
        if flat.size != self.matrix.shape[0]:
            raise ShapeError(f"expected a [{self.angles.size}, {self.n_det}] sinogram, got {np.shape(sino_values)}")
        return (self.matrix.T @ flat).reshape(self.n, self.n)

    def apply(self, image: Tensor) -> Tensor:
        """Differentiable A x for an [n, n] (or [n, n, 1]) image Tensor."""
        shape = image.shape

        def fwd(x: np.ndarray) -> np.ndarray:
            return self.forward(x).astype(x.dtype)

        def adj(g: np.ndarray) -> np.ndarray:
            return self.adjoint(g).reshape(shape).astype(g.dtype)

        return apply_linear(image, fwd, adj)

    def metadata(self) -> dict:
        return {'geometry': 'parallel', 'n_det': self.n_det, 'detector_spacing': self.detector_spacing,
                'oversample': self.oversample}


def _single_channel(img: ImageGrid) -> np.ndarray:
    if img.channels != 1 or img.height != img.width:
        raise ShapeError(f"the Radon transform needs a square single-channel image, got {img!r}")
    return img.values[:, :, 0]


def radon_forward(img: ImageGrid, angles: Sequence[float], oversample: int = DEFAULT_OVERSAMPLE) -> Sinogram:
    op = RadonOperator(img.height, angles, oversample)
    values = op.forward(_single_channel(img))
    return Sinogram(op.angles, values, img.height, op.detector_spacing, op.metadata())


def radon_adjoint(sino: Sinogram) -> ImageGrid:
    op = RadonOperator(sino.image_size, sino.angles, sino.metadata.get('oversample', DEFAULT_OVERSAMPLE))
    return ImageGrid(op.adjoint(sino.values))


def ramp_filter(values: np.ndarray, spacing: float, window: str = 'hann') -> np.ndarray:
    """Row-wise |nu| filtering in the frequency domain (zero-padded), optionally Hann-apodized."""
    if window not in WINDOWS:
        raise ValidationError(f"unknown filter window '{window}', expected one of {list(WINDOWS)}")
    n_det = values.shape[1]
    n_pad = int(2 ** math.ceil(math.log2(max(2 * n_det, 2))))
    freqs = np.fft.fftfreq(n_pad, d=spacing)
    response = np.abs(freqs)
    if window == 'hann':
        nyquist = 0.5 / spacing
        response = response * 0.5 * (1.0 + np.cos(np.pi * freqs / nyquist))
    spectrum = np.fft.fft(values, n=n_pad, axis=1) * response[None, :]
    return np.real(np.fft.ifft(spectrum, axis=1))[:, :n_det]


def fbp_warnings(sino: Sinogram) -> List[str]:
    """Conditions under which an FBP image should not be read as a reconstruction."""
    notes = []
    if sino.n_views == 1:
        notes.append('single_view: the result is only a smeared back-projection')
    return notes


def fbp(sino: Sinogram, window: Optional[str] = None) -> ImageGrid:
    """Filtered back-projection: ramp filter per row, then the adjoint scaled to a quadrature over angles."""
    window = window or sino.metadata.get('window', 'hann')
    for warning in fbp_warnings(sino):
        logger.warning("FBP: %s", warning)
    op = RadonOperator(sino.image_size, sino.angles, sino.metadata.get('oversample', DEFAULT_OVERSAMPLE))
    if sino.n_det != op.n_det:
        raise ShapeError(f"sinogram has {sino.n_det} detectors, geometry expects {op.n_det}")
    filtered = ramp_filter(sino.values.astype(np.float64), sino.detector_spacing, window)
    pixel_area = (2.0 / sino.image_size) ** 2
    scale = (math.pi / sino.n_views) * (sino.detector_spacing / pixel_area)
    return ImageGrid((scale * op.adjoint(filtered))[:, :, None])


def add_noise(sino: Sinogram, snr_db: float, seed: int) -> Sinogram:
    """Gaussian noise per row with variance set so that each row's SNR equals snr_db."""
    if math.isinf(snr_db) and snr_db > 0:
        return sino.with_values(sino.values.copy(), snr_db=None)
    if not math.isfinite(snr_db):
        raise ValidationError(f"snr_db must be finite or +inf, got {snr_db}")
    rng = np.random.default_rng(seed)
    values = sino.values.astype(np.float64)
    power = np.mean(values ** 2, axis=1)
    silent = power == 0.0
    if silent.any():
        logger.warning("%d sinogram rows have zero power and are left noise-free", int(silent.sum()))
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    noisy = values + rng.standard_normal(values.shape) * sigma[:, None]
    return sino.with_values(noisy, snr_db=snr_db, noise_seed=seed)


def row_snr(clean: Sinogram, noisy: Sinogram) -> np.ndarray:
    signal = np.sum(clean.values.astype(np.float64) ** 2, axis=1)
    residual = np.sum((noisy.values.astype(np.float64) - clean.values) ** 2, axis=1)
    return 10.0 * np.log10(signal / residual)


def save_sinogram(sino: Sinogram, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_blob(directory / 'values.bin', sino.values)
    header = {
        'format_version': SINOGRAM_FORMAT_VERSION,
        'dtype': DTYPE_TAG,
        'angles': [float(a) for a in sino.angles],
        'n_det': sino.n_det,
        'image_size': sino.image_size,
        'detector_spacing': sino.detector_spacing,
        'metadata': sino.metadata,
    }
    (directory / 'header.json').write_text(json.dumps(header, indent=2))
    return directory


def load_sinogram(directory: Union[str, Path]) -> Sinogram:
    directory = Path(directory)
    header_path = directory / 'header.json'
    if not header_path.is_file():
        raise UnsupportedFormatError(f"no sinogram header at {header_path}")
    header = json.loads(header_path.read_text())
    if header.get('format_version') != SINOGRAM_FORMAT_VERSION or header.get('dtype') != DTYPE_TAG:
        raise UnsupportedFormatError(f"unsupported sinogram format in {header_path}")
    angles = np.asarray(header['angles'], dtype=np.float64)
    values = read_blob(directory / 'values.bin', (angles.size, int(header['n_det'])))
    return Sinogram(angles, values, int(header['image_size']), float(header['detector_spacing']),
                    header.get('metadata', {}))
