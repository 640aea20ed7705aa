"""PNG / raw-float import and export, and the dataset directory layout (images/ + manifest.json)."""
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from autodiff.checkpoint import DTYPE_TAG, read_blob, write_blob
from errors import UnsupportedFormatError, ValidationError
from models import Dataset, GaussianSpec, ImageGrid

logger = logging.getLogger(__name__)

DATASET_MANIFEST = 'manifest.json'
DATASET_FORMAT_VERSION = 1
# 8-bit modes PIL may hand back; everything else (I;16, I, F, ...) is rejected
EIGHT_BIT_MODES = {'L', 'RGB', 'RGBA', 'LA', 'P', '1'}

PathLike = Union[str, Path]


def load_png(path: PathLike) -> ImageGrid:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in EIGHT_BIT_MODES:
                raise UnsupportedFormatError(f"{path}: unsupported bit depth / mode '{mode}'")
            if mode in ('1', 'LA'):
                im = im.convert('L')
            elif mode in ('P', 'RGBA'):
                im = im.convert('RGB')
            values = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise UnsupportedFormatError(f"could not read image {path}: {e}")
    return ImageGrid(values)


def save_png(path: PathLike, img: ImageGrid) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.round(np.clip(img.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.channels == 1:
        Image.fromarray(values[:, :, 0], mode='L').save(path)
    elif img.channels == 3:
        Image.fromarray(values, mode='RGB').save(path)
    else:
        raise UnsupportedFormatError(f"PNG export supports 1 or 3 channels, got {img.channels}")
    return path


def tile_grid(images: Sequence[ImageGrid], columns: Optional[int] = None, gap: int = 1) -> ImageGrid:
    """Lay equally sized images out row-major on one canvas, `gap` pixels apart on a white background."""
    if not images:
        raise ValidationError("nothing to tile")
    shapes = {img.values.shape for img in images}
    if len(shapes) != 1:
        raise ValidationError(f"cannot tile mixed image shapes {sorted(shapes)}")
    h, w, c = images[0].values.shape
    columns = columns or math.ceil(math.sqrt(len(images)))
    rows = math.ceil(len(images) / columns)
    canvas = np.ones((rows * h + (rows - 1) * gap, columns * w + (columns - 1) * gap, c), dtype=np.float32)
    for k, img in enumerate(images):
        top, left = (k // columns) * (h + gap), (k % columns) * (w + gap)
        canvas[top:top + h, left:left + w] = img.values
    return ImageGrid(canvas)


def save_png_grid(path: PathLike, images: Sequence[ImageGrid], columns: Optional[int] = None) -> Path:
    return save_png(path, tile_grid(images, columns))


def save_raw(path: PathLike, img: ImageGrid) -> Path:
    """Little-endian float32 payload with a JSON sidecar (`<name>.json`)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_blob(path, img.values)
    header = {'format_version': DATASET_FORMAT_VERSION, 'dtype': DTYPE_TAG, 'shape': list(img.values.shape)}
    path.with_suffix('.json').write_text(json.dumps(header, indent=2))
    return path


def load_raw(path: PathLike) -> ImageGrid:
    path = Path(path)
    sidecar = path.with_suffix('.json')
    if not sidecar.is_file():
        raise UnsupportedFormatError(f"no sidecar header next to {path}")
    header = json.loads(sidecar.read_text())
    if header.get('dtype') != DTYPE_TAG:
        raise UnsupportedFormatError(f"unsupported raw dtype {header.get('dtype')}")
    return ImageGrid(read_blob(path, tuple(header['shape'])))


def load_image(path: PathLike) -> ImageGrid:
    path = Path(path)
    if path.suffix.lower() == '.png':
        return load_png(path)
    if path.suffix.lower() == '.bin':
        return load_raw(path)
    raise UnsupportedFormatError(f"unsupported image file {path.name} (expected .png or .bin)")


def write_dataset(dataset: Dataset, directory: PathLike, raw: bool = True) -> Path:
    directory = Path(directory)
    (directory / 'images').mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(dataset.images):
        name = f'{i:05d}'
        save_png(directory / 'images' / f'{name}.png', img)
        if raw:
            save_raw(directory / 'raw' / f'{name}.bin', img)
        files.append(name)
    manifest: Dict[str, Any] = {
        'format_version': DATASET_FORMAT_VERSION,
        'kind': dataset.kind,
        'seed': dataset.seed,
        'resolution': dataset.resolution,
        'channels': dataset.channels,
        'files': files,
        'train': list(dataset.train),
        'test': list(dataset.test),
    }
    if dataset.specs is not None:
        manifest['gaussians'] = [spec.to_dict() for spec in dataset.specs]
    (directory / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2))
    logger.info("wrote %r to %s", dataset, directory)
    return directory


def read_dataset(directory: PathLike) -> Dataset:
    """Read a dataset directory; raw payloads win over PNGs when both exist."""
    directory = Path(directory)
    manifest_path = directory / DATASET_MANIFEST
    if not manifest_path.is_file():
        raise ValidationError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    images = []
    for name in manifest['files']:
        raw_path = directory / 'raw' / f'{name}.bin'
        images.append(load_raw(raw_path) if raw_path.is_file() else load_png(directory / 'images' / f'{name}.png'))
    specs = None
    if 'gaussians' in manifest:
        specs = [GaussianSpec.from_dict(d) for d in manifest['gaussians']]
    return Dataset(images, kind=manifest.get('kind', 'custom'), seed=manifest.get('seed'), specs=specs,
                   train=list(manifest.get('train', [])), test=list(manifest.get('test', [])))
