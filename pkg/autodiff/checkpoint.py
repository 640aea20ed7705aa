import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np

from errors import CheckpointError, UnsupportedFormatError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPE_TAG = 'float32-le'
MANIFEST = 'manifest.json'


def write_blob(path: Path, values: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(values, dtype='<f4').tobytes())


def read_blob(path: Path, shape) -> np.ndarray:
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise CheckpointError(f"{path.name}: {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype='<f4').reshape(shape).astype(np.float32)


class Checkpoint:
    """Named parameter bundle: a directory with a JSON manifest plus one raw float32 blob per tensor."""

    def __init__(self, kind: str, architecture: Mapping[str, Any], params: Mapping[str, np.ndarray],
                 metadata: Optional[Mapping[str, Any]] = None):
        self.kind = kind
        self.architecture = dict(architecture)
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.asarray(value, dtype=np.float32)) for name, value in params.items())
        self.metadata = dict(metadata or {})

    def __repr__(self):
        return f'<Checkpoint {self.kind}: {len(self.params)} tensors, {self.parameter_count()} values>'

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, value in self.params.items():
            filename = name.replace('/', '_') + '.bin'
            write_blob(path / filename, value)
            entries.append({'name': name, 'shape': list(value.shape), 'dtype': DTYPE_TAG, 'file': filename})
        manifest = {
            'format_version': FORMAT_VERSION,
            'kind': self.kind,
            'architecture': self.architecture,
            'metadata': self.metadata,
            'params': entries,
        }
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        logger.debug("saved %r to %s", self, path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path], kind: Optional[str] = None) -> "Checkpoint":
        path = Path(path)
        manifest_path = path / MANIFEST
        if not manifest_path.is_file():
            raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"could not decode {manifest_path}: {e}")
        if manifest.get('format_version') != FORMAT_VERSION:
            raise UnsupportedFormatError(f"checkpoint format version {manifest.get('format_version')} not supported")
        if kind is not None and manifest.get('kind') != kind:
            raise CheckpointError(f"expected a '{kind}' checkpoint, found '{manifest.get('kind')}'")
        params: Dict[str, np.ndarray] = OrderedDict()
        for entry in manifest['params']:
            if entry.get('dtype') != DTYPE_TAG:
                raise UnsupportedFormatError(f"unsupported dtype tag {entry.get('dtype')}")
            params[entry['name']] = read_blob(path / entry['file'], tuple(entry['shape']))
        return cls(manifest['kind'], manifest.get('architecture', {}), params, manifest.get('metadata', {}))
