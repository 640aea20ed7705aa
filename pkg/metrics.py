"""SNR metrics, the bilinear baseline, and the super-resolution / derivative evaluation reports."""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Union

import numpy as np

from errors import ShapeError, ValidationError
from models import Dataset, ImageGrid, MetricReport, grid_coords
from synth_data.generators import area_resize, gaussian_image

logger = logging.getLogger(__name__)

SNR_CAP_DB = 300.0
MIN_RESIDUAL_POWER = 1e-30


def _pair(x_hat, x):
    x_hat = np.asarray(getattr(x_hat, 'values', x_hat), dtype=np.float64)
    x = np.asarray(getattr(x, 'values', x), dtype=np.float64)
    if x_hat.shape != x.shape:
        raise ShapeError(f"cannot compare shapes {x_hat.shape} and {x.shape}")
    return x_hat.ravel(), x.ravel()


def snr(x_hat, x) -> float:
    """10 log10(|x|^2 / |x - x_hat|^2), capped at SNR_CAP_DB."""
    x_hat, x = _pair(x_hat, x)
    signal = float(np.sum(x * x))
    if signal == 0.0:
        raise ValidationError("SNR undefined for an all-zero reference")
    residual = float(np.sum((x - x_hat) ** 2))
    if residual < MIN_RESIDUAL_POWER:
        return SNR_CAP_DB
    return float(min(10.0 * np.log10(signal / residual), SNR_CAP_DB))


def affine_fit(x_hat, x):
    """Least-squares (a, b) minimizing |a x_hat + b - x|^2."""
    x_hat, x = _pair(x_hat, x)
    centered = x_hat - x_hat.mean()
    var = float(np.sum(centered * centered))
    a = float(np.sum(centered * (x - x.mean())) / var) if var > 0.0 else 0.0
    b = float(x.mean() - a * x_hat.mean())
    return a, b


def si_snr(x_hat, x) -> float:
    """SNR after the optimal affine intensity map (scale and shift) is applied to the estimate."""
    a, b = affine_fit(x_hat, x)
    x_hat_flat, x_flat = _pair(x_hat, x)
    return snr(a * x_hat_flat + b, x_flat)


def bilinear_upsample(img: ImageGrid, size: int) -> ImageGrid:
    """Bilinear interpolation onto the size x size pixel-center grid (edge pixels replicated)."""
    if size < 1:
        raise ShapeError(f"target size must be positive, got {size}")
    coords = grid_coords(size, size)

    def axis(coord: np.ndarray, n: int):
        pos = np.clip(((coord + 1.0) * n - 1.0) / 2.0, 0.0, n - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, pos - lo

    x0, x1, fx = axis(coords[:, 0], img.width)
    y0, y1, fy = axis(coords[:, 1], img.height)
    v = img.values.astype(np.float64)
    fx, fy = fx[:, None], fy[:, None]
    out = ((1 - fy) * ((1 - fx) * v[y0, x0] + fx * v[y0, x1])
           + fy * ((1 - fx) * v[y1, x0] + fx * v[y1, x1]))
    return ImageGrid(out.reshape(size, size, -1))


def superres_report(model, dataset: Dataset, scales: Sequence[float] = (2.0,), hierarchical_factor: Optional[int] = None,
                    chunk_size: int = 2048) -> Dict[str, MetricReport]:
    """
    Per-image SNR of FunkNN against bilinear interpolation at each scale.

    Each image of `dataset` is the ground truth at resolution n; its low-res input is the area
    downsample at n / s. With `hierarchical_factor`, scales that are powers of it are also
    evaluated by repeated application of the fixed-factor model.
    """
    reports: Dict[str, MetricReport] = {}
    for scale in scales:
        for method in ('funknn', 'bilinear'):
            reports[f'{method}_x{scale:g}'] = MetricReport(f'{method}_x{scale:g}', metadata={'scale': scale})
        if hierarchical_factor:
            reports[f'hierarchical_x{scale:g}'] = MetricReport(f'hierarchical_x{scale:g}', metadata={'scale': scale})

    for idx, img in enumerate(dataset.images):
        n = img.height
        coords = grid_coords(n, n)
        for scale in scales:
            d = n / scale
            if abs(d - round(d)) > 1e-9:
                raise ValidationError(f"scale {scale} does not give an integral low-res size for n={n}")
            lr = area_resize(img, int(round(d)))
            pred = model.evaluate(lr, coords, chunk_size=chunk_size).reshape(img.values.shape)
            reports[f'funknn_x{scale:g}'].add(snr(pred, img), str(idx))
            reports[f'bilinear_x{scale:g}'].add(snr(bilinear_upsample(lr, n), img), str(idx))
            if hierarchical_factor:
                levels = np.log(scale) / np.log(hierarchical_factor)
                if abs(levels - round(levels)) > 1e-9:
                    reports.pop(f'hierarchical_x{scale:g}', None)
                    continue
                outputs = model.hierarchical(lr, hierarchical_factor, int(round(levels)),
                                          chunk_size=chunk_size)
                reports[f'hierarchical_x{scale:g}'].add(snr(outputs[-1], img), str(idx))
    for report in reports.values():
        logger.info("%r", report)
    return reports


def derivative_report(model, dataset: Dataset, lr_size: int, chunk_size: int = 2048) -> Dict[str, MetricReport]:
    """Image / gradient / Laplacian SNR against the closed-form fields of Gaussian test items."""
    if dataset.specs is None:
        raise ValidationError("derivative report needs items with analytic derivative ground truth")
    reports = {name: MetricReport(name, metadata={'lr_size': lr_size})
               for name in ('image', 'gradient', 'laplacian')}
    for idx, (img, spec) in enumerate(zip(dataset.images, dataset.specs)):
        n = img.height
        truth, field = gaussian_image(spec, n)
        lr = area_resize(img, lr_size)
        values = model.evaluate(lr, field.coords, chunk_size=chunk_size)
        grads, _ = model.spatial_derivatives(lr, field.coords, order=1, chunk_size=chunk_size)
        laps, knots = model.spatial_derivatives(lr, field.coords, order=2, chunk_size=chunk_size)
        reports['image'].add(snr(values.reshape(truth.values.shape), truth), str(idx))
        reports['gradient'].add(snr(grads, field.gradients), str(idx))
        reports['laplacian'].add(snr(laps, field.laplacians), str(idx))
        if knots.any():
            reports['laplacian'].metadata['knot_queries'] = reports['laplacian'].metadata.get('knot_queries', 0) + int(knots.sum())
    for report in reports.values():
        logger.info("%r", report)
    return reports


def write_reports(reports: Union[Dict[str, MetricReport], Iterable[MetricReport]], directory: Union[str, Path],
                  stem: str = 'metrics', **metadata) -> Path:
    """`<stem>.csv` with one row per item and one column per report; `<stem>.json` with aggregates."""
    reports = list(reports.values()) if isinstance(reports, dict) else list(reports)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for report in reports:
        for item in report.item_ids:
            if item not in items:
                items.append(item)
    with open(directory / f'{stem}.csv', 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['item'] + [r.name for r in reports])
        for item in items:
            row = [item]
            for report in reports:
                lookup = dict(zip(report.item_ids, report.values))
                row.append('' if item not in lookup else f'{lookup[item]:.6f}')
            writer.writerow(row)
    summary = {'metadata': metadata, 'reports': [r.to_dict() for r in reports]}
    path = directory / f'{stem}.json'
    path.write_text(json.dumps(summary, indent=2, default=float))
    return path


def write_trace(rows: Sequence[Dict], path: Union[str, Path]) -> Path:
    """Step-wise trace (loss / objective rows) as CSV; the columns are the union of row keys in first-seen order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path
