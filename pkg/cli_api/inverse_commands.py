import json
import logging
import math
from pathlib import Path

import click
import numpy as np

from cli_api.common import finish, handle_errors, out_dir, run_config, save_image, write_summary
from errors import ValidationError
from funknn.model import FunkNN
from inverse.radon import (add_noise, angles_from_range, fbp, fbp_warnings, load_sinogram, radon_forward,
                          save_sinogram)
from inverse.solvers import (SolveConfig, select_top_gradients, solve_gradient_inversion,
                             solve_limited_ct, solve_sparse_gradient, solve_sparse_gradient_baseline)
from metrics import si_snr, write_trace
from models import GaussianSpec
from prior.generator import Prior
from synth_data.generators import area_resize, derivative_observations, gaussian_image
from synth_data.image_io import load_image

logger = logging.getLogger(__name__)


def parse_range(text: str):
    try:
        lo, hi = (float(v) for v in text.split(','))
    except ValueError:
        raise ValidationError(f"angle range must look like 'lo,hi' in degrees, got '{text}'")
    if hi <= lo:
        raise ValidationError(f"empty angle range [{lo}, {hi}]")
    return lo, hi


def range_angles(lo: float, hi: float, views: int) -> np.ndarray:
    # a half-turn or more is sampled with an open end so 0 and 180 degrees are not both used
    return angles_from_range(lo, hi, views, endpoint=(hi - lo) < 180.0)


def read_observation(path: str, n: int):
    """(ground-truth image at n x n, source for derivative observations)"""
    if path.lower().endswith('.json'):
        spec = GaussianSpec.from_dict(json.loads(Path(path).read_text()))
        return gaussian_image(spec, n)[0], spec
    img = load_image(path)
    if img.height != n or img.width != n:
        img = area_resize(img, n)
    return img, img


@click.command('radon')
@click.option('--input', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--angles-range', default=None, help="Degrees as 'lo,hi'; the config's range when omitted.")
@click.option('--views', type=int, default=None)
@click.option('--snr-db', type=float, default=None, help='Per-row SNR of the added noise; inf for none.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def radon(ctx, input_path, angles_range, views, snr_db, config_path, out):
    """Project an image into a (noisy) parallel-beam sinogram."""
    cfg = run_config(ctx, config_path, radon__views=views, radon__snr_db=snr_db)
    if angles_range:
        lo, hi = parse_range(angles_range)
        cfg.set('radon.angle_min', lo).set('radon.angle_max', hi)
    target = out_dir(ctx, cfg, out, 'radon')
    section = cfg['radon']
    img = load_image(input_path)
    angles = range_angles(float(section['angle_min']), float(section['angle_max']), int(section['views']))
    sino = radon_forward(img, angles, oversample=int(section['oversample']))
    sino = add_noise(sino, float(section['snr_db']), ctx.obj['seed'])
    sino.metadata['window'] = section['window']
    save_sinogram(sino, target)
    cfg.write(target)
    finish({'views': sino.n_views, 'n_det': sino.n_det, 'out': str(target)})


@click.command('fbp')
@click.option('--sino', 'sino_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--window', type=click.Choice(['hann', 'ramlak']), default=None)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def fbp_command(ctx, sino_dir, window, config_path, out):
    """Filtered back-projection of a stored sinogram."""
    cfg = run_config(ctx, config_path, radon__window=window)
    target = out_dir(ctx, cfg, out, 'fbp')
    sino = load_sinogram(sino_dir)
    recon = fbp(sino, window=cfg['radon']['window'])
    save_image(cfg, target, 'fbp', recon)
    cfg.write(target)
    warnings = fbp_warnings(sino)
    write_summary(target, {'sinogram': sino_dir, 'window': cfg['radon']['window'], 'views': sino.n_views,
                           'warnings': warnings})
    finish({'out': str(target), 'window': cfg['radon']['window'], 'warnings': warnings})


@click.command('solve')
@click.option('--problem', type=click.Choice(['grad', 'sparse-grad', 'ct']), default=None)
@click.option('--prior', 'prior_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--funknn', 'funknn_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--observation', type=click.Path(exists=True, dir_okay=False), default=None,
              help='Ground-truth image (.png/.bin) or Gaussian spec (.json).')
@click.option('--sino', 'sino_dir', type=click.Path(exists=True, file_okay=False), default=None)
@click.option('--baseline/--no-baseline', default=True, help='Also run the prior-free comparison.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def solve(ctx, problem, prior_dir, funknn_dir, observation, sino_dir, baseline, config_path, out):
    """Reconstruct from derivatives or a limited-view sinogram with the FunkNN prior."""
    cfg = run_config(ctx, config_path, solver__problem=problem)
    target = out_dir(ctx, cfg, out, 'solve')
    solve_cfg = SolveConfig.from_run_config(cfg, seed=ctx.obj['seed'])
    prior = Prior.load(prior_dir)
    model = FunkNN.load(funknn_dir)
    n = 2 * prior.image_size
    cfg.write(target)
    metrics = {}
    notes = {}
    truth = None

    if solve_cfg.problem == 'ct':
        if sino_dir:
            sino = load_sinogram(sino_dir)
            n = sino.image_size
            if observation:
                truth = read_observation(observation, n)[0]
        elif observation:
            truth = read_observation(observation, n)[0]
            section = cfg['radon']
            angles = range_angles(float(section['angle_min']), float(section['angle_max']), int(section['views']))
            sino = add_noise(radon_forward(truth, angles, int(section['oversample'])),
                             float(section['snr_db']), solve_cfg.seed)
            sino.metadata['window'] = section['window']
            save_sinogram(sino, target / 'sinogram')
        else:
            raise ValidationError("ct needs --sino or --observation")
        z_star, recon, trace = solve_limited_ct(sino, prior, model, solve_cfg)
        reference = fbp(sino)
        notes['fbp_warnings'] = fbp_warnings(sino)
        save_image(cfg, target, 'fbp', reference)
        if truth is not None:
            metrics['fbp_si_snr'] = si_snr(reference, truth)
    else:
        if not observation:
            raise ValidationError(f"{solve_cfg.problem} needs --observation")
        truth, source = read_observation(observation, n)
        field = derivative_observations(source, n)
        if solve_cfg.problem == 'grad':
            z_star, recon, trace = solve_gradient_inversion(field, prior, model, solve_cfg)
        else:
            field = select_top_gradients(field, solve_cfg.fraction)
            z_star, recon, trace = solve_sparse_gradient(field, prior, model, solve_cfg)
            if baseline:
                base, base_trace = solve_sparse_gradient_baseline(field, solve_cfg, n=n, channels=model.channels)
                save_image(cfg, target, 'baseline', base)
                write_trace(base_trace, target / 'baseline_trace.csv')
                metrics['baseline_si_snr'] = si_snr(base, truth)
        metrics['observations'] = len(field)

    save_image(cfg, target, 'reconstruction', recon)
    write_trace(trace, target / 'trace.csv')
    if truth is not None:
        metrics['si_snr'] = si_snr(recon, truth)
    final = trace[-1]['objective'] if trace else math.nan
    report = {'config': solve_cfg.to_dict(), 'metrics': metrics, 'final_objective': final,
              'best_objective': trace[-1]['best'] if trace else math.nan, 'z': [float(v) for v in z_star]}
    report.update(notes)
    write_summary(target, report)
    finish({'metrics': metrics, 'final_objective': final, 'out': str(target)})


inverse_commands = [radon, fbp_command, solve]
