import logging

import click
import numpy as np

from cli_api.common import finish, handle_errors, load_or_generate, out_dir, run_config, save_image, write_summary
from funknn.model import FunkNN
from funknn.training import MODES, TrainConfig, hierarchical_superres, train
from metrics import write_reports
from models import Dataset, ImageGrid, grid_coords
from prior.generator import Prior, reconstruction_report
from prior.training import PriorConfig, prepare_images, train_ae, train_flow
from synth_data.image_io import load_image, save_png_grid, save_raw

logger = logging.getLogger(__name__)


@click.command('train')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--data', type=click.Path(exists=True, file_okay=False), default=None,
              help='Dataset directory; generated from the config when omitted.')
@click.option('--mode', type=click.Choice(list(MODES)), default=None)
@click.option('--steps', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def train_funknn(ctx, config_path, data, mode, steps, out):
    """Train FunkNN in single, continuous or factor mode."""
    cfg = run_config(ctx, config_path, funknn__mode=mode, funknn__steps=steps)
    target = out_dir(ctx, cfg, out, 'train')
    dataset = load_or_generate(cfg, data, ctx.obj['seed'])
    train_cfg = TrainConfig.from_run_config(cfg, seed=ctx.obj['seed'], n=dataset.resolution)
    cfg.write(target)
    result = train(dataset.train_set(), train_cfg, target)
    summary = {'final_loss': result.final_loss, 'best_loss': result.best_loss, 'steps': train_cfg.steps,
               'checkpoints': [str(p) for p in result.checkpoints], 'config': train_cfg.to_dict()}
    write_summary(target, summary)
    finish(summary)


@click.command('train-prior')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--data', type=click.Path(exists=True, file_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def train_prior(ctx, config_path, data, out):
    """Train the autoencoder, then the flow on its latent codes."""
    cfg = run_config(ctx, config_path)
    target = out_dir(ctx, cfg, out, 'train-prior')
    dataset = load_or_generate(cfg, data, ctx.obj['seed'])
    prior_cfg = PriorConfig.from_run_config(cfg, seed=ctx.obj['seed'])
    cfg.write(target)

    train_set = dataset.train_set()
    ae, ae_trace = train_ae(train_set, prior_cfg, target)
    stack = prepare_images(train_set, prior_cfg.image_size)
    lowres = Dataset([ImageGrid.from_channels_first(x) for x in stack], kind=dataset.kind)
    latents = ae.encode_batch(lowres.images)
    flow, flow_trace = train_flow(latents, prior_cfg, target)

    prior = Prior(ae, flow)
    prior.save(target, seed=ctx.obj['seed'], image_size=prior_cfg.image_size)
    report = reconstruction_report(ae, lowres)
    write_reports([report], target, stem='ae_metrics', latent_dim=prior_cfg.latent_dim)
    summary = {'ae_final_loss': ae_trace[-1]['loss'] if ae_trace else None,
               'flow_final_nll': flow_trace[-1]['loss'] if flow_trace else None,
               'ae_snr': report.aggregate, 'prior': str(target)}
    write_summary(target, summary)
    finish(summary)


@click.command('superres')
@click.option('--ckpt', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--input', 'input_path', type=click.Path(exists=True, dir_okay=False), required=True)
@click.option('--scale', type=float, default=2.0, show_default=True)
@click.option('--levels', type=int, default=1, show_default=True)
@click.option('--size', type=int, default=None, help='Evaluate directly at this size instead of level by level.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def superres(ctx, ckpt, input_path, scale, levels, size, config_path, out):
    """Hierarchical (or direct arbitrary-size) super-resolution of one image."""
    cfg = run_config(ctx, config_path)
    target = out_dir(ctx, cfg, out, 'superres')
    model = FunkNN.load(ckpt)
    img = load_image(input_path)
    chunk = int(cfg['funknn']['eval_chunk'])
    cfg.write(target)
    written = []
    if size:
        values = model.evaluate(img, grid_coords(size, size), chunk_size=chunk)
        output = ImageGrid(np.asarray(values).reshape(size, size, img.channels))
        save_image(cfg, target, f'direct_{size}', output)
        written.append(size)
    else:
        for level, output in enumerate(hierarchical_superres(model, img, scale, levels, chunk_size=chunk)[1:], 1):
            save_image(cfg, target, f'level{level}_{output.height}', output)
            written.append(output.height)
    write_summary(target, {'input': input_path, 'scale': scale, 'levels': levels, 'sizes': written})
    finish({'sizes': written, 'out': str(target)})


@click.command('sample')
@click.option('--prior', 'prior_dir', type=click.Path(exists=True, file_okay=False), required=True)
@click.option('--count', type=int, default=8, show_default=True)
@click.option('--columns', type=int, default=None, help='Grid columns of samples.png (default: about square).')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def sample(ctx, prior_dir, count, columns, config_path, out):
    """Draw images from the generative prior; writes them tiled into samples.png."""
    cfg = run_config(ctx, config_path)
    target = out_dir(ctx, cfg, out, 'sample')
    prior = Prior.load(prior_dir)
    cfg.write(target)
    images = prior.sample(count, ctx.obj['seed'])
    if cfg['output'].get('save_png', True):
        save_png_grid(target / 'samples.png', images, columns)
    if cfg['output'].get('save_raw', True):
        for i, img in enumerate(images):
            save_raw(target / f'sample_{i:04d}.bin', img)
    finish({'count': len(images), 'grid': str(target / 'samples.png'), 'out': str(target)})


train_commands = [train_funknn, train_prior, superres, sample]
