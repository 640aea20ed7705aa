import click

from cli_api.common import finish, handle_errors, out_dir, run_config
from synth_data.generators import make_dataset
from synth_data.image_io import write_dataset


@click.command('gen-data')
@click.option('--kind', type=click.Choice(['gaussian', 'phantom']), default=None, help='Image family.')
@click.option('--n', type=int, default=None, help='Resolution (n x n).')
@click.option('--count', type=int, default=None, help='Number of images.')
@click.option('--test-count', type=int, default=None, help='Images held out as the test split.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def gen_data(ctx, kind, n, count, test_count, config_path, out):
    """Generate a synthetic dataset (Gaussians or ellipse phantoms)."""
    cfg = run_config(ctx, config_path, data__kind=kind, data__n=n, data__count=count, data__test_count=test_count)
    target = out_dir(ctx, cfg, out, 'gen-data')
    section = cfg['data']
    dataset = make_dataset(section['kind'], int(section['count']), int(section['n']), seed=ctx.obj['seed'],
                           test_count=int(section['test_count']), ellipses=int(section['ellipses']),
                           channels=int(section['channels']))
    write_dataset(dataset, target, raw=cfg['output'].get('save_raw', True))
    cfg.write(target)
    finish({'dataset': str(target), 'count': len(dataset), 'train': len(dataset.train), 'test': len(dataset.test)})


data_commands = [gen_data]
