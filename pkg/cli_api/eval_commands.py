import click

from cli_api.common import finish, handle_errors, load_or_generate, out_dir, run_config
from funknn.model import FunkNN
from metrics import derivative_report, superres_report, write_reports
from models import Dataset
from prior.generator import Prior, reconstruction_report
from synth_data.generators import area_resize


def held_out(dataset: Dataset) -> Dataset:
    return dataset.test_set() if dataset.test else dataset


@click.command('eval')
@click.option('--kind', type=click.Choice(['superres', 'derivatives', 'ae']), required=True)
@click.option('--ckpt', type=click.Path(exists=True, file_okay=False), required=True,
              help='FunkNN checkpoint, or a prior directory for --kind ae.')
@click.option('--data', type=click.Path(exists=True, file_okay=False), default=None)
@click.option('--scale', 'scales', type=float, multiple=True, help='Scales for superres (repeatable).')
@click.option('--lr-size', type=int, default=None, help='Low-res input size for derivatives.')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False), default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.pass_context
@handle_errors
def evaluate(ctx, kind, ckpt, data, scales, lr_size, config_path, out):
    """Metric reports on the held-out split of a dataset."""
    cfg = run_config(ctx, config_path)
    target = out_dir(ctx, cfg, out, f'eval-{kind}')
    dataset = held_out(load_or_generate(cfg, data, ctx.obj['seed']))
    chunk = int(cfg['funknn']['eval_chunk'])
    cfg.write(target)

    if kind == 'ae':
        prior = Prior.load(ckpt)
        size = prior.image_size
        lowres = Dataset([area_resize(img, size) if img.height != size else img for img in dataset.images],
                         kind=dataset.kind)
        reports = {'ae_snr': reconstruction_report(prior.ae, lowres)}
    else:
        model = FunkNN.load(ckpt)
        if kind == 'superres':
            factor = model.metadata.get('s') if model.metadata.get('mode') == 'factor' else None
            factor = int(factor) if factor and float(factor).is_integer() else None
            reports = superres_report(model, dataset, scales or (2.0,), hierarchical_factor=factor, chunk_size=chunk)
        else:
            reports = derivative_report(model, dataset, lr_size or int(cfg['funknn']['d']), chunk_size=chunk)

    write_reports(reports, target, stem=f'{kind}_metrics', kind=dataset.kind, items=len(dataset))
    finish({name: report.aggregate for name, report in reports.items()})


eval_commands = [evaluate]
