import json
import logging
from functools import wraps
from pathlib import Path
from typing import Any, Dict, Optional

import click

from config import RunConfig
from errors import FunkError, ValidationError
from models import Dataset
from synth_data.generators import make_dataset
from synth_data.image_io import read_dataset, save_png, save_raw

logger = logging.getLogger(__name__)

EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def handle_errors(f):
    """decorator mapping library errors to exit codes and an error payload on stderr"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ValidationError as e:
            click.echo(json.dumps({'success': False, 'error': 'Validation Error', 'message': str(e)}), err=True)
            click.get_current_context().exit(EXIT_VALIDATION)
        except FunkError as e:
            logger.error("%s failed: %s", f.__name__, e)
            click.echo(json.dumps({'success': False, 'error': type(e).__name__, 'message': str(e)}), err=True)
            click.get_current_context().exit(EXIT_RUNTIME)
    return decorated_function


def run_config(ctx: click.Context, config_path: Optional[str], **overrides: Any) -> RunConfig:
    """Defaults < --config file < flags (keys given as 'section.key')."""
    settings = ctx.obj['settings']
    cfg = RunConfig.load(config_path, defaults_path=settings.RUN_CONFIG_DEFAULTS)
    for dotted, value in overrides.items():
        cfg.set(dotted.replace('__', '.'), value)
    return cfg


def out_dir(ctx: click.Context, cfg: RunConfig, out: Optional[str], command: str) -> Path:
    if out:
        path = Path(out)
    else:
        path = Path(ctx.obj['settings'].OUTPUT_BASE or '.') / cfg['output']['dir'] / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_or_generate(cfg: RunConfig, data: Optional[str], seed: int) -> Dataset:
    if data:
        return read_dataset(data)
    section = cfg['data']
    return make_dataset(section['kind'], int(section['count']), int(section['n']), seed=seed,
                        test_count=int(section['test_count']), ellipses=int(section['ellipses']))


def save_image(cfg: RunConfig, directory: Path, stem: str, img) -> None:
    if cfg['output'].get('save_png', True):
        save_png(directory / f'{stem}.png', img)
    if cfg['output'].get('save_raw', True):
        save_raw(directory / f'{stem}.bin', img)


def write_summary(directory: Path, payload: Dict[str, Any], name: str = 'report.json') -> Path:
    path = directory / name
    path.write_text(json.dumps(payload, indent=2, default=float))
    return path


def finish(payload: Dict[str, Any]) -> None:
    click.echo(json.dumps(dict({'success': True}, **payload), default=float))
