import logging

import click

from config import config_for_env
from extensions import pool

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def create_app(config_object=None):
    settings = config_object or config_for_env()
    logging.basicConfig(level=getattr(logging, str(settings.LOG_LEVEL).upper(), logging.INFO), format=LOG_FORMAT)
    pool.init_app(settings)

    @click.group()
    @click.option('--seed', type=int, default=0, show_default=True, help='Seed for every random draw of the run.')
    @click.option('--threads', type=int, default=None, help='Worker threads for pixel evaluation.')
    @click.option('--verbose', is_flag=True, help='Log at DEBUG level.')
    @click.pass_context
    def cli(ctx, seed, threads, verbose):
        """funkrecs: continuous super-resolution and FunkNN-regularized inverse problems."""
        if verbose:
            logging.getLogger().setLevel(logging.DEBUG)
            click.echo("\n=== Registered Commands ===", err=True)
            for name, command in sorted(cli.commands.items()):
                click.echo(f"{name}: {[p.name for p in command.params]}", err=True)
            click.echo("===========================\n", err=True)
        if threads is not None:
            pool.resize(threads)
        ctx.obj = {'settings': settings, 'seed': seed}

    # Commands
    from cli_api.data_commands import data_commands
    from cli_api.train_commands import train_commands
    from cli_api.inverse_commands import inverse_commands
    from cli_api.eval_commands import eval_commands

    for command in data_commands + train_commands + inverse_commands + eval_commands:
        cli.add_command(command)

    return cli


def main():
    create_app()(prog_name='funkrecs')


if __name__ == '__main__':
    main()
