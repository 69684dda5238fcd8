import click

from .commands.common import configure_logging
from .commands.corpus import ingest, tokenize
from .commands.evaluate import evaluate
from .commands.generate import attn_report_cmd, generate_cmd
from .commands.train import train_msat_cmd, train_single


def create_cli() -> click.Group:
    @click.group()
    @click.option(
        "--log-level",
        default="INFO",
        show_default=True,
        type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    )
    def cli(log_level: str) -> None:
        """Multi-scale attentive Transformer for multi-track symbolic music."""
        configure_logging(log_level)

    # corpus preparation
    cli.add_command(ingest)
    cli.add_command(tokenize)

    # training
    cli.add_command(train_single)
    cli.add_command(train_msat_cmd)

    # generation + analysis
    cli.add_command(generate_cmd)
    cli.add_command(attn_report_cmd)
    cli.add_command(evaluate)

    return cli
