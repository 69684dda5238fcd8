# msat_music/commands/evaluate.py
from __future__ import annotations

from typing import Dict, Tuple

import click

from ..services.metrics import evaluate_models, write_report
from .common import domain_errors, load_song_dir


def _labelled(values: Tuple[str, ...]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for v in values:
        label, sep, path = v.partition("=")
        if not sep or not label or not path:
            raise click.BadParameter(f"expected LABEL=DIR, got {v!r}", param_hint="--generated")
        out[label] = path
    return out


@click.command("evaluate")
@click.option("--reference", required=True, type=click.Path(exists=True), help="ground-truth songs")
@click.option("--generated", "generated", multiple=True, required=True, help="LABEL=DIR, repeatable")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@domain_errors
def evaluate(reference: str, generated: Tuple[str, ...], out: str) -> None:
    """Objective metrics table: ground truth first, then one row per model."""
    models = {label: load_song_dir(path) for label, path in _labelled(generated).items()}
    report = evaluate_models(models, load_song_dir(reference))
    write_report(report, out)
    click.echo(report.to_text(), nl=False)
