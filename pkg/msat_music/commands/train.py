# msat_music/commands/train.py
from __future__ import annotations

import click

from ..services.checkpoint_store import load_checkpoint
from ..services.representation import SCALES
from ..services.training import train_msat, train_single_scale
from .common import corpus_split, domain_errors, resolve_train_config, train_options


def _require_checkpoint_path(cfg) -> None:
    if not cfg.checkpoint_path:
        raise click.UsageError("missing --checkpoint-path (or checkpoint_path in --config)")


@click.command("train-single")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--scale", required=True, type=click.Choice(SCALES))
@train_options
@domain_errors
def train_single(corpus: str, scale: str, config_path, **values) -> None:
    """Pretrain a single-scale model on the note, bar or track ordering."""
    cfg = resolve_train_config(config_path, {**values, "target_scale": scale, "fusion": "none"})
    _require_checkpoint_path(cfg)
    train, valid = corpus_split(corpus)
    params = train_single_scale(train, scale, cfg, valid_songs=valid)
    click.echo(f"best step {params.meta.get('step')} valid_loss={params.meta.get('valid_loss'):.6f}")


@click.command("train-msat")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--note-ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--track-ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--bar-ckpt", type=click.Path(exists=True, dir_okay=False), help="pretrained bar model; required unless init_bar_from_pretrained=false")
@train_options
@domain_errors
def train_msat_cmd(corpus: str, note_ckpt: str, track_ckpt: str, bar_ckpt, config_path, **values) -> None:
    """Train the multi-scale model on top of frozen note/track decoders."""
    cfg = resolve_train_config(config_path, {**values, "target_scale": "bar"})
    _require_checkpoint_path(cfg)
    train, valid = corpus_split(corpus)
    params = train_msat(
        train,
        load_checkpoint(note_ckpt),
        load_checkpoint(track_ckpt),
        cfg,
        valid_songs=valid,
        bar_ckpt=load_checkpoint(bar_ckpt) if bar_ckpt else None,
    )
    click.echo(f"best step {params.meta.get('step')} valid_loss={params.meta.get('valid_loss'):.6f}")
