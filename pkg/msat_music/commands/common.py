# msat_music/commands/common.py
from __future__ import annotations

import functools
import logging
from dataclasses import fields
from pathlib import Path
from typing import Callable, Dict, List, Optional

import click

from ..services.neural_core import FUSION_MODES
from ..services.representation import SCALES
from ..services.song_store import CanonicalSong, load_corpus, load_song, load_split
from ..services.train_config import (
    FROZEN_CONTEXT_ALIGNED,
    FROZEN_CONTEXT_PREFIX,
    TrainConfig,
    load_train_config,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# everything the services raise for bad input or a failed run
DOMAIN_ERRORS = (ValueError, RuntimeError, OSError)

_CHOICES = {
    "fusion": FUSION_MODES,
    "target_scale": SCALES,
    "frozen_context": (FROZEN_CONTEXT_ALIGNED, FROZEN_CONTEXT_PREFIX),
}
_CLICK_TYPES = {"int": click.INT, "float": click.FLOAT, "bool": click.BOOL, "str": click.STRING}


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, force=True)


def domain_errors(f: Callable) -> Callable:
    """Report domain errors as `error: ...` with exit status 1."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except DOMAIN_ERRORS as e:
            logger.debug("command failed", exc_info=True)
            click.echo(f"error: {e}", err=True)
            raise SystemExit(1)

    return wrapper


def option_name(key: str) -> str:
    return "--" + key.replace("_", "-")


def train_options(f: Callable) -> Callable:
    """One flag per TrainConfig key; unset flags leave the file value alone."""
    for fd in reversed(fields(TrainConfig)):
        kind = click.Choice(_CHOICES[fd.name]) if fd.name in _CHOICES else _CLICK_TYPES[fd.type]
        f = click.option(option_name(fd.name), fd.name, type=kind, default=None,
                         help=f"config key {fd.name}")(f)
    return click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                        help="flat key=value config file")(f)


def resolve_train_config(config_path: Optional[str], values: Dict[str, object]) -> TrainConfig:
    keys = {fd.name for fd in fields(TrainConfig)}
    cfg = load_train_config(config_path, {k: v for k, v in values.items() if k in keys})
    click.echo("# effective config")
    click.echo(cfg.to_text(), nl=False)
    return cfg


def load_song_dir(path: Path | str) -> Dict[str, CanonicalSong]:
    """Songs from a corpus directory (songs/*.json), a flat directory, or one file."""
    path = Path(path)
    if path.is_file():
        return {path.stem: load_song(path)}
    if (path / "songs").is_dir():
        return load_corpus(path)
    return {p.stem: load_song(p) for p in sorted(path.glob("*.json")) if not p.name.endswith(".diag.json")}


def corpus_split(corpus: Path | str) -> tuple[List[CanonicalSong], List[CanonicalSong]]:
    songs = load_song_dir(corpus)
    split = load_split(corpus)
    if split is None:
        return [songs[n] for n in sorted(songs)], []
    train = [songs[n] for n in split["train"] if n in songs]
    valid = [songs[n] for n in split["valid"] if n in songs]
    return train, valid
