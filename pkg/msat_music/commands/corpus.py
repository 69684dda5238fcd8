# msat_music/commands/corpus.py
from __future__ import annotations

import json
import logging
from pathlib import Path

import click

from ..services.midi_ingest import NormalizeOptions, ingest_directory, song_to_raw, split_corpus, write_debug_smf
from ..services.representation import SCALES, encode, serialize, write_token_file
from ..services.song_store import save_corpus, save_split
from .common import domain_errors, load_song_dir

logger = logging.getLogger(__name__)


@click.command("ingest")
@click.option("--in", "src", required=True, type=click.Path(exists=True, file_okay=False), help="directory of MIDI files")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False), help="corpus directory to write")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int, help="seed of the train/valid/test split")
@click.option("--debug-midi", is_flag=True, help="also write each normalized song back as SMF")
@domain_errors
def ingest(src: str, out: str, workers: int, seed: int, debug_midi: bool) -> None:
    """Parse and normalize every MIDI file under --in into a song corpus."""
    songs, rejections = ingest_directory(src, NormalizeOptions(), workers=workers)
    out_dir = Path(out)
    save_corpus(out_dir, songs)

    rejected = {name: {"reason": r.reason, "detail": r.detail} for name, r in sorted(rejections.items())}
    tmp = out_dir / "rejections.json.tmp"
    tmp.write_text(json.dumps({"version": 1, "rejections": rejected}, indent=2), encoding="utf-8")
    tmp.replace(out_dir / "rejections.json")

    if debug_midi:
        for name, song in songs.items():
            p = out_dir / "debug" / f"{name}.mid"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(write_debug_smf(song_to_raw(song)))

    if len(songs) >= 10:
        names = sorted(songs)
        train, valid, test = split_corpus(names, seed)
        save_split(out_dir, {"train": train, "valid": valid, "test": test})
        click.echo(f"split: {len(train)} train, {len(valid)} valid, {len(test)} test")
    click.echo(f"ingested {len(songs)} song(s), rejected {len(rejections)}")


@click.command("tokenize")
@click.option("--corpus", required=True, type=click.Path(exists=True), help="corpus directory or song file")
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--scale", "scales", multiple=True, type=click.Choice(SCALES), help="default: all three")
@domain_errors
def tokenize(corpus: str, out: str, scales: tuple) -> None:
    """Write token files (<out>/<scale>/<song>.tok) for each scale."""
    songs = load_song_dir(corpus)
    for name, song in sorted(songs.items()):
        events = encode(song)
        for scale in scales or SCALES:
            write_token_file(serialize(events, scale), Path(out) / scale / f"{name}.tok")
    click.echo(f"tokenized {len(songs)} song(s) at {len(scales or SCALES)} scale(s)")
