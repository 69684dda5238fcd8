# msat_music/commands/generate.py
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import List, Optional

import click

from ..services.checkpoint_store import load_checkpoint
from ..services.generation import (
    GenerationTask,
    SamplingConfig,
    attn_report,
    format_attn_table,
    generate,
    instruments_from_song,
    write_smf,
)
from ..services.song_store import save_song
from .common import domain_errors, load_song_dir

logger = logging.getLogger(__name__)


def _parse_instruments(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated programs, got {text!r}", param_hint="--instruments")


@click.command("generate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--task", required=True, type=click.Choice(["instrument", "continue"]))
@click.option("--instruments", help="comma-separated programs (instrument task)")
@click.option("--reference", type=click.Path(exists=True), help="song file or directory to take instruments from")
@click.option("--prompt", type=click.Path(exists=True), help="song file or directory to continue")
@click.option("--n-beats", default=16, show_default=True, type=click.IntRange(min=1))
@click.option("--out", "out", required=True, type=click.Path(file_okay=False))
@click.option("--temperature", default=1.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--top-k", default=32, show_default=True, type=click.IntRange(min=1))
@click.option("--max-events", default=1024, show_default=True, type=click.IntRange(min=4))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--no-filter", is_flag=True, help="sample without the validity mask")
@click.option("--greedy", is_flag=True, help="argmax instead of sampling")
@click.option("--smf", is_flag=True, help="also write a .mid next to each song")
@domain_errors
def generate_cmd(checkpoint: str, task: str, instruments: Optional[str], reference: Optional[str],
                 prompt: Optional[str], n_beats: int, out: str, temperature: float, top_k: int,
                 max_events: int, seed: int, no_filter: bool, greedy: bool, smf: bool) -> None:
    """Instrument-informed generation or N-beat continuation."""
    model = load_checkpoint(checkpoint)
    if task == "instrument":
        if instruments:
            jobs = {"generated": GenerationTask.instrument_informed(_parse_instruments(instruments))}
        elif reference:
            jobs = {
                name: GenerationTask.instrument_informed(instruments_from_song(song))
                for name, song in load_song_dir(reference).items()
            }
        else:
            raise click.UsageError("the instrument task needs --instruments or --reference")
    else:
        if not prompt:
            raise click.UsageError("the continue task needs --prompt")
        jobs = {name: GenerationTask.continuation(song, n_beats) for name, song in load_song_dir(prompt).items()}

    out_dir = Path(out)
    for i, (name, job) in enumerate(sorted(jobs.items())):
        cfg = SamplingConfig(
            temperature=temperature,
            top_k=top_k,
            max_events=max_events,
            seed=seed + i,
            filter_validity=not no_filter,
            greedy=greedy,
        )
        result = generate(model, job, cfg)
        save_song(result.song, out_dir / f"{name}.json", name=name)
        diag = out_dir / f"{name}.diag.json"
        diag.write_text(json.dumps({"version": 1, "seed": cfg.seed, **result.diagnostics}, indent=2), encoding="utf-8")
        if smf:
            write_smf(result.song, out_dir / f"{name}.mid")
        click.echo(f"{name}: {result.song.note_count} note(s), {result.diagnostics['generated_events']} event(s)")


@click.command("attn-report")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out", type=click.Path(dir_okay=False), help="also write the table here")
@domain_errors
def attn_report_cmd(checkpoint: str, out: Optional[str]) -> None:
    """Softmaxed global fusion weights per token type."""
    table = format_attn_table(attn_report(load_checkpoint(checkpoint)))
    click.echo(table, nl=False)
    if out:
        Path(out).write_text(table, encoding="utf-8")
