# msat_music/services/generation.py
"""Conditioned autoregressive generation.

Each step re-serializes the generated prefix in every context scale's order,
runs that scale's decoder on it and keeps its final-position output; the
target-scale decoder sees the prefix as generated. The six fields of the next
event are sampled independently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import mido
import numpy as np

from .autograd import Tensor
from .neural_core import FUSION_GLOBAL, MsatParams, fused_logits, global_alpha, scale_hidden
from .representation import (
    EOS,
    SCALE_BAR,
    SCALE_NOTE,
    SCALE_TRACK,
    SON,
    SOS,
    Event,
    deserialize,
    encode,
    instrument_event,
    order_events,
)
from .song_store import CanonicalSong
from .vocabulary import (
    BEATS_PER_BAR,
    FIELD_SIZES,
    FIELDS,
    NULL,
    RESOLUTION,
    TYPE_EOS,
    TYPE_NOTE,
    TYPE_SON,
    instrument_code,
)

logger = logging.getLogger(__name__)

TASK_INSTRUMENT_INFORMED = "instrument_informed"
TASK_CONTINUATION = "continuation"

SMF_TICKS_PER_BEAT = RESOLUTION * 40
SMF_TEMPO = 500000  # 120 BPM
SMF_VELOCITY = 64
DRUM_CHANNEL = 9


class PromptTooLong(ValueError):
    pass


class InvalidTask(ValueError):
    pass


class WrongFusionMode(ValueError):
    pass


def _per_field(value, name: str) -> Tuple:
    if isinstance(value, (int, float)):
        return (value,) * 6
    value = tuple(value)
    if len(value) != 6:
        raise ValueError(f"{name} needs one value or six (one per field), got {len(value)}")
    return value


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float | Tuple[float, ...] = 1.0
    top_k: int | Tuple[int, ...] = 32
    max_events: int = 1024
    seed: int = 0
    filter_validity: bool = True
    greedy: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "temperature", _per_field(self.temperature, "temperature"))
        object.__setattr__(self, "top_k", _per_field(self.top_k, "top_k"))
        if any(t <= 0 for t in self.temperature):
            raise ValueError("temperature must be > 0")
        if any(k < 1 for k in self.top_k):
            raise ValueError("top_k must be >= 1")
        if self.max_events < 4:
            raise ValueError("max_events must be >= 4")


@dataclass(frozen=True)
class GenerationTask:
    kind: str
    instruments: Tuple[int, ...] = ()
    prompt: Optional[CanonicalSong] = None
    n_beats: int = 16

    def __post_init__(self) -> None:
        if self.kind == TASK_INSTRUMENT_INFORMED:
            if not self.instruments:
                raise InvalidTask("instrument-informed generation needs at least one instrument")
            if any(not 0 <= p < 128 for p in self.instruments):
                raise InvalidTask(f"instrument programs must lie in 0..127, got {self.instruments}")
        elif self.kind == TASK_CONTINUATION:
            if self.prompt is None:
                raise InvalidTask("continuation needs a prompt song")
            if self.n_beats < 1:
                raise InvalidTask("n_beats must be >= 1")
            if self.prompt.length_beats < self.n_beats:
                raise InvalidTask(f"prompt holds {self.prompt.length_beats} beat(s), fewer than N={self.n_beats}")
        else:
            raise InvalidTask(f"unknown task kind {self.kind!r}")

    @classmethod
    def instrument_informed(cls, programs: Sequence[int]) -> "GenerationTask":
        return cls(TASK_INSTRUMENT_INFORMED, instruments=tuple(sorted(set(programs))))

    @classmethod
    def continuation(cls, prompt: CanonicalSong, n_beats: int = 16) -> "GenerationTask":
        return cls(TASK_CONTINUATION, instruments=tuple(prompt.programs), prompt=prompt, n_beats=n_beats)

    @property
    def min_beat(self) -> int:
        return self.n_beats if self.kind == TASK_CONTINUATION else 0


@dataclass
class GenerationResult:
    song: CanonicalSong
    events: List[Event]
    diagnostics: Dict[str, int] = field(default_factory=dict)


def instruments_from_song(song: CanonicalSong) -> List[int]:
    return list(song.programs)


def build_prompt(task: GenerationTask, target_scale: str = SCALE_BAR) -> List[Event]:
    if task.kind == TASK_INSTRUMENT_INFORMED:
        return [SOS] + [instrument_event(p) for p in task.instruments] + [SON]
    events = encode(task.prompt).events[:-1]
    head = [ev for ev in events if not ev.is_note]
    notes = [ev for ev in events if ev.is_note and ev.beat_value < task.n_beats]
    ordered, _ = order_events(head + notes, target_scale)
    return ordered


# ---------- validity ----------
def validity_mask(events: Sequence[Event], declared: Sequence[int], target_scale: str = SCALE_BAR,
                  min_beat: int = 0) -> List[np.ndarray]:
    """Allowed codes per field for the next event, assuming it is a NOTE.

    Structural events after SON carry only NULL fields, so EOS needs no mask
    beyond the type field.
    """
    masks = [np.ones(size, dtype=bool) for size in FIELD_SIZES]
    if not any(ev.type == TYPE_SON for ev in events):
        return masks

    masks[0][:] = False
    masks[0][[TYPE_NOTE, TYPE_EOS]] = True
    for m in masks[1:]:
        m[NULL] = False

    masks[5][:] = False
    masks[5][[instrument_code(p) for p in declared]] = True

    floor = min_beat
    last = next((ev for ev in reversed(events) if ev.is_note), None)
    if last is not None:
        if target_scale == SCALE_BAR:
            floor = max(floor, last.bar_value * BEATS_PER_BAR)
        elif target_scale == SCALE_NOTE:
            floor = max(floor, last.beat_value)
        elif target_scale == SCALE_TRACK:
            masks[5][: last.instrument] = False
    masks[1][1:floor + 1] = False
    return masks


def grammar_mask() -> List[np.ndarray]:
    masks = [np.ones(size, dtype=bool) for size in FIELD_SIZES]
    for m in masks[1:]:
        m[NULL] = False
    return masks


# ---------- sampling ----------
class _FieldSampler:
    def __init__(self, cfg: SamplingConfig) -> None:
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.masked_fallbacks = 0

    def sample(self, f: int, logits: np.ndarray, mask: Optional[np.ndarray]) -> int:
        z = logits / self.cfg.temperature[f]
        if mask is not None:
            if mask.any():
                z = np.where(mask, z, -np.inf)
            else:
                self.masked_fallbacks += 1
                logger.warning("no valid %s code left, sampling unmasked", FIELDS[f])
        if self.cfg.greedy:
            return int(np.argmax(z))
        k = min(self.cfg.top_k[f], int(np.isfinite(z).sum()))
        top = np.argpartition(-z, k - 1)[:k]
        top = top[np.argsort(-z[top], kind="stable")]
        p = np.exp(z[top] - z[top[0]])
        p /= p.sum()
        return int(top[self.rng.choice(k, p=p)])


def _next_logits(model: MsatParams, p, events: List[Event]) -> List[np.ndarray]:
    hidden: Dict[str, Tensor] = {}
    for scale in model.scales:
        ordered = events if scale == model.target_scale else order_events(events, scale)[0]
        h = scale_hidden(model, p, scale, ordered)
        hidden[scale] = h[-1:]
    return [lg.data[0] for lg in fused_logits(model, p, hidden).logits]


def generate(model: MsatParams, task: GenerationTask, cfg: SamplingConfig = SamplingConfig()) -> GenerationResult:
    limit = min(cfg.max_events, model.config.max_len)
    events = build_prompt(task, model.target_scale)
    prompt_length = len(events)
    if len(events) >= limit:
        raise PromptTooLong(f"prompt holds {len(events)} events, limit is {limit}")

    p = model.leaves(trainable=False)
    sampler = _FieldSampler(cfg)
    repairs = 0
    declared = list(task.instruments)
    finished = False
    while len(events) < limit - 1:
        logits = _next_logits(model, p, events)
        if cfg.filter_validity:
            masks = validity_mask(events, declared, model.target_scale, task.min_beat)
        else:
            masks = grammar_mask()
            masks[1][1:task.min_beat + 1] = False
        if not masks[1].any():
            logger.info("no beat left in the vocabulary, closing the song")
            finished = True
            break

        etype = sampler.sample(0, logits[0], masks[0] if cfg.filter_validity else None)
        if etype == TYPE_EOS:
            finished = True
            break
        if etype != TYPE_NOTE:
            repairs += 1
            etype = TYPE_NOTE
        codes = [etype] + [sampler.sample(f, logits[f], masks[f]) for f in range(1, 6)]
        events.append(Event(*codes))

    if not finished:
        logger.info("reached the %d-event limit without EOS", limit)
    events.append(EOS)
    if repairs:
        logger.warning("%d grammar repair(s) during generation", repairs)

    decoded = deserialize(events)
    diagnostics = {
        "masked_fallbacks": sampler.masked_fallbacks,
        "grammar_repairs": repairs,
        "dropped_notes": decoded.dropped_notes,
        "generated_events": len(events) - prompt_length - 1,
    }
    return GenerationResult(song=decoded.song, events=events, diagnostics=diagnostics)


# ---------- attention report ----------
def attn_report(model: MsatParams) -> np.ndarray:
    if model.fusion != FUSION_GLOBAL:
        raise WrongFusionMode(f"attention report needs a global-fusion checkpoint, got fusion={model.fusion}")
    return global_alpha(model)


def format_attn_table(alpha: np.ndarray) -> str:
    lines = [f"{'token':<12}{'note':>10}{'bar':>10}{'track':>10}"]
    for name, row in zip(FIELDS, alpha):
        lines.append(f"{name:<12}" + "".join(f"{x:>10.4f}" for x in row))
    return "\n".join(lines) + "\n"


# ---------- SMF output ----------
def song_to_midifile(song: CanonicalSong) -> mido.MidiFile:
    """Format 0, 4/4, 120 BPM, velocity 64; one channel per track (percussion skipped)."""
    scale = SMF_TICKS_PER_BEAT // RESOLUTION
    channels = [c for c in range(16) if c != DRUM_CHANNEL]
    timed: List[Tuple[int, int, mido.Message]] = []
    for i, track in enumerate(song.tracks):
        ch = channels[i % len(channels)]
        timed.append((0, 0, mido.Message("program_change", channel=ch, program=track.program)))
        for n in track.notes:
            on = (n.beat * RESOLUTION + n.position) * scale
            off = on + n.duration * scale
            timed.append((on, 2, mido.Message("note_on", channel=ch, note=n.pitch, velocity=SMF_VELOCITY)))
            timed.append((off, 1, mido.Message("note_off", channel=ch, note=n.pitch, velocity=0)))
    timed.sort(key=lambda x: (x[0], x[1]))

    mid = mido.MidiFile(type=0, ticks_per_beat=SMF_TICKS_PER_BEAT)
    track = mido.MidiTrack()
    track.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    track.append(mido.MetaMessage("set_tempo", tempo=SMF_TEMPO, time=0))
    last = 0
    for tick, _, msg in timed:
        track.append(msg.copy(time=tick - last))
        last = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid.tracks.append(track)
    return mid


def write_smf(song: CanonicalSong, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    song_to_midifile(song).save(str(tmp))
    tmp.replace(path)
