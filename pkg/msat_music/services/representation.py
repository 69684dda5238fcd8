# msat_music/services/representation.py
"""Six-token event encoding and the note/bar/track serializations.

An EventList is the canonical form: header (SOS, INSTRUMENT*, SON), NOTE
events in note-scale order, EOS. A ScaledSequence reorders the NOTE events
for one scale and keeps `alignment[j]` = canonical index of its event j.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Sequence, Tuple

import numpy as np

from .song_store import CanonicalSong, Note, Track, length_of
from .vocabulary import (
    BEATS_PER_BAR,
    FIELD_SIZES,
    MAX_BEATS,
    NULL,
    TYPE_EOS,
    TYPE_INSTRUMENT,
    TYPE_NOTE,
    TYPE_SON,
    TYPE_SOS,
    beat_code,
    duration_code,
    duration_value,
    instrument_code,
    pitch_code,
    position_code,
)

logger = logging.getLogger(__name__)

SCALE_NOTE = "note"
SCALE_BAR = "bar"
SCALE_TRACK = "track"
SCALES = (SCALE_NOTE, SCALE_BAR, SCALE_TRACK)

TOKEN_FILE_MAGIC = "msat-tokens"
TOKEN_FILE_VERSION = "v1"


class VocabularyOverflow(ValueError):
    pass


class MalformedSequence(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class Event(NamedTuple):
    type: int
    beat: int = NULL
    position: int = NULL
    pitch: int = NULL
    duration: int = NULL
    instrument: int = NULL

    @property
    def is_note(self) -> bool:
        return self.type == TYPE_NOTE

    @property
    def beat_value(self) -> int:
        return self.beat - 1

    @property
    def bar_value(self) -> int:
        return (self.beat - 1) // BEATS_PER_BAR

    @property
    def program(self) -> int:
        return self.instrument - 1


SOS = Event(TYPE_SOS)
SON = Event(TYPE_SON)
EOS = Event(TYPE_EOS)


def instrument_event(program: int) -> Event:
    return Event(TYPE_INSTRUMENT, instrument=instrument_code(program))


def note_event(program: int, note: Note) -> Event:
    if not 0 <= note.beat < MAX_BEATS:
        raise VocabularyOverflow(f"beat {note.beat} outside the {MAX_BEATS}-beat vocabulary")
    return Event(
        TYPE_NOTE,
        beat=beat_code(note.beat),
        position=position_code(note.position),
        pitch=pitch_code(note.pitch),
        duration=duration_code(note.duration),
        instrument=instrument_code(program),
    )


def check_event(ev: Event) -> None:
    for value, size in zip(ev, FIELD_SIZES):
        if not 0 <= value < size:
            raise MalformedSequence(f"code out of range in {tuple(ev)}")
    if ev.type == TYPE_NOTE:
        if NULL in ev[1:]:
            raise MalformedSequence(f"NOTE event with NULL field: {tuple(ev)}")
    elif ev.type == TYPE_INSTRUMENT:
        if any(ev[1:5]) or ev.instrument == NULL:
            raise MalformedSequence(f"malformed INSTRUMENT event: {tuple(ev)}")
    elif any(ev[1:]):
        raise MalformedSequence(f"structural event with non-NULL field: {tuple(ev)}")


# ---------- sort keys ----------
def _note_key(ev: Event) -> tuple:
    return (ev.beat, ev.position, ev.instrument, ev.pitch, ev.duration)


def _bar_key(ev: Event) -> tuple:
    return (ev.bar_value, ev.instrument, ev.beat, ev.position, ev.pitch, ev.duration)


def _track_key(ev: Event) -> tuple:
    return (ev.instrument, ev.beat, ev.position, ev.pitch, ev.duration)


SCALE_KEYS: Dict[str, Callable[[Event], tuple]] = {
    SCALE_NOTE: _note_key,
    SCALE_BAR: _bar_key,
    SCALE_TRACK: _track_key,
}


def scale_key(scale: str) -> Callable[[Event], tuple]:
    try:
        return SCALE_KEYS[scale]
    except KeyError:
        raise ValueError(f"unknown scale {scale!r} (expected one of {', '.join(SCALES)})") from None


@dataclass
class EventList:
    events: List[Event] = field(default_factory=list)

    @property
    def header_length(self) -> int:
        return next(i for i, ev in enumerate(self.events) if ev.type == TYPE_SON) + 1

    def __len__(self) -> int:
        return len(self.events)


@dataclass
class ScaledSequence:
    scale: str
    events: List[Event]
    alignment: List[int]

    def __len__(self) -> int:
        return len(self.events)

    def codes(self) -> np.ndarray:
        return np.asarray(self.events, dtype=np.int64).reshape(len(self.events), 6)


class DecodeResult(NamedTuple):
    song: CanonicalSong
    dropped_notes: int


# ---------- operations ----------
def encode(song: CanonicalSong) -> EventList:
    events = [SOS] + [instrument_event(t.program) for t in song.tracks] + [SON]
    notes = [note_event(t.program, n) for t in song.tracks for n in t.notes]
    notes.sort(key=_note_key)
    return EventList(events + notes + [EOS])


def order_events(events: Sequence[Event], scale: str) -> Tuple[List[Event], List[int]]:
    """Reorder the NOTE events after SON by the scale's key.

    Works on unterminated prefixes too (no EOS). Returns the reordered events
    and, for each output position, the input position it came from.
    """
    key = scale_key(scale)
    son = next((i for i, ev in enumerate(events) if ev.type == TYPE_SON), None)
    if son is None:
        return list(events), list(range(len(events)))
    end = len(events)
    if end > son + 1 and events[-1].type == TYPE_EOS:
        end -= 1
    body = sorted(range(son + 1, end), key=lambda i: key(events[i]))
    source = list(range(son + 1)) + body + list(range(end, len(events)))
    return [events[i] for i in source], source


def serialize(ev: EventList, scale: str) -> ScaledSequence:
    events, source = order_events(ev.events, scale)
    return ScaledSequence(scale=scale, events=events, alignment=source)


def deserialize(seq: ScaledSequence | Sequence[Event]) -> DecodeResult:
    events = list(seq.events if isinstance(seq, ScaledSequence) else seq)
    if not events or events[0].type != TYPE_SOS:
        raise MalformedSequence("sequence must start with SOS")
    if events[-1].type != TYPE_EOS:
        raise MalformedSequence("sequence must end with EOS")

    programs: List[int] = []
    notes: Dict[int, Dict[Tuple[int, int, int], int]] = {}
    in_notes = False
    dropped = 0
    for i, ev in enumerate(events[1:-1], start=1):
        check_event(ev)
        if ev.type in (TYPE_SOS, TYPE_EOS):
            raise MalformedSequence(f"unexpected {('SOS', 'EOS')[ev.type == TYPE_EOS]} at index {i}")
        if ev.type == TYPE_INSTRUMENT:
            if in_notes:
                raise MalformedSequence(f"INSTRUMENT after SON at index {i}")
            if ev.program not in notes:
                programs.append(ev.program)
                notes[ev.program] = {}
        elif ev.type == TYPE_SON:
            if in_notes:
                raise MalformedSequence(f"second SON at index {i}")
            in_notes = True
        else:
            if not in_notes:
                raise MalformedSequence(f"NOTE before SON at index {i}")
            track = notes.get(ev.program)
            if track is None:
                dropped += 1
                continue
            key = (ev.beat - 1, ev.position - 1, ev.pitch - 1)
            track[key] = max(track.get(key, 0), duration_value(ev.duration))
    if not in_notes:
        raise MalformedSequence("missing SON")
    if dropped:
        logger.warning("dropped %d note(s) with undeclared instruments", dropped)

    tracks = [
        Track(program=p, notes=sorted(Note(b, pos, pitch, d) for (b, pos, pitch), d in notes[p].items()))
        for p in sorted(programs)
    ]
    return DecodeResult(CanonicalSong(tracks=tracks, length_beats=length_of(tracks)), dropped)


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def realign_index(alignment: Sequence[int], target_alignment: Sequence[int]) -> np.ndarray:
    """Row index mapping a sequence in `alignment` order into `target_alignment` order."""
    if len(alignment) != len(target_alignment):
        raise LengthMismatch(f"alignments of length {len(alignment)} and {len(target_alignment)}")
    n = len(alignment)
    for perm in (alignment, target_alignment):
        if sorted(perm) != list(range(n)):
            raise LengthMismatch("alignment is not a permutation of the canonical indices")
    return inverse_permutation(alignment)[np.asarray(target_alignment, dtype=np.int64)]


def realign(h, alignment: Sequence[int], target_alignment: Sequence[int]):
    """Output row j = input row of the event at position j of the target order.

    `h` may be a numpy array, a Tensor, or a plain list indexed by position.
    """
    if len(h) != len(alignment):
        raise LengthMismatch(f"{len(h)} rows for an alignment of length {len(alignment)}")
    index = realign_index(alignment, target_alignment)
    if isinstance(h, list):
        return [h[i] for i in index]
    return h[index]


def segment_song(song: CanonicalSong, max_len: int) -> List[CanonicalSong]:
    """Split at bar boundaries so each segment's EventList fits max_len."""
    frame = len(song.tracks) + 3
    budget = max_len - frame
    if budget < 1:
        raise ValueError(f"max_len {max_len} cannot hold the {frame}-event frame")
    by_bar: Dict[int, List[Tuple[int, Note]]] = {}
    for t in song.tracks:
        for n in t.notes:
            by_bar.setdefault(n.beat // BEATS_PER_BAR, []).append((t.program, n))
    if not by_bar or song.note_count <= budget:
        return [song]

    segments: List[List[Tuple[int, Note]]] = [[]]
    for bar in sorted(by_bar):
        items = by_bar[bar]
        if len(items) > budget:
            logger.warning("bar %d holds %d notes, keeping the first %d", bar, len(items), budget)
            items = sorted(items, key=lambda pn: (pn[1].beat, pn[1].position, pn[0], pn[1].pitch))[:budget]
        if segments[-1] and len(segments[-1]) + len(items) > budget:
            segments.append([])
        segments[-1].extend(items)

    out: List[CanonicalSong] = []
    for items in segments:
        tracks = [Track(t.program, sorted(n for p, n in items if p == t.program)) for t in song.tracks]
        out.append(CanonicalSong(tracks=tracks, length_beats=length_of(tracks)))
    return out


# ---------- token files ----------
def write_token_file(seq: ScaledSequence, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{TOKEN_FILE_MAGIC} {TOKEN_FILE_VERSION} scale={seq.scale}"]
    lines += [" ".join(str(int(c)) for c in ev) for ev in seq.events]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(("\n".join(lines) + "\n").encode("ascii"))
    tmp.replace(path)


def read_token_file(path: Path | str) -> ScaledSequence:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines:
        raise MalformedSequence(f"{path}: empty token file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != TOKEN_FILE_MAGIC or head[1] != TOKEN_FILE_VERSION or not head[2].startswith("scale="):
        raise MalformedSequence(f"{path}: bad token file header {lines[0]!r}")
    scale = head[2].split("=", 1)[1]
    scale_key(scale)
    events = []
    for n, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 6:
            raise MalformedSequence(f"{path}:{n}: expected 6 codes, got {len(parts)}")
        events.append(Event(*(int(p) for p in parts)))
    # canonical order is note order, so the alignment is the note-order ranking
    _, source = order_events(events, SCALE_NOTE)
    alignment = inverse_permutation(source).tolist()
    return ScaledSequence(scale=scale, events=events, alignment=alignment)
