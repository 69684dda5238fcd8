# msat_music/services/midi_ingest.py
"""RawMidi -> CanonicalSong normalization, corpus ingestion and splitting.

Rules:
- channel 10 (index 9) is percussion and is dropped
- any time signature other than 4/4 rejects the song; none at all means 4/4
- ticks map to a 12-per-beat grid with round-half-up
- notes at beat >= 256 are cut, durations clipped to 384 and snapped to the
  duration table
- one track per program; duplicate onsets keep the longest duration
"""

from __future__ import annotations

import bisect
import io
import logging
import random
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar

import mido

from .smf_parser import (
    KIND_NOTE_OFF,
    KIND_NOTE_ON,
    KIND_PROGRAM,
    KIND_TEMPO,
    KIND_TIME_SIGNATURE,
    MidiEvent,
    RawMidi,
    RawTrack,
    pair_notes,
    parse_smf,
)
from .song_store import CanonicalSong, Note, Track, length_of
from .vocabulary import MAX_BEATS, MAX_DURATION, RESOLUTION, snap_duration

logger = logging.getLogger(__name__)

DRUM_CHANNEL = 9

REJECT_NON_COMMON_TIME = "NonCommonTime"
REJECT_NO_PITCHED_NOTES = "NoPitchedNotes"
REJECT_MALFORMED_FILE = "MalformedFile"

MIDI_SUFFIXES = (".mid", ".midi")

T = TypeVar("T")


class TooFewSongs(ValueError):
    pass


@dataclass(frozen=True)
class NormalizeOptions:
    max_duration: int = MAX_DURATION
    max_beats: int = MAX_BEATS
    drum_channel: int = DRUM_CHANNEL


@dataclass(frozen=True)
class Rejection:
    reason: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.reason}: {self.detail}" if self.detail else self.reason


def quantize_ticks(ticks: int, division: int, resolution: int = RESOLUTION) -> int:
    """round(ticks * resolution / division) with halves rounded up, in integers."""
    return (2 * ticks * resolution + division) // (2 * division)


class _ProgramLookup:
    """Program in effect for (track, channel) at a tick."""

    def __init__(self, raw: RawMidi) -> None:
        self._local: Dict[Tuple[int, int], Tuple[List[int], List[int]]] = {}
        merged: Dict[int, List[Tuple[int, int, int]]] = defaultdict(list)
        for ti, t in enumerate(raw.tracks):
            for order, ev in enumerate(t.events):
                if ev.kind != KIND_PROGRAM:
                    continue
                ticks, programs = self._local.setdefault((ti, ev.channel), ([], []))
                ticks.append(ev.tick)
                programs.append(ev.data[0])
                merged[ev.channel].append((ev.tick, ti, order))
        self._global: Dict[int, Tuple[List[int], List[int]]] = {}
        for ch, items in merged.items():
            items.sort()
            self._global[ch] = (
                [tick for tick, _, _ in items],
                [raw.tracks[ti].events[o].data[0] for _, ti, o in items],
            )

    @staticmethod
    def _at(table: Optional[Tuple[List[int], List[int]]], tick: int) -> Optional[int]:
        if not table:
            return None
        i = bisect.bisect_right(table[0], tick) - 1
        return table[1][i] if i >= 0 else None

    def program(self, track_index: int, channel: int, tick: int) -> int:
        p = self._at(self._local.get((track_index, channel)), tick)
        if p is None:
            p = self._at(self._global.get(channel), tick)
        return 0 if p is None else p


def normalize(raw: RawMidi, opts: NormalizeOptions = NormalizeOptions()) -> CanonicalSong | Rejection:
    for t in raw.tracks:
        for ev in t.events:
            if ev.kind == KIND_TIME_SIGNATURE and tuple(ev.data[:2]) != (4, 4):
                return Rejection(
                    REJECT_NON_COMMON_TIME,
                    f"time signature {ev.data[0]}/{ev.data[1]} at tick {ev.tick}",
                )

    lookup = _ProgramLookup(raw)
    by_program: Dict[int, Dict[Tuple[int, int, int], int]] = defaultdict(dict)
    truncated = 0
    for ti, t in enumerate(raw.tracks):
        for n in t.notes:
            if n.channel == opts.drum_channel:
                continue
            beat, position = divmod(quantize_ticks(n.on_tick, raw.division), RESOLUTION)
            if beat >= opts.max_beats:
                truncated += 1
                continue
            duration = quantize_ticks(n.off_tick - n.on_tick, raw.division)
            duration = snap_duration(max(1, min(opts.max_duration, duration)))
            notes = by_program[lookup.program(ti, n.channel, n.on_tick)]
            key = (beat, position, n.pitch)
            if duration > notes.get(key, 0):
                notes[key] = duration

    if truncated:
        logger.info("truncated %d note(s) at or beyond beat %d", truncated, opts.max_beats)
    if not by_program:
        return Rejection(REJECT_NO_PITCHED_NOTES, "no notes outside the percussion channel")

    tracks = [
        Track(program=p, notes=sorted(Note(b, pos, pitch, d) for (b, pos, pitch), d in by_program[p].items()))
        for p in sorted(by_program)
    ]
    return CanonicalSong(tracks=tracks, length_beats=length_of(tracks))


def _lanes(notes: Sequence[Note]) -> List[List[Note]]:
    """Split notes so no two same-pitch notes overlap inside one lane."""
    lanes: List[List[Note]] = []
    busy_until: List[Dict[int, int]] = []
    for n in notes:
        start = n.beat * RESOLUTION + n.position
        for lane, ends in zip(lanes, busy_until):
            if ends.get(n.pitch, -1) <= start:
                break
        else:
            lanes.append([])
            busy_until.append({})
            lane, ends = lanes[-1], busy_until[-1]
        lane.append(n)
        ends[n.pitch] = start + n.duration
    return lanes


def song_to_raw(song: CanonicalSong) -> RawMidi:
    """Embed a song back into RawMidi form (division = grid resolution)."""
    channels = [c for c in range(16) if c != DRUM_CHANNEL]
    raw = RawMidi(format=1, division=RESOLUTION)
    for i, track in enumerate(song.tracks):
        ch = channels[i % len(channels)]
        for lane in _lanes(track.notes):
            timed: List[Tuple[int, int, MidiEvent]] = [(0, 0, MidiEvent(0, KIND_PROGRAM, ch, (track.program,)))]
            for n in lane:
                on = n.beat * RESOLUTION + n.position
                timed.append((on, 2, MidiEvent(on, KIND_NOTE_ON, ch, (n.pitch, 64))))
                timed.append((on + n.duration, 1, MidiEvent(on + n.duration, KIND_NOTE_OFF, ch, (n.pitch, 0))))
            timed.sort(key=lambda x: (x[0], x[1]))
            rt = RawTrack(events=[ev for _, _, ev in timed])
            pair_notes(rt)
            raw.tracks.append(rt)
    return raw


def write_debug_smf(raw: RawMidi) -> bytes:
    """Serialize the tick events of a RawMidi back to SMF bytes."""
    mid = mido.MidiFile(type=raw.format, ticks_per_beat=raw.division)
    for t in raw.tracks:
        track = mido.MidiTrack()
        last = 0
        for ev in sorted(t.events, key=lambda e: e.tick):
            delta = ev.tick - last
            last = ev.tick
            if ev.kind == KIND_NOTE_ON:
                msg = mido.Message("note_on", channel=ev.channel, note=ev.data[0], velocity=ev.data[1], time=delta)
            elif ev.kind == KIND_NOTE_OFF:
                msg = mido.Message("note_off", channel=ev.channel, note=ev.data[0], velocity=0, time=delta)
            elif ev.kind == KIND_PROGRAM:
                msg = mido.Message("program_change", channel=ev.channel, program=ev.data[0], time=delta)
            elif ev.kind == KIND_TEMPO:
                msg = mido.MetaMessage("set_tempo", tempo=ev.data[0], time=delta)
            elif ev.kind == KIND_TIME_SIGNATURE:
                msg = mido.MetaMessage("time_signature", numerator=ev.data[0], denominator=ev.data[1], time=delta)
            else:
                continue
            track.append(msg)
        mid.tracks.append(track)
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()


# ---------- corpus ----------
def ingest_file(path: Path | str, opts: NormalizeOptions = NormalizeOptions()) -> CanonicalSong | Rejection:
    path = Path(path)
    try:
        raw = parse_smf(path.read_bytes())
    except ValueError as e:
        return Rejection(REJECT_MALFORMED_FILE, str(e))
    return normalize(raw, opts)


def ingest_directory(
    src: Path | str,
    opts: NormalizeOptions = NormalizeOptions(),
    *,
    workers: int = 1,
) -> Tuple[Dict[str, CanonicalSong], Dict[str, Rejection]]:
    """Ingest every MIDI file under src (recursively); names are file stems."""
    paths = sorted(p for p in Path(src).rglob("*") if p.suffix.lower() in MIDI_SUFFIXES)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(ingest_file, paths, [opts] * len(paths)))
    else:
        results = [ingest_file(p, opts) for p in paths]

    songs: Dict[str, CanonicalSong] = {}
    rejections: Dict[str, Rejection] = {}
    for p, res in zip(paths, results):
        name = p.stem
        if name in songs or name in rejections:
            name = "_".join(p.relative_to(src).with_suffix("").parts)
        if isinstance(res, Rejection):
            logger.warning("rejected %s: %s", p, res)
            rejections[name] = res
        else:
            songs[name] = res
    logger.info("ingested %d song(s), rejected %d", len(songs), len(rejections))
    return songs, rejections


def split_corpus(songs: Sequence[T], seed: int) -> Tuple[List[T], List[T], List[T]]:
    """80/10/10 split after a seeded shuffle; remainder goes to train."""
    n = len(songs)
    if n < 10:
        raise TooFewSongs(f"need at least 10 songs to split, got {n}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_eval = n // 10
    valid = [songs[i] for i in order[:n_eval]]
    test = [songs[i] for i in order[n_eval:2 * n_eval]]
    train = [songs[i] for i in order[2 * n_eval:]]
    return train, valid, test
