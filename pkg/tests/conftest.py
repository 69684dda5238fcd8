from __future__ import annotations

import io
from typing import Iterable, List, Sequence, Tuple

import mido
import pytest

from msat_music.services.neural_core import ModelConfig
from msat_music.services.song_store import CanonicalSong, Note, Track, length_of

A, B = 0, 33


def vlq(n: int) -> bytes:
    out = [n & 0x7F]
    n >>= 7
    while n:
        out.append(0x80 | (n & 0x7F))
        n >>= 7
    return bytes(reversed(out))


def track_chunk(events: Iterable[Tuple[int, bytes]], end: bool = True) -> bytes:
    body = b"".join(vlq(delta) + data for delta, data in events)
    if end:
        body += b"\x00\xff\x2f\x00"
    return b"MTrk" + len(body).to_bytes(4, "big") + body


def smf(tracks: Sequence[bytes], fmt: int = 0, division: int = 96) -> bytes:
    header = b"MThd" + (6).to_bytes(4, "big") + fmt.to_bytes(2, "big")
    header += len(tracks).to_bytes(2, "big") + division.to_bytes(2, "big")
    return header + b"".join(tracks)


def mido_bytes(tracks: List[List[mido.Message]], ticks_per_beat: int = 96) -> bytes:
    mid = mido.MidiFile(type=1 if len(tracks) > 1 else 0, ticks_per_beat=ticks_per_beat)
    for msgs in tracks:
        t = mido.MidiTrack()
        t.extend(msgs)
        mid.tracks.append(t)
    buf = io.BytesIO()
    mid.save(file=buf)
    return buf.getvalue()


def make_song(tracks: dict) -> CanonicalSong:
    built = [Track(program=p, notes=sorted(Note(*n) for n in notes)) for p, notes in sorted(tracks.items())]
    return CanonicalSong(tracks=built, length_beats=length_of(built))


@pytest.fixture
def song_ab() -> CanonicalSong:
    """A = program 0 at beats 0, 1, 4; B = program 33 at beats 0, 4; all at position 0."""
    return make_song({
        A: [(0, 0, 60, 12), (1, 0, 62, 12), (4, 0, 64, 12)],
        B: [(0, 0, 40, 12), (4, 0, 43, 12)],
    })


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(d_model=8, token_width=4, n_layers=1, n_heads=2, d_ff=16, max_len=64)


@pytest.fixture
def toy_song() -> CanonicalSong:
    """One note, one instrument: SOS, INSTRUMENT, SON, NOTE, EOS."""
    return make_song({A: [(0, 0, 60, 12)]})
