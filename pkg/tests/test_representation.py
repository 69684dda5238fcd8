from collections import Counter

import numpy as np
import pytest

from conftest import A, B, make_song
from msat_music.services.representation import (
    EOS,
    SCALES,
    SON,
    SOS,
    Event,
    LengthMismatch,
    MalformedSequence,
    VocabularyOverflow,
    deserialize,
    encode,
    instrument_event,
    note_event,
    read_token_file,
    realign,
    segment_song,
    serialize,
    write_token_file,
)
from msat_music.services.song_store import CanonicalSong, Note, Track
from msat_music.services.vocabulary import DURATION_TABLE, MAX_DURATION, TYPE_NOTE, snap_duration
from msat_music.tools.random_corpus import random_song


def labels(seq):
    return ["AB"[ev.program == B] + str(ev.beat_value) for ev in seq.events if ev.type == TYPE_NOTE]


def test_duration_table_shape():
    assert len(DURATION_TABLE) == 64
    assert list(DURATION_TABLE) == sorted(set(DURATION_TABLE))
    assert DURATION_TABLE[0] == 1 and DURATION_TABLE[-1] == MAX_DURATION
    assert all(snap_duration(d) in DURATION_TABLE for d in range(1, MAX_DURATION + 1))
    assert snap_duration(51) == 48  # tie goes to the shorter entry
    assert snap_duration(38) == 39


def test_encode_empty_track():
    song = CanonicalSong(tracks=[Track(program=0)], length_beats=0)
    assert encode(song).events == [SOS, instrument_event(0), SON, EOS]


def test_encode_time_order():
    song = make_song({A: [(1, 0, 64, 12), (0, 0, 60, 12)]})
    events = encode(song).events
    assert events[3:5] == [note_event(A, Note(0, 0, 60, 12)), note_event(A, Note(1, 0, 64, 12))]
    assert events[-1] == EOS


def test_encode_preserves_note_multiset(song_ab):
    events = encode(song_ab).events
    assert sum(ev.type == 1 for ev in events) == 2
    got = Counter((ev.program, ev.beat_value, ev.pitch - 1) for ev in events if ev.is_note)
    want = Counter((t.program, n.beat, n.pitch) for t in song_ab.tracks for n in t.notes)
    assert got == want


def test_encode_rejects_beat_past_vocabulary():
    song = CanonicalSong(tracks=[Track(0, [Note(256, 0, 60, 1)])], length_beats=257)
    with pytest.raises(VocabularyOverflow):
        encode(song)


@pytest.mark.parametrize("scale,order", [
    ("note", ["A0", "B0", "A1", "A4", "B4"]),
    ("bar", ["A0", "A1", "B0", "A4", "B4"]),
    ("track", ["A0", "A1", "A4", "B0", "B4"]),
])
def test_scale_orders(song_ab, scale, order):
    assert labels(serialize(encode(song_ab), scale)) == order


def test_scaled_sequences_share_frame_and_alignment_is_bijective(song_ab):
    ev = encode(song_ab)
    seqs = [serialize(ev, s) for s in SCALES]
    assert len({len(s) for s in seqs}) == 1
    for s in seqs:
        assert sorted(s.alignment) == list(range(len(ev)))
        assert [ev.events[i] for i in s.alignment] == s.events
        assert s.events[:ev.header_length] == ev.events[:ev.header_length]


@pytest.mark.parametrize("scale", SCALES)
def test_round_trip(song_ab, scale):
    result = deserialize(serialize(encode(song_ab), scale))
    assert result.song == song_ab
    assert result.dropped_notes == 0


def test_deserialize_empty():
    result = deserialize([SOS, instrument_event(0), SON, EOS])
    assert result.song == CanonicalSong(tracks=[Track(program=0)], length_beats=0)


def test_deserialize_drops_undeclared_instrument():
    events = [SOS, instrument_event(0), SON, note_event(0, Note(0, 0, 60, 12)), note_event(99, Note(1, 0, 62, 12)), EOS]
    result = deserialize(events)
    assert result.dropped_notes == 1
    assert result.song.note_count == 1


@pytest.mark.parametrize("events", [
    [instrument_event(0), SON, EOS],
    [SOS, instrument_event(0), SON],
    [SOS, note_event(0, Note(0, 0, 60, 12)), SON, EOS],
    [SOS, SON, Event(TYPE_NOTE, 1, 0, 61, 12, 1), EOS],
])
def test_deserialize_malformed(events):
    with pytest.raises(MalformedSequence):
        deserialize(events)


def test_bar_and_track_grouping(song_ab):
    ev = encode(song_ab)
    bars = [e.bar_value for e in serialize(ev, "bar").events if e.is_note]
    programs = [e.program for e in serialize(ev, "track").events if e.is_note]
    assert bars == sorted(bars)
    assert programs == sorted(programs)


def test_realign_identity_and_swap():
    h = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(realign(h, [0, 1], [0, 1]), h)
    assert np.array_equal(realign(h, [0, 1], [1, 0]), h[::-1])


def test_realign_against_index_chasing():
    rng = np.random.default_rng(5)
    alignment = list(rng.permutation(7))
    target = list(rng.permutation(7))
    h = rng.normal(size=(7, 3))
    out = realign(h, alignment, target)
    for j in range(7):
        canonical = target[j]
        source = next(i for i in range(7) if alignment[i] == canonical)
        assert np.array_equal(out[j], h[source])


def test_realign_length_mismatch():
    with pytest.raises(LengthMismatch):
        realign(np.zeros((3, 2)), [0, 1], [1, 0])


def test_realign_maps_scale_outputs_onto_bar_order(song_ab):
    ev = encode(song_ab)
    note, bar = serialize(ev, "note"), serialize(ev, "bar")
    assert realign(list(note.events), note.alignment, bar.alignment) == bar.events


def test_token_file(tmp_path, song_ab):
    seq = serialize(encode(song_ab), "track")
    path = tmp_path / "tok" / "a.tok"
    write_token_file(seq, path)
    assert path.read_text().splitlines()[0] == "msat-tokens v1 scale=track"
    back = read_token_file(path)
    assert back.scale == "track"
    assert back.events == seq.events
    assert back.alignment == list(seq.alignment)


def test_segment_song_splits_at_bar_boundaries():
    song = make_song({A: [(b * 4, 0, 60 + b, 12) for b in range(6)] + [(1, 0, 50, 12)]})
    segments = segment_song(song, max_len=7)  # frame of 4 events leaves 3 notes
    assert len(segments) > 1
    for seg in segments:
        assert len(encode(seg)) <= 7
    bars = [sorted({n.beat // 4 for n in seg.tracks[0].notes}) for seg in segments]
    flat = [b for group in bars for b in group]
    assert flat == sorted(set(flat))
    assert sum(seg.note_count for seg in segments) == song.note_count


def test_random_corpus_round_trips_at_every_scale():
    rng = np.random.default_rng(11)
    for _ in range(50):
        song = random_song(rng)
        ev = encode(song)
        for scale in SCALES:
            assert deserialize(serialize(ev, scale)).song == song
