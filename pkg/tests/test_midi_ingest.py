from collections import Counter
from fractions import Fraction
import math

import mido
import numpy as np
import pytest

from conftest import A, B, make_song, mido_bytes
from msat_music.services.midi_ingest import (
    REJECT_NO_PITCHED_NOTES,
    REJECT_NON_COMMON_TIME,
    Rejection,
    TooFewSongs,
    ingest_directory,
    normalize,
    quantize_ticks,
    song_to_raw,
    split_corpus,
    write_debug_smf,
)
from msat_music.services.smf_parser import (
    KIND_NOTE_OFF,
    KIND_NOTE_ON,
    KIND_PROGRAM,
    KIND_TIME_SIGNATURE,
    MidiEvent,
    RawMidi,
    RawTrack,
    pair_notes,
    parse_smf,
)
from msat_music.services.song_store import Note, check_song


def raw_of(division, *events):
    track = RawTrack(events=list(events))
    pair_notes(track)
    return RawMidi(format=0, division=division, tracks=[track])


def note(tick, length, pitch=60, channel=0):
    return [
        MidiEvent(tick, KIND_NOTE_ON, channel, (pitch, 80)),
        MidiEvent(tick + length, KIND_NOTE_OFF, channel, (pitch, 0)),
    ]


def test_quantize_matches_rational_round_half_up():
    rng = np.random.default_rng(7)
    for division in (96, 384, 480, 1000):
        for tick in rng.integers(0, 200_000, size=1000):
            expected = math.floor(Fraction(int(tick) * 12, division) + Fraction(1, 2))
            assert quantize_ticks(int(tick), division) == expected


def test_tick_500_at_division_480():
    song = normalize(raw_of(480, *note(500, 480)))
    assert song.tracks[0].notes == [Note(1, 1, 60, 12)]


def test_percussion_only_is_rejected():
    result = normalize(raw_of(96, *note(0, 96, channel=9)))
    assert isinstance(result, Rejection)
    assert result.reason == REJECT_NO_PITCHED_NOTES


def test_three_four_is_rejected():
    ts = MidiEvent(0, KIND_TIME_SIGNATURE, data=(3, 4))
    result = normalize(raw_of(96, ts, *note(0, 96)))
    assert isinstance(result, Rejection)
    assert result.reason == REJECT_NON_COMMON_TIME


def test_repeated_four_four_is_kept():
    events = [MidiEvent(0, KIND_TIME_SIGNATURE, data=(4, 4)), MidiEvent(384, KIND_TIME_SIGNATURE, data=(4, 4))]
    song = normalize(raw_of(96, *events, *note(0, 96)))
    assert song.note_count == 1


def test_zero_length_and_duplicate_onsets():
    events = note(0, 2) + note(96, 48) + note(96, 96)
    events.sort(key=lambda e: (e.tick, e.kind != KIND_NOTE_OFF))
    song = normalize(raw_of(96, *events))
    # 2 ticks at division 96 quantize to 0 positions -> clamped to 1
    assert song.tracks[0].notes == [Note(0, 0, 60, 1), Note(1, 0, 60, 12)]


def test_program_lookup_and_merge_per_program():
    events = [MidiEvent(0, KIND_PROGRAM, 0, (33,)), MidiEvent(0, KIND_PROGRAM, 1, (33,))]
    events += note(0, 96, 40, channel=0) + note(96, 96, 45, channel=1) + note(0, 96, 70, channel=2)
    events.sort(key=lambda e: e.tick)
    song = normalize(raw_of(96, *events))
    assert song.programs == [0, 33]
    assert [n.pitch for n in song.track_for(33).notes] == [40, 45]
    assert [n.pitch for n in song.track_for(0).notes] == [70]


def test_notes_past_the_beat_limit_are_cut():
    song = normalize(raw_of(12, *note(0, 12), *note(256 * 12, 12, 62)))
    assert song.length_beats == 1
    assert song.note_count == 1


def test_normalize_is_idempotent(song_ab):
    overlapping = make_song({A: [(0, 0, 60, 48), (1, 0, 60, 12)], B: [(2, 6, 50, 384)]})
    for song in (song_ab, overlapping):
        again = normalize(song_to_raw(song))
        assert again == song
        check_song(again)


def test_debug_writer_preserves_note_multiset(song_ab):
    raw = song_to_raw(song_ab)
    back = parse_smf(write_debug_smf(raw))

    def multiset(r):
        return Counter((n.channel, n.pitch, n.on_tick, n.off_tick) for t in r.tracks for n in t.notes)

    assert multiset(back) == multiset(raw)


@pytest.mark.parametrize("n,sizes", [(10, (8, 1, 1)), (23, (19, 2, 2))])
def test_split_sizes(n, sizes):
    train, valid, test = split_corpus(list(range(n)), seed=3)
    assert (len(train), len(valid), len(test)) == sizes
    assert sorted(train + valid + test) == list(range(n))


def test_split_is_deterministic():
    songs = [f"s{i}" for i in range(23)]
    assert split_corpus(songs, 11) == split_corpus(songs, 11)


def test_split_needs_ten_songs():
    with pytest.raises(TooFewSongs):
        split_corpus(list(range(9)), 0)


def _file(numerator):
    msgs = [
        mido.MetaMessage("time_signature", numerator=numerator, denominator=4, time=0),
        mido.Message("note_on", note=60, velocity=80, time=0),
        mido.Message("note_off", note=60, velocity=0, time=96),
    ]
    return mido_bytes([msgs])


def test_ingest_directory_filters_non_common_time(tmp_path):
    (tmp_path / "waltz.mid").write_bytes(_file(3))
    (tmp_path / "march.mid").write_bytes(_file(4))
    (tmp_path / "broken.mid").write_bytes(b"not midi")
    songs, rejections = ingest_directory(tmp_path)
    assert list(songs) == ["march"]
    assert rejections["waltz"].reason == REJECT_NON_COMMON_TIME
    assert "broken" in rejections
