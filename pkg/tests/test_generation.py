import numpy as np
import pytest

from conftest import A, B, make_song
from msat_music.services.generation import (
    GenerationTask,
    InvalidTask,
    PromptTooLong,
    SamplingConfig,
    WrongFusionMode,
    attn_report,
    build_prompt,
    format_attn_table,
    generate,
    grammar_mask,
    validity_mask,
    write_smf,
)
from msat_music.services.midi_ingest import normalize
from msat_music.services.neural_core import FUSION_GLOBAL, FUSION_LOCAL, init_msat, init_single_scale
from msat_music.services.representation import SON, SOS, instrument_event, note_event
from msat_music.services.smf_parser import parse_smf
from msat_music.services.song_store import Note
from msat_music.services.vocabulary import FIELD_SIZES, TYPE_EOS, TYPE_NOTE, beat_code, instrument_code


@pytest.fixture
def model(tiny_cfg):
    return init_msat(tiny_cfg, FUSION_GLOBAL, seed=0)


@pytest.fixture
def prompt_song():
    return make_song({
        A: [(b, 0, 60 + b, 12) for b in range(8)],
        B: [(0, 0, 40, 48), (4, 0, 43, 48)],
    })


def header(*programs):
    return [SOS] + [instrument_event(p) for p in programs] + [SON]


# ---------- masks ----------
def test_no_mask_before_son():
    masks = validity_mask([SOS, instrument_event(A)], [A])
    assert all(m.all() for m in masks)


def test_mask_after_son_limits_type_and_instruments():
    masks = validity_mask(header(A, B), [A, B])
    assert np.flatnonzero(masks[0]).tolist() == [TYPE_NOTE, TYPE_EOS]
    assert np.flatnonzero(masks[5]).tolist() == [instrument_code(A), instrument_code(B)]
    assert all(not m[0] for m in masks[1:])
    assert masks[1][1:].all()


def test_bar_order_floor_is_the_current_bar():
    events = header(A) + [note_event(A, Note(5, 0, 60, 12))]
    beats = validity_mask(events, [A], "bar")[1]
    assert not beats[beat_code(3)]
    assert beats[beat_code(4)] and beats[beat_code(5)]


def test_note_order_floor_is_the_last_beat():
    events = header(A) + [note_event(A, Note(5, 0, 60, 12))]
    beats = validity_mask(events, [A], "note")[1]
    assert not beats[beat_code(4)]
    assert beats[beat_code(5)]


def test_track_order_floor_is_the_last_instrument():
    events = header(A, B) + [note_event(B, Note(5, 0, 60, 12))]
    masks = validity_mask(events, [A, B], "track")
    assert np.flatnonzero(masks[5]).tolist() == [instrument_code(B)]
    assert masks[1][beat_code(0)]


def test_continuation_floor_applies_before_any_generated_note():
    beats = validity_mask(header(A), [A], "bar", min_beat=16)[1]
    assert not beats[1:beat_code(16)].any()
    assert beats[beat_code(16)]


def test_grammar_mask_only_removes_null():
    masks = grammar_mask()
    assert masks[0].all()
    assert [int(m.sum()) for m in masks[1:]] == [v - 1 for v in FIELD_SIZES[1:]]


# ---------- tasks ----------
def test_task_validation(prompt_song):
    with pytest.raises(InvalidTask):
        GenerationTask.instrument_informed([])
    with pytest.raises(InvalidTask):
        GenerationTask.instrument_informed([128])
    with pytest.raises(InvalidTask):
        GenerationTask.continuation(prompt_song, n_beats=16)
    with pytest.raises(InvalidTask):
        GenerationTask("remix")
    assert GenerationTask.instrument_informed([33, 0, 33]).instruments == (0, 33)


def test_continuation_prompt_keeps_first_beats_in_target_order(prompt_song):
    prompt = build_prompt(GenerationTask.continuation(prompt_song, n_beats=4), "bar")
    notes = [ev for ev in prompt if ev.is_note]
    assert prompt[:4] == header(A, B)
    assert {ev.beat_value for ev in notes} == {0, 1, 2, 3}
    assert [(ev.program, ev.beat_value) for ev in notes] == [(A, 0), (A, 1), (A, 2), (A, 3), (B, 0)]


# ---------- generation ----------
def test_instrument_informed_generation(model):
    result = generate(model, GenerationTask.instrument_informed([A, B]), SamplingConfig(seed=1))
    assert result.song.programs == [A, B]
    assert result.events[:4] == header(A, B)
    assert result.events[-1].type == TYPE_EOS
    assert len(result.events) <= model.config.max_len
    assert result.diagnostics["dropped_notes"] == 0
    assert result.diagnostics["grammar_repairs"] == 0
    bars = [ev.bar_value for ev in result.events if ev.is_note]
    assert bars == sorted(bars)


def test_continuation_preserves_the_prompt(model, prompt_song):
    task = GenerationTask.continuation(prompt_song, n_beats=4)
    kept = {(t.program, n) for t in prompt_song.tracks for n in t.notes if n.beat < 4}
    for seed in range(20):
        song = generate(model, task, SamplingConfig(seed=seed, max_events=30)).song
        early = {(t.program, n) for t in song.tracks for n in t.notes if n.beat < 4}
        assert early == kept
        assert set(song.programs) == {A, B}


def test_same_seed_same_song(model):
    task = GenerationTask.instrument_informed([A])
    a = generate(model, task, SamplingConfig(seed=5, max_events=30))
    b = generate(model, task, SamplingConfig(seed=5, max_events=30))
    assert a.events == b.events


def test_greedy_ignores_the_seed(model):
    task = GenerationTask.instrument_informed([A, B])
    a = generate(model, task, SamplingConfig(seed=1, greedy=True, max_events=20))
    b = generate(model, task, SamplingConfig(seed=2, greedy=True, max_events=20))
    assert a.events == b.events


def test_unfiltered_generation_still_decodes(model):
    result = generate(model, GenerationTask.instrument_informed([A]),
                      SamplingConfig(seed=3, filter_validity=False, temperature=2.0, max_events=30))
    assert set(result.diagnostics) == {"masked_fallbacks", "grammar_repairs", "dropped_notes", "generated_events"}
    assert result.song.programs == [A]
    assert result.events[-1].type == TYPE_EOS


def test_single_scale_model_generates(tiny_cfg):
    model = init_single_scale(tiny_cfg, "note", seed=0)
    result = generate(model, GenerationTask.instrument_informed([A]), SamplingConfig(seed=0, max_events=20))
    beats = [ev.beat_value for ev in result.events if ev.is_note]
    assert beats == sorted(beats)


def test_prompt_too_long(model):
    with pytest.raises(PromptTooLong):
        generate(model, GenerationTask.instrument_informed([A, B]), SamplingConfig(max_events=4))


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(temperature=0.0)
    with pytest.raises(ValueError):
        SamplingConfig(top_k=(1, 2, 3))
    assert SamplingConfig(top_k=5).top_k == (5,) * 6


# ---------- attention report and SMF ----------
def test_attn_report(model, tiny_cfg):
    alpha = attn_report(model)
    assert alpha.shape == (6, 3)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0)
    table = format_attn_table(alpha)
    assert table.splitlines()[0].split() == ["token", "note", "bar", "track"]
    assert len(table.splitlines()) == 7
    with pytest.raises(WrongFusionMode):
        attn_report(init_msat(tiny_cfg, FUSION_LOCAL, seed=0))


def test_written_smf_reads_back_as_the_same_song(tmp_path, song_ab):
    path = tmp_path / "out" / "song.mid"
    write_smf(song_ab, path)
    raw = parse_smf(path.read_bytes())
    assert raw.format == 0 and raw.division == 480
    assert normalize(raw) == song_ab


def test_instrument_informed_uses_only_requested_instruments(model):
    task = GenerationTask.instrument_informed([B, 40])
    for seed in range(20):
        result = generate(model, task, SamplingConfig(seed=seed, max_events=24))
        assert {ev.program for ev in result.events if ev.is_note} <= {B, 40}
        assert result.song.programs == [B, 40]
