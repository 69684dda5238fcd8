import math

import numpy as np
import pytest

from msat_music.services.autograd import Tensor
from msat_music.services.neural_core import (
    FUSION_GLOBAL,
    FUSION_LOCAL,
    CodeOutOfRange,
    IncompatibleCheckpoint,
    ModelConfig,
    check_compatible,
    decompose,
    embed,
    forward,
    fuse_global,
    fuse_local,
    fused_logits,
    global_alpha,
    heads,
    init_msat,
    init_single_scale,
    positional_encoding,
    scale_hidden,
)
from msat_music.services.representation import SCALES, encode, realign, serialize
from msat_music.services.vocabulary import FIELD_SIZES


def sequences_of(song):
    ev = encode(song)
    return {s: serialize(ev, s) for s in SCALES}


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_embed_with_zero_tables_is_position_code(tiny_cfg, song_ab):
    params = init_single_scale(tiny_cfg, "bar", seed=0)
    for name in params.names_in("decoder.bar"):
        if ".embed." in name:
            params.arrays[name][:] = 0.0
    seq = sequences_of(song_ab)["bar"]
    x = embed(seq, params.leaves(), "bar")
    assert np.array_equal(x.data, positional_encoding(len(seq), tiny_cfg.d_model))


def test_embed_rejects_out_of_range_codes(tiny_cfg):
    params = init_single_scale(tiny_cfg, "note", seed=0)
    codes = np.zeros((1, 6), dtype=np.int64)
    codes[0, 2] = FIELD_SIZES[2]
    with pytest.raises(CodeOutOfRange):
        embed(codes, params.leaves(), "note")


def test_decoder_is_causal(tiny_cfg, song_ab):
    params = init_single_scale(tiny_cfg, "note", seed=1)
    codes = sequences_of(song_ab)["note"].codes()
    changed = codes.copy()
    changed[-2, 3] = 100  # pitch of the last note
    p = params.leaves(trainable=False)
    a = scale_hidden(params, p, "note", codes).data
    b = scale_hidden(params, p, "note", changed).data
    np.testing.assert_allclose(a[:-2], b[:-2], rtol=0, atol=1e-12)
    assert not np.allclose(a[-2], b[-2])


def test_decompose_slices_one_affine_map():
    d, n = 3, 2
    weight = np.arange(d * 6 * n, dtype=float).reshape(d, 6 * n)
    bias = np.arange(6 * n, dtype=float)
    h = np.array([[1.0, 0.0, 2.0]])
    tokens = decompose(Tensor(h), {"decompose.weight": Tensor(weight), "decompose.bias": Tensor(bias)})
    full = h @ weight + bias
    assert len(tokens) == 6
    for f, tok in enumerate(tokens):
        assert np.array_equal(tok.data, full[:, f * n:(f + 1) * n])


def test_global_fusion_weights():
    omega = np.zeros((6, 3))
    omega[4] = [math.log(2.0), 0.0, 0.0]
    hn, hb, ht = (Tensor(np.full((2, 3), v)) for v in (4.0, 8.0, 0.0))
    fused, alpha = fuse_global(hn, hb, ht, 4, Tensor(omega))
    np.testing.assert_allclose(alpha.data, [0.5, 0.25, 0.25])
    np.testing.assert_allclose(fused.data, np.full((2, 3), 4.0))
    _, uniform = fuse_global(hn, hb, ht, 0, Tensor(omega))
    np.testing.assert_allclose(uniform.data, [1 / 3] * 3)


def test_local_fusion_scores_each_position():
    w = np.zeros((6, 3, 2))
    w[1, 0] = [math.log(3.0), 0.0]
    hn = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    hb = Tensor(np.array([[0.0, 1.0], [0.0, 1.0]]))
    ht = Tensor(np.zeros((2, 2)))
    fused, alpha = fuse_local(hn, hb, ht, 1, Tensor(w))
    np.testing.assert_allclose(alpha.data, [[0.6, 0.2, 0.2], [1 / 3, 1 / 3, 1 / 3]])
    np.testing.assert_allclose(fused.data, [[0.6, 0.2], [0.0, 1 / 3]])


def test_local_fusion_is_convex():
    rng = np.random.default_rng(3)
    views = [Tensor(rng.normal(size=(5, 4))) for _ in range(3)]
    fused, alpha = fuse_local(*views, 2, Tensor(rng.normal(size=(6, 3, 4))))
    assert np.all(alpha.data >= 0)
    np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0)
    stacked = np.stack([v.data for v in views])
    assert np.all(fused.data <= stacked.max(axis=0) + 1e-12)
    assert np.all(fused.data >= stacked.min(axis=0) - 1e-12)


def test_zero_heads_give_uniform_distributions(tiny_cfg):
    params = init_single_scale(tiny_cfg, "bar", seed=0)
    for name in params.names_in("heads"):
        params.arrays[name][:] = 0.0
    tokens = [Tensor(np.ones((3, tiny_cfg.token_width)))] * 6
    for logits, size in zip(heads(tokens, params.leaves()), FIELD_SIZES):
        probs = logits.softmax(axis=-1).data
        np.testing.assert_allclose(probs, np.full((3, size), 1.0 / size))


@pytest.mark.parametrize("fusion", [FUSION_GLOBAL, FUSION_LOCAL])
def test_msat_forward_shapes_and_frozen_decoders(tiny_cfg, song_ab, fusion):
    params = init_msat(tiny_cfg, fusion, seed=0)
    seqs = sequences_of(song_ab)
    p = params.leaves()
    result = forward(params, p, seqs)
    n = len(seqs["bar"])
    assert [l.shape for l in result.logits] == [(n, v) for v in FIELD_SIZES]
    assert len(result.alphas) == 6

    sum(l.sum() for l in result.logits).backward()
    for name, leaf in p.items():
        if params.is_frozen(name):
            assert leaf.grad is None
        else:
            assert leaf.grad is not None, name


def test_msat_forward_realigns_context_scales(tiny_cfg, song_ab):
    params = init_msat(tiny_cfg, FUSION_LOCAL, seed=2)
    params.arrays["fusion.w"] = np.random.default_rng(0).normal(size=params.arrays["fusion.w"].shape)
    seqs = sequences_of(song_ab)
    p = params.leaves(trainable=False)
    hidden = {}
    for s in SCALES:
        h = scale_hidden(params, p, s, seqs[s]).data
        hidden[s] = Tensor(realign(h, seqs[s].alignment, seqs["bar"].alignment))
    expected = fused_logits(params, p, hidden)
    got = forward(params, p, seqs)
    for a, b in zip(got.logits, expected.logits):
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-12)


def test_global_alpha_starts_uniform(tiny_cfg):
    params = init_msat(tiny_cfg, FUSION_GLOBAL, seed=0)
    np.testing.assert_allclose(global_alpha(params), np.full((6, 3), 1 / 3))


def test_checksum_tracks_group_changes(tiny_cfg):
    params = init_msat(tiny_cfg, FUSION_GLOBAL, seed=0)
    before = params.checksum("decoder.note")
    other = params.copy()
    other.arrays["fusion.omega"][0, 0] = 1.0
    assert other.checksum("decoder.note") == before
    assert other.checksum("fusion") != params.checksum("fusion")
    other.arrays["decoder.note.ln_f.bias"][0] = 1.0
    assert other.checksum("decoder.note") != before


def test_check_compatible(tiny_cfg):
    assert check_compatible([tiny_cfg, tiny_cfg]) == tiny_cfg
    with pytest.raises(IncompatibleCheckpoint):
        check_compatible([tiny_cfg, ModelConfig()])


@pytest.mark.parametrize("fusion", [FUSION_GLOBAL, FUSION_LOCAL])
def test_fusion_laws_over_random_draws(fusion):
    rng = np.random.default_rng(9)
    fuse = fuse_global if fusion == FUSION_GLOBAL else fuse_local
    for _ in range(1000):
        params = Tensor(rng.normal(0.0, 2.0, size=(6, 3) if fusion == FUSION_GLOBAL else (6, 3, 3)))
        f = int(rng.integers(6))
        views = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
        _, alpha = fuse(*views, f, params)
        assert np.all(alpha.data >= 0)
        assert np.all(np.abs(alpha.data.sum(axis=-1) - 1.0) <= 1e-9)
        same, _ = fuse(views[0], views[0], views[0], f, params)
        np.testing.assert_allclose(same.data, views[0].data, rtol=0, atol=1e-12)
