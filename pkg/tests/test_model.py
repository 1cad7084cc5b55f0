import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epipretrain import model as M


# ---------------------------------------------------------------- segmentation


@pytest.mark.parametrize("T,P,S,L", [(10, 4, 1, 7), (4, 4, 1, 1), (29, 4, 2, 13)])
def test_segment_count_examples(T, P, S, L):
    assert M.segment_count(T, P, S) == L
    assert M.segment(np.arange(T), P, S).L == L


def test_segment_too_short():
    with pytest.raises(ValueError, match="series shorter than segment length"):
        M.segment(np.arange(3), 4, 1)


@given(st.integers(1, 60), st.integers(1, 8), st.data())
def test_segment_rows_are_raw_windows(T, P, data):
    S = data.draw(st.integers(1, P))
    if T < P:
        return
    x = np.arange(T, dtype=float)
    seq = M.segment(x, P, S)
    for l in range(seq.L):
        np.testing.assert_array_equal(seq.segments[l], x[l * S : l * S + P])


def test_non_overlapping_tiles_prefix():
    x = np.arange(23.0)
    seq = M.segment(x, 4, 4)
    np.testing.assert_array_equal(seq.segments.reshape(-1), x[: seq.L * 4])


def test_segment_months_follow_values():
    seq = M.segment(np.arange(6.0), 2, 2, month_stamps=[1, 1, 2, 2, 3, 3])
    np.testing.assert_array_equal(seq.segment_months, [[1, 1], [2, 2], [3, 3]])


# ---------------------------------------------------------------- positions


def test_position_zero():
    pe = M.positional_encoding(0, 8)
    np.testing.assert_array_equal(pe[0::2], 0.0)
    np.testing.assert_array_equal(pe[1::2], 1.0)


def test_position_one_first_entry():
    assert M.positional_encoding(1, 4)[0] == pytest.approx(0.841471, abs=1e-6)


def test_position_formula():
    D = 6
    pe = M.positional_encoding(7, D)
    for d in range(D):
        if d % 2 == 0:
            assert pe[d] == pytest.approx(np.sin(7 / 10 ** (5 * d / D)))
        else:
            assert pe[d] == pytest.approx(np.cos(7 / 10 ** (5 * (d - 1) / D)))


def test_positions_distinct():
    table = M.positional_encoding(np.arange(1, 10001), 8)
    assert len(np.unique(np.round(table, 12), axis=0)) == 10000


# ---------------------------------------------------------------- embedding


def test_embed_zero_projection_and_linearity(tiny_cfg, rng):
    p = M.init_params(tiny_cfg)
    x = rng.normal(size=(5, tiny_cfg.P))
    pos = M.position_table(5, tiny_cfg.D)
    np.testing.assert_array_equal(M.embed_segments(np.zeros_like(x), p), pos)
    np.testing.assert_allclose(M.embed_segments(2 * x, p) - pos, 2 * (M.embed_segments(x, p) - pos), atol=1e-14)
    p["embed.w"][:] = 0
    np.testing.assert_array_equal(M.embed_segments(x, p), pos)


def test_embed_shape_mismatch(tiny_cfg):
    with pytest.raises(M.ConfigError):
        M.embed_segments(np.zeros((3, tiny_cfg.P + 1)), M.init_params(tiny_cfg))


# ---------------------------------------------------------------- encoder


def test_single_token_attention_is_one(tiny_cfg, rng):
    _, cache = M.encode(M.init_params(tiny_cfg), tiny_cfg, rng.normal(size=(2, 1, tiny_cfg.P)))
    for a in M.attention_maps(cache):
        np.testing.assert_array_equal(a, 1.0)


def test_attention_rows_sum_to_one(small_cfg, rng):
    cfg = M.ModelConfig(P=4, S=4, D=16, n_layers=2, n_heads=4)
    _, cache = M.encode(M.init_params(cfg), cfg, rng.normal(size=(3, 9, 4)))
    for a in M.attention_maps(cache):
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_permutation_equivariance(tiny_cfg, rng, monkeypatch):
    """Swapping two tokens together with their positional rows swaps the outputs."""
    p = M.init_params(tiny_cfg)
    x = rng.normal(size=(1, 3, tiny_cfg.P))
    pos = M.position_table(3, tiny_cfg.D).copy()
    z1, _ = M.encode(p, tiny_cfg, x)
    perm = [1, 0, 2]
    monkeypatch.setattr(M, "position_table", lambda L, D: pos[perm])
    z2, _ = M.encode(p, tiny_cfg, x[:, perm])
    np.testing.assert_allclose(z2, z1[:, perm], atol=1e-12)


def test_encoder_deterministic(small_cfg, rng):
    p = M.init_params(small_cfg)
    x = rng.normal(size=(2, 6, 4))
    a, _ = M.encode(p, small_cfg, x)
    b, _ = M.encode(p, small_cfg, x)
    assert np.array_equal(a, b)


def test_encoder_nonfinite_names_layer(tiny_cfg):
    p = M.init_params(tiny_cfg)
    p["layers.0.ffn.b2"][0] = np.inf
    with pytest.raises(M.NumericError, match="layer 0"):
        M.encode(p, tiny_cfg, np.zeros((1, 3, tiny_cfg.P)))


def test_config_validation():
    with pytest.raises(M.ConfigError):
        M.ModelConfig(P=4, S=5)
    with pytest.raises(M.ConfigError):
        M.ModelConfig(D=10, n_heads=4)
    assert M.ModelConfig(D=8, n_heads=2).ffn == 32


# ---------------------------------------------------------------- instance norm


def test_revin_examples():
    x = np.array([1.0, 2.0, 3.0])
    n, st_ = M.instance_normalize(x)
    np.testing.assert_allclose(M.instance_denormalize(n, st_), x, atol=1e-9)
    n, st_ = M.instance_normalize(np.full(3, 7.0))
    np.testing.assert_array_equal(n, 0.0)
    np.testing.assert_array_equal(M.instance_denormalize(n, st_), 7.0)


def test_revin_affine_invariance(rng):
    x = rng.normal(size=30)
    a, _ = M.instance_normalize(x)
    b, _ = M.instance_normalize(3.5 * x - 2.0)
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=60)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=40))
def test_revin_round_trip_property(values):
    x = np.array(values)
    n, s = M.instance_normalize(x)
    np.testing.assert_allclose(M.instance_denormalize(n, s), x, atol=1e-6, rtol=0)


# ---------------------------------------------------------------- heads


def test_head_shapes_and_zero_weights(small_cfg, rng):
    p = M.init_params(small_cfg)
    for name, width in (("randmask", None), ("season", None), ("forecast", 3), ("week", 52), ("scalar", None)):
        M.add_head(p, small_cfg, name, width)
    z = rng.normal(size=(2, 5, small_cfg.D))
    assert M.head_forward(p, "randmask", z)[0].shape == (2, 5, small_cfg.P)
    assert M.head_forward(p, "season", z)[0].shape == (2, 5, 4)
    assert M.head_forward(p, "forecast", z)[0].shape == (2, 3)
    assert M.head_forward(p, "week", z)[0].shape == (2, 52)
    assert M.head_forward(p, "scalar", z)[0].shape == (2, 1)
    for k in M.head_names(p, "forecast") + M.head_names(p, "randmask"):
        p[k][:] = 0
    np.testing.assert_array_equal(M.head_forward(p, "forecast", z)[0], 0.0)
    np.testing.assert_array_equal(M.head_forward(p, "randmask", z)[0], 0.0)


def test_reconstruction_head_is_tokenwise(small_cfg, rng):
    p = M.add_head(M.init_params(small_cfg), small_cfg, "lastmask")
    z = rng.normal(size=(1, 6, small_cfg.D))
    base = M.head_forward(p, "lastmask", z)[0]
    z2 = z.copy()
    z2[0, 2] += 0.5
    diff = np.abs(M.head_forward(p, "lastmask", z2)[0] - base).sum(-1)[0]
    assert diff[2] > 0
    assert np.all(np.delete(diff, 2) == 0)


def test_pooled_head_needs_width(small_cfg):
    with pytest.raises(M.ConfigError):
        M.add_head(M.init_params(small_cfg), small_cfg, "forecast")


def test_losses():
    loss, _ = M.mse_loss(np.zeros((1, 2)), np.ones((1, 2)))
    assert loss == 1.0
    loss, _ = M.cross_entropy_loss(np.zeros((3, 4)), np.array([0, 1, 3]))
    assert loss == pytest.approx(1.386294, abs=1e-6)
    with pytest.raises(ValueError):
        M.cross_entropy_loss(np.zeros((1, 4)), np.array([4]))
