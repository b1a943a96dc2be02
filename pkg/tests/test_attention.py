import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmmformer import attention as att
from fmmformer import oracle
from fmmformer.feature_maps import FeatureMapSet
from fmmformer.numerics import NumericError, make_rng, rand_matrix, row_softmax


def qkv(seed, n, d=6, dv=None):
    rng = make_rng(seed)
    return rand_matrix(rng, n, d), rand_matrix(rng, n, d), rand_matrix(rng, n, dv or d)


# ---------------------------------------------------------------- near field


def test_full_band_is_dense_softmax():
    q, k, _ = qkv(0, 12)
    d = att.build_near_field(q, k, 11)
    ref = row_softmax(q @ k.T / np.sqrt(q.shape[1]))
    assert np.abs(d.to_dense() - ref).max() <= 1e-10


def test_zero_band_is_identity():
    q, k, v = qkv(1, 9)
    d = att.build_near_field(q, k, 0)
    assert np.array_equal(d.to_dense(), np.eye(9))
    assert np.array_equal(att.near_field_apply(d, v), v)


@pytest.mark.parametrize("causal", [False, True])
def test_band_matches_masked_oracle(causal):
    q, k, v = qkv(2, 16)
    d = att.build_near_field(q, k, 3, causal)
    ref = oracle.dense_banded_oracle(q, k, 3, causal)
    assert np.abs(d.to_dense() - ref).max() <= 1e-10
    assert np.abs(d.to_dense().sum(axis=1) - 1).max() <= 1e-10


def test_causal_apply_renormalizes_a_two_sided_band():
    q, k, v = qkv(3, 8)
    d = att.build_near_field(q, k, 2, causal=False)
    out = att.near_field_apply(d, v, causal=True)
    ref = oracle.dense_banded_oracle(q, k, 2, causal=True) @ v
    assert np.abs(out - ref).max() <= 1e-12


def test_apply_matches_densified_product():
    q, k, v = qkv(4, 32)
    d = att.build_near_field(q, k, 5)
    assert np.abs(att.near_field_apply(d, v) - d.to_dense() @ v).max() <= 1e-10


@pytest.mark.parametrize("n,bw", [(5, 1), (40, 3), (40, 20), (100, 7), (64, 16), (65, 16)])
@pytest.mark.parametrize("causal", [False, True])
def test_tiled_path_matches_oracle(n, bw, causal):
    q, k, v = qkv(n + bw, n)
    out = att.near_field_attention(q, k, v, bw, causal)
    ref = oracle.dense_banded_oracle(q, k, bw, causal) @ v
    assert np.abs(out - ref).max() <= 1e-12


def test_banded_matrix_storage():
    q, k, _ = qkv(5, 6)
    d = att.build_near_field(q, k, 2)
    dense = d.to_dense()
    assert d.diagonals.shape == (5, 6)
    assert d[3, 1] == dense[3, 1] and d[0, 2] == dense[0, 2]
    assert d.diagonals[0, 0] == 0 and d.diagonals[4, 5] == 0  # outside the matrix
    with pytest.raises(IndexError):
        d[0, 3]


def test_bandwidth_errors():
    q, k, _ = qkv(6, 4)
    with pytest.raises(att.ConfigError):
        att.build_near_field(q, k, 4)
    with pytest.raises(att.ConfigError):
        att.build_near_field(q, k, -1)


def test_near_field_locality():
    q, k, v = qkv(7, 30)
    base = att.near_field_attention(q, k, v, 3)
    v2 = v.copy()
    v2[20] += 5.0
    out = att.near_field_attention(q, k, v2, 3)
    far_rows = [i for i in range(30) if abs(i - 20) > 3]
    assert np.array_equal(out[far_rows], base[far_rows])


# ----------------------------------------------------------------- far field


def test_far_field_singleton_returns_v():
    q, k, v = qkv(8, 1)
    assert np.abs(att.far_field_apply(q, k, v, "elu1") - v).max() <= 1e-15
    three = att.far_field_apply(q, k, v, "elu1,neg_elu1,tanh")
    assert np.abs(three - 3 * v).max() <= 1e-9


def test_far_field_explicit_construction():
    q, k, v = qkv(9, 16)
    kern = att.apply("elu1", q) @ att.apply("elu1", k).T
    ref = (kern / kern.sum(axis=1, keepdims=True)) @ v
    assert np.abs(att.far_field_apply(q, k, v, "elu1") - ref).max() <= 1e-9


def test_far_field_causal_two_maps():
    q, k, v = qkv(10, 12)
    out = att.far_field_apply(q, k, v, "elu1,neg_elu1", causal=True)
    ref = oracle.dense_lowrank_oracle(q, k, "elu1,neg_elu1", causal=True) @ v
    assert np.abs(out - ref).max() <= 1e-9


def test_far_field_rejects_nan_and_empty_maps():
    q, k, v = qkv(11, 4)
    q[0, 0] = np.nan
    with pytest.raises(NumericError):
        att.far_field_apply(q, k, v, "elu1")
    with pytest.raises(att.ConfigError):
        att.far_field_apply(*qkv(11, 4), "none")


@pytest.mark.parametrize("n", [1, 5, 63, 64, 65, 130])
@pytest.mark.parametrize("reverse", [False, True])
def test_linear_scan_against_masked_product(n, reverse):
    rng = make_rng(n)
    a, b, c = rand_matrix(rng, n, 3), rand_matrix(rng, n, 3), rand_matrix(rng, n, 2)
    s = a @ b.T
    ref = (np.triu(s) if reverse else np.tril(s)) @ c
    assert np.abs(att.linear_scan(a, b, c, causal=True, reverse=reverse) - ref).max() <= 1e-12
    assert np.abs(att.linear_scan(a, b, c, causal=False) - s @ c).max() <= 1e-12


def test_floor_denominator_keeps_sign():
    safe, clamped = att.floor_denominator(np.array([1e-12, -1e-12, 0.0, 0.5]))
    assert safe.tolist() == [1e-8, -1e-8, 1e-8, 0.5]
    assert clamped.tolist() == [True, True, True, False]


def test_causal_state_matches_definitions():
    q, k, v = qkv(12, 10)
    maps = FeatureMapSet("elu1,tanh")
    state = att.CausalState(maps, 6, 6)
    rows = [state.step(q[i], k[i], v[i]) for i in range(10)]
    assert np.abs(np.array(rows) - att.far_field_apply(q, k, v, maps, causal=True)).max() <= 1e-10
    for l, kind in enumerate(maps):
        fk = att.apply(kind, k)
        assert np.abs(state.s[l] - fk.T @ v).max() <= 1e-10
        assert np.abs(state.z[l] - fk.sum(axis=0)).max() <= 1e-10


# ------------------------------------------------------------------- blended


def test_gate_saturation_gives_near_field():
    q, k, v = qkv(13, 10)
    cfg = att.AttentionConfig(2, "elu1", False, att.BlendParams(40.0, -40.0))
    assert np.abs(att.fmm_attention(q, k, v, cfg) - att.near_field_attention(q, k, v, 2)).max() <= 1e-6


def test_band_disabled_is_scaled_far_field():
    q, k, v = qkv(14, 10)
    cfg = att.AttentionConfig(None, "neg_elu1", False, att.BlendParams(0.0, 1.5))
    ref = att.sigmoid(1.5) * att.far_field_apply(q, k, v, "neg_elu1")
    assert np.abs(att.fmm_attention(q, k, v, cfg) - ref).max() <= 1e-15


def test_full_config_matches_composite_oracle():
    q, k, v = qkv(15, 24)
    cfg = att.AttentionConfig(4, "elu1,neg_elu1", True)
    ref = oracle.dense_fmm_matrix(q, k, cfg) @ v
    assert np.abs(att.fmm_attention(q, k, v, cfg) - ref).max() <= 1e-9


def test_composite_row_sums():
    q, k, _ = qkv(16, 20)
    cfg = att.AttentionConfig(3, "elu1,neg_elu1", False, att.BlendParams(0.3, -0.7))
    sums = oracle.dense_fmm_matrix(q, k, cfg).sum(axis=1)
    assert np.allclose(sums, cfg.blend.w1 + 2 * cfg.blend.w2, atol=1e-12)


def test_config_validation_and_round_trip():
    with pytest.raises(att.ConfigError):
        att.AttentionConfig(None, ())
    with pytest.raises(att.ConfigError):
        att.AttentionConfig(-2, "elu1")
    cfg = att.AttentionConfig(7, "elu1,tanh", True, att.BlendParams(-1.0, 2.0))
    d = cfg.to_dict()
    assert d == {"bandwidth": 7, "feature_maps": "elu1,tanh", "causal": True, "w1_logit": -1.0, "w2_logit": 2.0}
    back = att.AttentionConfig.from_dict({k: str(v) for k, v in d.items()})
    assert back == cfg
    assert att.AttentionConfig.from_dict({"bandwidth": "none", "feature_maps": "tanh"}).bandwidth is None


def test_blend_weights_in_open_interval():
    b = att.BlendParams(-4.0, 4.0)
    assert 0.017 < b.w1 < 0.019 and 0.98 < b.w2 < 0.99
    assert 0 < att.BlendParams(-700.0, 700.0).w1 and att.BlendParams(-30.0, 30.0).w2 < 1


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 40), bw=st.integers(0, 39), data=st.data())
def test_causality_bit_exact(n, bw, data):
    bw = min(bw, n - 1)
    i = data.draw(st.integers(0, n - 2))
    q, k, v = qkv(n * 100 + bw, n)
    cfg = att.AttentionConfig(bw, "elu1,neg_elu1,tanh", True, att.BlendParams(0.2, 0.1))
    base = att.fmm_attention(q, k, v, cfg)
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    for m in (q2, k2, v2):
        m[i + 1:] = rand_matrix(make_rng(i), n - i - 1, m.shape[1], 3.0)
    out = att.fmm_attention(q2, k2, v2, cfg)
    assert np.array_equal(out[: i + 1], base[: i + 1])


def test_batched_inputs():
    rng = make_rng(17)
    q, k, v = (rng.uniform(-1, 1, (2, 3, 20, 4)) for _ in range(3))
    cfg = att.AttentionConfig(3, "elu1,tanh", True)
    out = att.fmm_attention(q, k, v, cfg)
    for b in range(2):
        for h in range(3):
            single = att.fmm_attention(q[b, h], k[b, h], v[b, h], cfg)
            assert np.abs(out[b, h] - single).max() <= 1e-14
