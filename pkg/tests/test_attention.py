import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stmodes.attention import (AttentionParams, ChannelAttentionParams, SpatialAttentionParams,
                               TemporalAttentionParams, apply_channel_attention,
                               apply_temporal_attention, attention_3d, channel_attention,
                               spatial_attention, temporal_attention, write_channel_matrix_csv)
from stmodes.errors import InvalidInputError
from stmodes.numerics import Tensor, check_parameters, ops

reals = st.floats(-10, 10, allow_nan=False)


def zeroed(params):
    for t in params.parameters().values():
        t.data[...] = 0.0
    return params


def features(rng, b=2, n=3, d=4, t=5):
    return Tensor(rng.standard_normal((b, n, d, t)))


def test_spatial_zero_weights_uniform_rows(rng):
    p = zeroed(SpatialAttentionParams.init(3, 4, 5, rng))
    np.testing.assert_allclose(spatial_attention(features(rng), p).data, 1 / 3, atol=1e-15)


def test_spatial_zero_projections_give_half_node_mix(rng):
    # sigmoid(0) = 0.5, so each pre-softmax score is 0.5 * row sum of V_s
    p = zeroed(SpatialAttentionParams.init(3, 4, 5, rng))
    p.node_mix.data[...] = rng.standard_normal((3, 3))
    scores = np.tile(0.5 * p.node_mix.data.sum(axis=1, keepdims=True), (1, 3))
    out = spatial_attention(features(rng, b=1), p).data[0]
    np.testing.assert_allclose(out, _row_softmax(scores), atol=1e-14)


def _row_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_spatial_single_node(rng):
    p = SpatialAttentionParams.init(1, 4, 5, rng)
    np.testing.assert_array_equal(spatial_attention(features(rng, n=1), p).data, [[[1.0]]] * 2)


def test_spatial_random_rows_sum_to_one(rng):
    p = SpatialAttentionParams.init(3, 4, 5, rng)
    out = spatial_attention(features(rng), p).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-10)


def test_spatial_matches_loop_oracle(rng):
    p = SpatialAttentionParams.init(3, 4, 5, rng)
    p.bias.data[...] = rng.standard_normal((3, 3))
    z = rng.standard_normal((1, 3, 4, 5))
    zz = z[0]
    lhs = np.array([[sum(zz[i, c, t] * p.time_proj.data[t] for t in range(5)) for c in range(4)]
                    for i in range(3)]) @ p.channel_time_proj.data          # [N, T]
    rhs = np.array([[sum(p.channel_proj.data[c] * zz[j, c, t] for c in range(4)) for t in range(5)]
                    for j in range(3)])                                      # [N, T]
    s = p.node_mix.data @ (1 / (1 + np.exp(-(lhs @ rhs.T + p.bias.data))))
    np.testing.assert_allclose(spatial_attention(Tensor(z), p).data[0], _row_softmax(s), atol=1e-13)


def test_temporal_zero_weights_uniform_rows(rng):
    p = zeroed(TemporalAttentionParams.init(3, 4, 5, rng))
    np.testing.assert_allclose(temporal_attention(features(rng), p).data, 0.2, atol=1e-15)


def test_temporal_single_step(rng):
    p = TemporalAttentionParams.init(3, 4, 1, rng)
    np.testing.assert_array_equal(temporal_attention(features(rng, t=1), p).data, [[[1.0]]] * 2)


def test_temporal_rows_and_batch_permutation(rng):
    p = TemporalAttentionParams.init(3, 4, 5, rng)
    z = rng.standard_normal((4, 3, 4, 5))
    out = temporal_attention(Tensor(z), p).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-10)
    perm = [2, 0, 3, 1]
    np.testing.assert_array_equal(temporal_attention(Tensor(z[perm]), p).data, out[perm])


def test_temporal_matches_loop_oracle(rng):
    p = TemporalAttentionParams.init(3, 4, 5, rng)
    z = rng.standard_normal((1, 3, 4, 5))[0]
    lhs = np.array([[sum(z[n, c, t] * p.node_proj.data[n] for n in range(3)) for c in range(4)]
                    for t in range(5)]) @ p.node_channel_proj.data.T          # [T, N]
    rhs = np.einsum("c,nct->nt", p.channel_proj.data, z)                     # [N, T]
    e = p.time_mix.data @ (1 / (1 + np.exp(-(lhs @ rhs + p.bias.data))))
    np.testing.assert_allclose(temporal_attention(Tensor(z[None]), p).data[0], _row_softmax(e),
                               atol=1e-13)


def test_apply_temporal_identity_and_average(rng):
    z = features(rng)
    eye = Tensor(np.tile(np.eye(5), (2, 1, 1)))
    np.testing.assert_array_equal(apply_temporal_attention(z, eye).data, z.data)
    uniform = Tensor(np.full((2, 5, 5), 0.2))
    out = apply_temporal_attention(z, uniform).data
    np.testing.assert_allclose(out, np.repeat(z.data.mean(axis=-1, keepdims=True), 5, axis=-1),
                               atol=1e-15)


def test_apply_temporal_matches_double_loop(rng):
    z = rng.standard_normal((2, 3, 4, 5))
    e = rng.uniform(size=(2, 5, 5))
    ref = np.zeros_like(z)
    for b in range(2):
        for t in range(5):
            for s in range(5):
                ref[b, ..., t] += z[b, ..., s] * e[b, t, s]
    np.testing.assert_allclose(apply_temporal_attention(Tensor(z), Tensor(e)).data, ref,
                               atol=1e-12)


def test_channel_zero_threshold_is_identity(rng):
    p = ChannelAttentionParams.init(3, 4, 5, rng)
    z = features(rng)
    c_th, _ = channel_attention(z, p, threshold=0.0)
    c_big, _ = channel_attention(z, p, threshold=1e9)
    assert np.all(c_big.data == 0.0)
    # unshrunk scores recomputed independently
    lhs = np.einsum("bnct,t->bcn", z.data, p.time_proj.data) @ p.node_time_proj.data
    rhs = np.einsum("n,bnct->btc", p.node_proj.data, z.data)
    scores = p.channel_mix.data @ (1 / (1 + np.exp(-(lhs @ rhs + p.bias.data))))
    np.testing.assert_allclose(c_th.data, scores, atol=1e-13)
    assert np.array_equal(c_th.data, channel_attention(z, p, threshold=Tensor(np.array(0.0)))[0].data)


def test_shrinkage_definition():
    out = ops.soft_threshold(np.array([0.5, -0.1, -0.7, 0.2]), 0.2).data
    np.testing.assert_allclose(out, [0.3, 0.0, -0.5, 0.0], atol=1e-15)


def test_saturated_threshold_gives_uniform_rows(rng):
    p = ChannelAttentionParams.init(3, 4, 5, rng)
    z = features(rng)
    c_th, c_norm = channel_attention(z, p, threshold=1e3)
    assert np.all(c_th.data == 0)
    np.testing.assert_allclose(c_norm.data, 0.25, atol=1e-15)


def test_learned_threshold_is_non_negative_and_starts_small(rng):
    p = ChannelAttentionParams.init(3, 4, 5, rng)
    assert 0 < p.threshold().item() < 3e-3
    p.threshold_raw.data[...] = -800.0
    assert p.threshold().item() >= 0.0
    assert ops.softplus(np.array(ChannelAttentionParams.raw_for(0.2))).item() == pytest.approx(0.2)


def test_apply_channel_identity_and_zero(rng):
    z = features(rng)
    eye = Tensor(np.tile(np.eye(4), (2, 1, 1)))
    np.testing.assert_allclose(apply_channel_attention(z, eye).data, 2 * z.data, atol=1e-15)
    np.testing.assert_array_equal(apply_channel_attention(z, Tensor(np.zeros((2, 4, 4)))).data,
                                  z.data)


def test_apply_channel_matches_triple_loop(rng):
    z = rng.standard_normal((2, 3, 4, 5))
    c = rng.uniform(size=(2, 4, 4))
    ref = z.copy()
    for b in range(2):
        for i in range(3):
            for j in range(4):
                for t in range(5):
                    ref[b, i, j, t] += sum(z[b, i, k, t] * c[b, k, j] for k in range(4))
    np.testing.assert_allclose(apply_channel_attention(Tensor(z), Tensor(c)).data, ref,
                               atol=1e-12)


def test_shape_errors(rng):
    p = AttentionParams.init(3, 4, 5, rng)
    with pytest.raises(InvalidInputError):
        spatial_attention(features(rng, n=2), p.spatial)
    with pytest.raises(InvalidInputError):
        temporal_attention(features(rng, t=4), p.temporal)
    with pytest.raises(InvalidInputError):
        channel_attention(features(rng, d=3), p.channel)
    with pytest.raises(InvalidInputError):
        apply_temporal_attention(features(rng), Tensor(np.ones((2, 4, 4))))
    with pytest.raises(InvalidInputError):
        apply_channel_attention(features(rng), Tensor(np.ones((2, 5, 5))))


def test_attention_3d_wiring(rng):
    p = AttentionParams.init(3, 4, 5, rng)
    z = features(rng)
    out = attention_3d(z, p)
    e = temporal_attention(z, p.temporal)
    c_th, c_norm = channel_attention(z, p.channel)
    np.testing.assert_array_equal(out.e_norm.data, e.data)
    np.testing.assert_array_equal(out.c_th.data, c_th.data)
    np.testing.assert_array_equal(out.s_norm.data,
                                  spatial_attention(apply_temporal_attention(z, e), p.spatial).data)
    np.testing.assert_array_equal(out.z_new.data, apply_channel_attention(z, c_norm).data)


def test_full_attention_gradient_check_including_threshold(rng):
    p = AttentionParams.init(3, 4, 5, rng)
    # a threshold that actually bites, so its gradient path is non-trivial
    p.channel.threshold_raw.data[...] = ChannelAttentionParams.raw_for(0.05)
    z = features(rng)
    w = [Tensor(rng.standard_normal(s)) for s in ((2, 3, 4, 5), (2, 3, 3), (2, 5, 5), (2, 4, 4))]

    def loss():
        out = attention_3d(z, p)
        terms = [ops.sum(ops.mul(t, wt)) for t, wt in zip((out.z_new, out.s_norm, out.e_norm,
                                                           out.c_th), w)]
        return ops.add(ops.add(terms[0], terms[1]), ops.add(terms[2], terms[3]))

    report = check_parameters(loss, p.parameters(), step=1e-5)
    assert max(report.values()) < 1e-4, report


def test_channel_matrix_csv(tmp_path, rng):
    m = rng.standard_normal((3, 3))
    write_channel_matrix_csv(m, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["row", "mode_0", "mode_1", "mode_2"]
    np.testing.assert_array_equal(np.array([[float(v) for v in r[1:]] for r in rows[1:]]), m)
    with pytest.raises(InvalidInputError):
        write_channel_matrix_csv(np.ones((2, 3)), tmp_path / "x.csv")


# invariants

rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=reals)


@given(rows, st.floats(-50, 50))
def test_softmax_rows_sum_one_and_shift_invariant(x, shift):
    s = ops.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-10)
    assert np.all((s > 0) & (s <= 1))
    np.testing.assert_allclose(ops.softmax(x + shift).data, s, atol=1e-9)


@given(rows, st.floats(0, 5))
def test_shrinkage_bounded_and_odd(c, phi):
    out = ops.soft_threshold(c, phi).data
    assert np.all(np.abs(out) <= np.abs(c))
    np.testing.assert_array_equal(ops.soft_threshold(-c, phi).data, -out)


@given(rows, rows, st.floats(0, 5))
def test_shrinkage_non_expansive(a, b, phi):
    if a.shape != b.shape:
        b = np.resize(b, a.shape)
    diff = np.abs(ops.soft_threshold(a, phi).data - ops.soft_threshold(b, phi).data)
    assert np.all(diff <= np.abs(a - b) + 1e-12)


@given(rows, st.floats(0, 5), st.floats(0, 5))
def test_shrinkage_monotone_in_threshold(c, p1, p2):
    lo, hi = sorted((p1, p2))
    assert np.all(np.abs(ops.soft_threshold(c, hi).data) <= np.abs(ops.soft_threshold(c, lo).data))
