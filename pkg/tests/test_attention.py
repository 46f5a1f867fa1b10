import itertools

import numpy as np
import pytest

from visagg.attention import (
    AttentionParams,
    attention_weights,
    channel_attention,
    dual_attention,
    embed_current,
    embed_support,
    object_dual_attention,
    temporal_attention,
)
from visagg.tensor import ContractError, Tensor, conv1x1, grad_check, mul, relu, tsum


def dense(C=8, seed=0, reduction=4):
    p = AttentionParams.init(C, reduction=reduction, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for t in p.parameters():
        t.data[:] = rng.normal(0.0, 0.5, size=t.shape)
    return p


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def aggregation_loop(fc, supports, p):
    # independent transcription: keys/values by explicit per-position matvec
    def proj(op, v):
        return np.maximum(op.weight.data @ v + op.bias.data, 0.0)

    C, H, W = fc.shape
    pos = [(t, y, x) for t in range(len(supports)) for y in range(H) for x in range(W)]
    out = np.zeros_like(fc)
    for y in range(H):
        for x in range(W):
            q = proj(p.key_proj_current, fc[:, y, x])
            logits = np.array([proj(p.key_proj_support, supports[t][:, yy, xx]) @ q for t, yy, xx in pos])
            a = np.exp(logits - logits.max())
            a /= a.sum()
            agg = sum(a[i] * proj(p.value_proj_support, supports[t][:, yy, xx]) for i, (t, yy, xx) in enumerate(pos))
            out[:, y, x] = p.output_transform.weight.data @ np.maximum(agg, 0) + p.output_transform.bias.data
    return out


def test_init_rejects_bad_channels():
    with pytest.raises(ContractError):
        AttentionParams.init(6)
    with pytest.raises(ContractError):
        AttentionParams.init(8, reduction=3)


def test_embed_current_shape_and_oracle():
    p = dense(8)
    x = rand(8, 4, 4, seed=1)
    out = embed_current(x, p)
    assert out.shape == (2, 4, 4)
    assert np.max(np.abs(out.data - relu(conv1x1(x, p.key_proj_current)).data)) < 1e-12


def test_embed_current_zero_params():
    p = AttentionParams.init(8)
    p.key_proj_current.zero_()
    assert not embed_current(rand(8, 3, 3), p).data.any()


def test_embed_support_stacks_frames():
    p = dense(8)
    a, b = rand(8, 3, 3, seed=2), rand(8, 3, 3, seed=3)
    emb = embed_support([a], p)
    assert emb.keys.shape == (1, 2, 3, 3) and emb.num_positions == 9
    emb = embed_support([a, a], p)
    np.testing.assert_array_equal(emb.keys.data[0], emb.keys.data[1])
    emb = embed_support([a, b], p)
    for k, f in enumerate((a, b)):
        assert np.max(np.abs(emb.values.data[k] - relu(conv1x1(f, p.value_proj_support)).data)) < 1e-12


def test_embed_support_errors():
    p = dense(8)
    with pytest.raises(ContractError):
        embed_support([], p)
    with pytest.raises(ContractError):
        embed_support([rand(8, 3, 3), rand(8, 4, 3)], p)


def test_temporal_matches_loop():
    p = dense(4, seed=4)
    fc = np.random.default_rng(5).normal(size=(4, 3, 3))
    sup = [np.random.default_rng(6 + k).normal(size=(4, 3, 3)) for k in range(2)]
    out = temporal_attention(Tensor(fc), embed_support([Tensor(s) for s in sup], p), p).data
    assert np.max(np.abs(out - aggregation_loop(fc, sup, p))) < 1e-10


def test_temporal_self_attention_t1():
    p = dense(4, seed=7)
    fc = np.random.default_rng(8).normal(size=(4, 2, 3))
    out = temporal_attention(Tensor(fc), embed_support([Tensor(fc)], p), p).data
    assert np.max(np.abs(out - aggregation_loop(fc, [fc], p))) < 1e-10


def test_temporal_zero_values():
    p = dense(8)
    p.value_proj_support.zero_()
    p.output_transform.bias.data[:] = 0
    out = temporal_attention(rand(8, 3, 3), embed_support([rand(8, 3, 3, seed=1)], p), p)
    assert not out.data.any()


def test_temporal_constant_keys_average_values():
    p = dense(8, seed=9)
    p.key_proj_support.weight.data[:] = 0  # every support key equals relu(bias)
    sup = [rand(8, 3, 3, seed=10), rand(8, 3, 3, seed=11)]
    emb = embed_support(sup, p)
    fc = rand(8, 3, 3, seed=12)
    w = attention_weights(fc, emb, p).data
    np.testing.assert_allclose(w, 1.0 / 18, atol=1e-15)
    mean_v = emb.values.data.mean(axis=(0, 2, 3))
    expected = p.output_transform.weight.data @ np.maximum(mean_v, 0) + p.output_transform.bias.data
    out = temporal_attention(fc, emb, p).data
    assert np.max(np.abs(out - expected[:, None, None])) < 1e-12


def test_attention_columns_sum_to_one():
    p = dense(8, seed=13)
    w = attention_weights(rand(8, 3, 4, seed=1), embed_support([rand(8, 3, 4, seed=2)] * 3, p), p).data
    assert w.shape == (36, 12)
    assert np.max(np.abs(w.sum(axis=0) - 1)) < 1e-12


def test_temporal_permutation_invariant():
    p = dense(8, seed=14)
    sup = [rand(8, 3, 3, seed=s) for s in range(3)]
    fc = rand(8, 3, 3, seed=9)
    ref = temporal_attention(fc, embed_support(sup, p), p).data
    for perm in itertools.permutations(range(3)):
        out = temporal_attention(fc, embed_support([sup[i] for i in perm], p), p).data
        assert np.max(np.abs(out - ref)) < 1e-12


def test_temporal_smaller_current_map():
    p = dense(8)
    out = temporal_attention(rand(8, 2, 2), embed_support([rand(8, 5, 5, seed=1)], p), p)
    assert out.shape == (8, 2, 2)


def test_channel_attention_constant_context():
    p = dense(8, seed=15, reduction=2)
    v = np.random.default_rng(0).normal(size=8)
    x = Tensor(np.broadcast_to(v[:, None, None], (8, 3, 3)).copy())
    out = channel_attention(x, p).data
    h = np.maximum(p.channel_transform_1.weight.data @ v + p.channel_transform_1.bias.data, 0)
    t = p.channel_transform_2.weight.data @ h + p.channel_transform_2.bias.data
    assert np.max(np.abs(out - t[:, None, None])) < 1e-12


def test_channel_attention_loop_oracle():
    p = dense(4, seed=16, reduction=2)
    f = np.random.default_rng(1).normal(size=(4, 3, 3))
    logits = np.array([[p.channel_attn_proj.weight.data[0] @ f[:, y, x] + p.channel_attn_proj.bias.data[0]
                        for x in range(3)] for y in range(3)])
    a = np.exp(logits - logits.max())
    a /= a.sum()
    z = np.array([sum(f[c, y, x] * a[y, x] for y in range(3) for x in range(3)) for c in range(4)])
    h = np.maximum(p.channel_transform_1.weight.data @ z + p.channel_transform_1.bias.data, 0)
    t = p.channel_transform_2.weight.data @ h + p.channel_transform_2.bias.data
    out = channel_attention(Tensor(f), p).data
    assert np.max(np.abs(out - t[:, None, None])) < 1e-12


def test_channel_attention_zeroed_transform():
    p = dense(8)
    p.channel_transform_2.zero_()
    assert not channel_attention(rand(8, 3, 3), p).data.any()


def test_dual_identity_at_init():
    p = AttentionParams.init(8, seed=3)
    x = rand(8, 4, 5, seed=4)
    out = dual_attention(x, [rand(8, 4, 5, seed=5), rand(8, 4, 5, seed=6)], p)
    assert np.max(np.abs(out.data - x.data)) == 0.0


def test_dual_is_branch_sum():
    p = dense(8, seed=17)
    x, sup = rand(8, 3, 3, seed=1), [rand(8, 3, 3, seed=2)]
    out = dual_attention(x, sup, p).data
    expected = temporal_attention(x, embed_support(sup, p), p).data + channel_attention(x, p).data + x.data
    assert np.max(np.abs(out - expected)) < 1e-12
    p.output_transform.zero_()
    out = dual_attention(x, sup, p).data
    np.testing.assert_array_equal(out, channel_attention(x, p).data + x.data)


def test_object_attention_per_proposal():
    p = dense(8, seed=18)
    props = rand(3, 8, 2, 2, seed=1)
    sup = [rand(8, 6, 6, seed=2), rand(8, 6, 6, seed=3)]
    out = object_dual_attention(props, sup, p)
    assert out.shape == (3, 8, 2, 2)
    for k in range(3):
        alone = dual_attention(Tensor(props.data[k]), sup, p).data
        assert np.max(np.abs(out.data[k] - alone)) < 1e-12


def test_object_attention_identity_and_empty():
    p = AttentionParams.init(8)
    props = rand(2, 8, 3, 3)
    np.testing.assert_array_equal(object_dual_attention(props, [rand(8, 5, 5)], p).data, props.data)
    assert object_dual_attention(Tensor(np.zeros((0, 8, 3, 3))), [rand(8, 5, 5)], p).shape == (0, 8, 3, 3)
    with pytest.raises(ContractError):
        object_dual_attention(rand(2, 4, 3, 3), [rand(8, 5, 5)], p)


def test_attention_gradients_all_parameters():
    p = dense(4, seed=19, reduction=2)
    x = rand(4, 2, 2, seed=1)
    s = rand(4, 2, 2, seed=2)
    w = np.random.default_rng(3).normal(size=(4, 2, 2))
    params = p.parameters()

    def f(x, s, *_):
        return tsum(mul(dual_attention(x, [s], p), w))

    assert grad_check(f, [x, s, *params], eps=1e-5) < 1e-6
