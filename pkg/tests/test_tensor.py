import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from visagg.tensor import (
    ContractError,
    OpParams,
    Tensor,
    conv1x1,
    depthwise_xcorr,
    grad_check,
    mean,
    mul,
    roi_align,
    softmax_axis,
    tsum,
)


def params(W, b):
    return OpParams(Tensor(np.asarray(W, float)), Tensor(np.asarray(b, float)))


# conv1x1


def test_conv1x1_scalar_affine():
    out = conv1x1(Tensor([[[2.0]]]), params([[3.0]], [1.0]))
    assert out.data.tolist() == [[[7.0]]]


def test_conv1x1_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    out = conv1x1(Tensor(x), params(np.eye(2), np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


def test_conv1x1_matches_per_pixel_matvec():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 2))
    W, b = rng.normal(size=(2, 3)), rng.normal(size=2)
    expected = np.zeros((2, 2, 2))
    for y in range(2):
        for xx in range(2):
            expected[:, y, xx] = W @ x[:, y, xx] + b
    out = conv1x1(Tensor(x), params(W, b))
    assert np.max(np.abs(out.data - expected)) < 1e-12


def test_conv1x1_shape_mismatch_names_dimension():
    with pytest.raises(ContractError, match="Cin"):
        conv1x1(Tensor(np.zeros((3, 2, 2))), params(np.zeros((2, 4)), np.zeros(2)))


def test_opparams_rejects_inconsistent_bias():
    with pytest.raises(ContractError):
        params(np.zeros((2, 3)), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_conv1x1_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    p = params(rng.normal(size=(3, 2)), np.zeros(3))
    x, y = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    lhs = conv1x1(Tensor(a * x + b * y), p).data
    rhs = a * conv1x1(Tensor(x), p).data + b * conv1x1(Tensor(y), p).data
    assert np.max(np.abs(lhs - rhs)) < 1e-12 * max(1.0, np.abs(lhs).max())


# softmax


def test_softmax_symmetric_and_analytic():
    np.testing.assert_allclose(softmax_axis(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(softmax_axis(Tensor([0.0, np.log(3.0)]), 0).data, [0.25, 0.75],
                               atol=1e-15)


def test_softmax_matches_direct_formula():
    x = np.random.default_rng(2).normal(size=5)
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(softmax_axis(Tensor(x), 0).data - direct)) < 1e-14


def test_softmax_bad_axis():
    with pytest.raises(ContractError):
        softmax_axis(Tensor(np.zeros(3)), 1)
    with pytest.raises(ContractError):
        softmax_axis(Tensor(np.zeros((2, 0))), 1)


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), c=st.floats(-20, 20),
       axis=st.sampled_from([0, 1]))
def test_softmax_sums_to_one_and_shift_invariant(x, c, axis):
    s = softmax_axis(Tensor(x), axis).data
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(axis=axis) - 1.0)) < 1e-12
    shifted = softmax_axis(Tensor(x + c), axis).data
    assert np.max(np.abs(shifted - s)) < 1e-12


# depthwise correlation


def brute_xcorr(t, s, pad):
    C, h, w = t.shape
    _, H, W = s.shape
    if pad:
        top, left = h // 2, w // 2
        sp = np.zeros((C, H + h - 1, W + w - 1))
        sp[:, top:top + H, left:left + W] = s
    else:
        sp = s
    Ho, Wo = sp.shape[1] - h + 1, sp.shape[2] - w + 1
    out = np.zeros((C, Ho, Wo))
    for c in range(C):
        for y in range(Ho):
            for x in range(Wo):
                acc = 0.0
                for i in range(h):
                    for j in range(w):
                        acc += t[c, i, j] * sp[c, y + i, x + j]
                out[c, y, x] = acc
    return out


def test_xcorr_sum_of_entries():
    out = depthwise_xcorr(Tensor(np.ones((1, 2, 2))), Tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    assert out.data.tolist() == [[[10.0]]]


def test_xcorr_self_correlation():
    x = np.random.default_rng(3).normal(size=(3, 4, 4))
    out = depthwise_xcorr(Tensor(x), Tensor(x))
    np.testing.assert_allclose(out.data[:, 0, 0], (x ** 2).sum(axis=(1, 2)), rtol=1e-14)


@pytest.mark.parametrize("pad", [False, True])
def test_xcorr_matches_sliding_window(pad):
    rng = np.random.default_rng(4)
    t, s = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 5, 5))
    out = depthwise_xcorr(Tensor(t), Tensor(s), pad=pad).data
    assert out.shape == ((2, 5, 5) if pad else (2, 3, 3))
    assert np.max(np.abs(out - brute_xcorr(t, s, pad))) < 1e-12


def test_xcorr_even_template_padding_keeps_extent():
    rng = np.random.default_rng(5)
    t, s = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 5, 6))
    out = depthwise_xcorr(Tensor(t), Tensor(s), pad=True).data
    assert out.shape == (1, 5, 6)
    assert np.max(np.abs(out - brute_xcorr(t, s, True))) < 1e-12


def test_xcorr_channel_mismatch():
    with pytest.raises(ContractError, match="channel"):
        depthwise_xcorr(Tensor(np.zeros((2, 2, 2))), Tensor(np.zeros((3, 4, 4))))


def test_xcorr_offset_zero_is_overlap_dot():
    rng = np.random.default_rng(6)
    t, s = rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 4, 5))
    out = depthwise_xcorr(Tensor(t), Tensor(s)).data
    assert abs(out[:, 0, 0].sum() - (t * s[:, :2, :3]).sum()) < 1e-12


# roi align


def test_roi_align_constant_field():
    f = Tensor(np.full((2, 6, 8), 3.5))
    for box in [(0, 0, 8, 6), (1.3, 0.2, 2.7, 4.1), (0.0, 0.0, 0.4, 0.3), (7.5, 5.5, 0.5, 0.5)]:
        out = roi_align(f, box, 3, 4)
        np.testing.assert_allclose(out.data, 3.5, rtol=0, atol=1e-14)


def test_roi_align_single_pixel():
    out = roi_align(Tensor([[[7.0]]]), (0, 0, 1, 1), 1, 1, samples_per_bin=1)
    assert out.data.item() == 7.0


def test_roi_align_center_sample_is_corner_mean():
    out = roi_align(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), (0, 0, 2, 2), 1, 1, samples_per_bin=1)
    assert abs(out.data.item() - 2.5) < 1e-15


def test_roi_align_matches_pointwise_bilinear():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(2, 5, 6))
    box, oh, ow, S = (0.7, 1.1, 3.9, 2.6), 2, 3, 2

    def bilinear(c, px, py):
        u, v = min(max(px - 0.5, 0), 5), min(max(py - 0.5, 0), 4)
        x0, y0 = int(np.floor(u)), int(np.floor(v))
        x1, y1 = min(x0 + 1, 5), min(y0 + 1, 4)
        a, b = u - x0, v - y0
        return ((1 - a) * (1 - b) * f[c, y0, x0] + a * (1 - b) * f[c, y0, x1]
                + (1 - a) * b * f[c, y1, x0] + a * b * f[c, y1, x1])

    expected = np.zeros((2, oh, ow))
    for c in range(2):
        for i in range(oh):
            for j in range(ow):
                vals = [bilinear(c, box[0] + box[2] / ow * (j + (sx + 0.5) / S),
                                 box[1] + box[3] / oh * (i + (sy + 0.5) / S))
                        for sy in range(S) for sx in range(S)]
                expected[c, i, j] = np.mean(vals)
    out = roi_align(Tensor(f), box, oh, ow, S).data
    assert np.max(np.abs(out - expected)) < 1e-12


def test_roi_align_outside_reads_zero():
    f = Tensor(np.ones((1, 4, 4)))
    out = roi_align(f, (-4.0, 0.0, 4.0, 4.0), 1, 2, samples_per_bin=1)
    assert out.data.tolist() == [[[0.0, 0.0]]]


def test_roi_align_rejects_empty_output():
    with pytest.raises(ContractError):
        roi_align(Tensor(np.ones((1, 2, 2))), (0, 0, 1, 1), 0, 2)


# gradient checks


def test_grad_check_linear_exact():
    rng = np.random.default_rng(8)
    W, x = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4))
    assert grad_check(lambda W, x: tsum(W @ x), [W, x], eps=1e-5) <= 1e-10


def test_grad_check_softmax():
    x = Tensor(np.random.default_rng(9).normal(size=6))
    w = np.random.default_rng(10).normal(size=6)
    assert grad_check(lambda x: tsum(mul(softmax_axis(x, 0), w)), [x], eps=1e-5) < 1e-6


def test_grad_check_xcorr():
    rng = np.random.default_rng(11)
    t, s = Tensor(rng.normal(size=(2, 2, 3))), Tensor(rng.normal(size=(2, 4, 4)))
    w = rng.normal(size=(2, 4, 4))
    for pad in (False, True):
        def f(t, s):
            out = depthwise_xcorr(t, s, pad=pad)
            return tsum(mul(out, w[:, :out.shape[1], :out.shape[2]]))
        assert grad_check(f, [t, s], eps=1e-5) < 1e-6


def test_grad_check_conv_and_roi():
    rng = np.random.default_rng(12)
    x = Tensor(rng.normal(size=(3, 4, 5)))
    p = OpParams(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=2)))
    w = rng.normal(size=(2, 3, 2))
    f = lambda x, W, b: tsum(mul(roi_align(conv1x1(x, OpParams(W, b)), (0.3, 0.6, 4.1, 3.2), 3, 2), w))
    assert grad_check(f, [x, p.weight, p.bias], eps=1e-5) < 1e-6


def test_grad_check_rejects_vector_output():
    with pytest.raises(ContractError):
        grad_check(lambda x: x, [Tensor(np.ones(3))])


def test_grad_check_detects_wrong_backward():
    from visagg.tensor import _make

    def bad_square(x):
        return _make(x.data ** 2, (x,), lambda g: x._accumulate(g * x.data))

    x = Tensor(np.array([1.0, 2.0, -1.5]))
    assert grad_check(lambda x: tsum(bad_square(x)), [x]) > 0.1


def test_backward_accumulates_shared_subgraph():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = mul(x, x)
    tsum(y + y).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_mean_gradient():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))
