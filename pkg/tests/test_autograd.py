import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mscnet import autograd as ag
from mscnet.autograd import Tensor, backward, grad_check, no_grad
from mscnet.autograd.nn import Parameter
from mscnet.errors import NumericError, ShapeError, UsageError


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rand(*shape, seed=0, grad=False):
    return t64(np.random.default_rng(seed).uniform(-1.0, 1.0, shape), grad)


# -- elementwise -------------------------------------------------------------


def test_sub_self_is_zero():
    x = rand(3, 4)
    assert np.array_equal(ag.sub(x, x).data, np.zeros((3, 4)))


def test_sigmoid_zero_is_exactly_half():
    assert ag.sigmoid(t64([0.0])).data[0] == 0.5
    assert ag.sigmoid(Tensor(np.zeros(3, np.float32))).data.tolist() == [0.5] * 3


def test_abs_of_difference():
    out = ag.tabs(ag.sub(t64([1, 4]), t64([3, 1])))
    assert out.data.tolist() == [2.0, 3.0]


def test_abs_subgradient_zero_at_zero():
    x = t64([-1.0, 0.0, 2.0], grad=True)
    backward(ag.tsum(ag.tabs(x)))
    assert x.grad.tolist() == [-1.0, 0.0, 1.0]


def test_elementwise_dispatch():
    a, b = t64([1.0, -2.0]), t64([3.0, 4.0])
    assert ag.elementwise("add", a, b).data.tolist() == [4.0, 2.0]
    assert ag.elementwise("mul", a, b).data.tolist() == [3.0, -8.0]
    assert ag.elementwise("relu", a).data.tolist() == [1.0, 0.0]
    assert ag.elementwise("scale", a, 2).data.tolist() == [2.0, -4.0]
    assert float(ag.elementwise("mean", a).data) == -0.5
    with pytest.raises(UsageError):
        ag.elementwise("pow", a, b)


def test_channel_vector_broadcast_and_gradient():
    x = rand(2, 3, 4, 4)
    v = rand(1, 3, 1, 1, seed=1)
    out = x * v
    assert out.shape == (2, 3, 4, 4)
    assert grad_check(lambda a, b: ag.tsum(a * b), [x, v]) < 1e-6


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        ag.add(rand(2, 3), rand(3, 2))


# -- matmul -------------------------------------------------------------------


def test_matmul_identity_and_hand_case():
    b = rand(3, 5)
    assert np.array_equal(ag.matmul(t64(np.eye(3)), b).data, b.data)
    out = ag.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_gradient_with_ones():
    a = rand(3, 4, grad=True)
    ones = t64(np.ones((4, 2)))
    backward(ag.tsum(ag.matmul(a, ones)))
    assert np.array_equal(a.grad, np.full((3, 4), 2.0))
    assert grad_check(lambda x: ag.tsum(ag.matmul(x, ones)), rand(3, 4)) < 1e-9


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        ag.matmul(rand(2, 3), rand(4, 2))


def test_batched_matmul_broadcasts_leading_axis():
    a, b = rand(2, 3, 4), rand(4, 5, seed=1)
    assert np.allclose(ag.matmul(a, b).data, a.data @ b.data)


# -- conv ---------------------------------------------------------------------


def _conv_oracle(x, w, b, stride, pad, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    opg = o // groups
    for ni in range(n):
        for oc in range(o):
            g = oc // opg
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for p in range(kh):
                            for q in range(kw):
                                acc += xp[ni, g * cg + ci, i * stride + p, j * stride + q] * w[oc, ci, p, q]
                    out[ni, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("cout,cin,k,stride,pad,groups", [
    (3, 4, 3, 1, 1, 1), (3, 4, 3, 2, 1, 1), (5, 4, 1, 1, 0, 1), (4, 4, 3, 1, 1, 4), (6, 4, 3, 2, 1, 2),
])
def test_conv_matches_direct_summation(cout, cin, k, stride, pad, groups):
    x = rand(2, cin, 7, 6).data
    w = rand(cout, cin // groups, k, k, seed=1).data
    b = rand(cout, seed=2).data
    out = ag.conv2d(t64(x), t64(w), t64(b), stride, pad, groups).data
    assert np.allclose(out, _conv_oracle(x, w, b, stride, pad, groups), atol=1e-12)


def test_conv_identity_1x1():
    x = rand(1, 2, 4, 4)
    w = t64(np.eye(2).reshape(2, 2, 1, 1))
    assert np.array_equal(ag.conv2d(x, w).data, x.data)


def test_conv_all_ones_kernel_on_constant():
    out = ag.conv2d(t64(np.ones((1, 1, 5, 5))), t64(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[2, 2] == 9.0 and out[0, 0] == 4.0 and out[0, 2] == 6.0 and out[2, 0] == 6.0
    assert out[4, 4] == 4.0


def test_depthwise_shape():
    out = ag.conv2d(rand(1, 4, 8, 8), rand(4, 1, 3, 3), padding=1, groups=4)
    assert out.shape == (1, 4, 8, 8)


def test_conv_group_errors():
    with pytest.raises(ShapeError):
        ag.conv2d(rand(1, 4, 5, 5), rand(3, 2, 3, 3), groups=3)
    with pytest.raises(ShapeError):
        ag.conv2d(rand(1, 4, 2, 2), rand(3, 4, 5, 5))


def test_conv_weight_gradcheck():
    x = rand(1, 2, 5, 5)
    assert grad_check(lambda w: ag.tsum(ag.conv2d(x, w, padding=1)), rand(3, 2, 3, 3, seed=3)) < 1e-5


# -- pooling ------------------------------------------------------------------


def test_pool_hand_cases():
    x = t64([[[[1, 2], [3, 4]]]])
    assert ag.pool2d("max", x, 2).data.item() == 4.0
    assert ag.pool2d("avg", x, 2).data.item() == 2.5
    c = t64(np.full((2, 3, 5, 5), 1.75))
    assert np.array_equal(ag.global_avg(c).data, np.full((2, 3, 1, 1), 1.75))


def test_max_pool_ties_route_to_first():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    backward(ag.tsum(ag.max_pool2d(x, 2, 2)))
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_avg_pool_gradient_uniform():
    x = rand(1, 1, 4, 4, grad=True)
    backward(ag.tsum(ag.avg_pool2d(x, 2, 2)))
    assert np.array_equal(x.grad, np.full((1, 1, 4, 4), 0.25))


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        ag.max_pool2d(rand(1, 1, 2, 2), 3)


def test_adaptive_pool_bins_match_manual():
    x = rand(1, 2, 7, 5)
    out = ag.adaptive_pool2d("avg", x, 3).data
    for i in range(3):
        for j in range(3):
            r0, r1 = (i * 7) // 3, -((-(i + 1) * 7) // 3)
            c0, c1 = (j * 5) // 3, -((-(j + 1) * 5) // 3)
            assert np.allclose(out[0, :, i, j], x.data[0, :, r0:r1, c0:c1].mean(axis=(1, 2)))


# -- resize -------------------------------------------------------------------


def test_resize_same_size_bit_identical():
    x = rand(2, 3, 5, 7)
    assert np.array_equal(ag.resize_bilinear(x, 5, 7).data, x.data)


def test_resize_1d_half_pixel_oracle():
    x = t64(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    out = ag.resize_bilinear(x, 1, 4).data.ravel()
    assert np.allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def _interp_oracle(n_in, n_out):
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        f = src - lo
        m[o, lo] += 1 - f
        m[o, hi] += f
    return m


@pytest.mark.parametrize("hin,win,hout,wout", [(4, 4, 9, 3), (8, 8, 2, 2), (3, 5, 3, 11)])
def test_resize_matches_interpolation_formula(hin, win, hout, wout):
    x = rand(1, 2, hin, win)
    expect = np.einsum("oh,nchw,pw->ncop", _interp_oracle(hin, hout), x.data, _interp_oracle(win, wout))
    assert np.allclose(ag.resize_bilinear(x, hout, wout).data, expect, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 12), st.integers(1, 12), st.floats(-5, 5))
def test_resize_preserves_constants(h, w, oh, ow, c):
    x = t64(np.full((1, 2, h, w), c))
    assert np.allclose(ag.resize_bilinear(x, oh, ow).data, c, atol=1e-12)


# -- softmax ------------------------------------------------------------------


def test_softmax_closed_forms():
    assert np.allclose(ag.softmax(t64(np.zeros(4))).data, 0.25)
    assert np.allclose(ag.softmax(t64([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        ag.softmax(t64([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                  elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_stochastic_and_shift_invariant(x, shift):
    p = ag.softmax(t64(x)).data
    assert (p >= 0).all()
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    assert np.allclose(ag.softmax(t64(x + shift)).data, p, atol=1e-9)


# -- batch norm ---------------------------------------------------------------


def _bn_params(c):
    return (Parameter(np.ones(c), "bn_gamma"), Parameter(np.zeros(c), "bn_beta"),
            Parameter(np.zeros(c), "bn_running_mean", requires_grad=False),
            Parameter(np.ones(c), "bn_running_var", requires_grad=False))


def test_batchnorm_zero_variance_channel_gives_beta():
    g, b, rm, rv = _bn_params(2)
    b.data = np.array([0.3, -0.7])
    x = rand(4, 2, 3, 3)
    x.data[:, 1] = 5.0
    out = ag.batch_norm(x, g, b, rm, rv, training=True).data
    assert np.allclose(out[:, 1], -0.7)


def test_batchnorm_running_stats_update():
    g, b, rm, rv = _bn_params(1)
    x = rand(2, 1, 2, 2)
    ag.batch_norm(x, g, b, rm, rv, training=True)
    assert np.isclose(rm.data[0], 0.1 * x.data.mean())
    assert np.isclose(rv.data[0], 0.9 + 0.1 * x.data.var(ddof=1))


def test_batchnorm_eval_identity_and_deterministic():
    g, b, rm, rv = _bn_params(3)
    x = rand(2, 3, 4, 4)
    out1 = ag.batch_norm(x, g, b, rm, rv, training=False, eps=0.0).data
    out2 = ag.batch_norm(x, g, b, rm, rv, training=False, eps=0.0).data
    assert np.array_equal(out1, x.data) and np.array_equal(out1, out2)
    assert rm.data.tolist() == [0, 0, 0]


def test_batchnorm_channel_mismatch():
    g, b, rm, rv = _bn_params(2)
    with pytest.raises(ShapeError):
        ag.batch_norm(rand(1, 3, 2, 2), g, b, rm, rv, training=True)


# -- backward -----------------------------------------------------------------


def test_backward_examples():
    p = t64(np.zeros((2, 3)), grad=True)
    backward(ag.tsum(p))
    assert np.array_equal(p.grad, np.ones((2, 3)))
    q = t64([1.0, 2.0], grad=True)
    backward(ag.tsum(q * q))
    assert q.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_and_zero_grads():
    q = t64([1.0, 2.0], grad=True)
    backward(ag.tsum(q * q))
    backward(ag.tsum(q * q))
    assert q.grad.tolist() == [4.0, 8.0]
    ag.zero_grads([q])
    assert q.grad.tolist() == [0.0, 0.0]


def test_disconnected_parameter_has_zero_gradient():
    p = Parameter(np.ones(3))
    p.name = "loose"
    used = Parameter(np.ones(3))
    used.name = "used"
    grads = backward(ag.tsum(used * 2.0))
    assert "loose" not in grads and p.grad is None
    assert grads["used"].tolist() == [2.0, 2.0, 2.0]


def test_backward_non_scalar_usage_error():
    with pytest.raises(UsageError):
        backward(rand(2, 2, grad=True) * 1.0)


def test_no_grad_records_nothing():
    x = rand(3, grad=True)
    with no_grad():
        y = ag.relu(x)
    assert not y.requires_grad


def test_ops_do_not_mutate_inputs():
    x = rand(2, 4, 6, 6)
    w = rand(3, 4, 3, 3, seed=1)
    before = x.data.copy(), w.data.copy()
    ag.conv2d(x, w, padding=1)
    ag.resize_bilinear(x, 3, 9)
    ag.softmax(x, axis=1)
    ag.adaptive_pool2d("max", x, 4)
    assert np.array_equal(x.data, before[0]) and np.array_equal(w.data, before[1])


# -- grad_check ---------------------------------------------------------------


def test_grad_check_examples():
    assert grad_check(lambda x: ag.tsum(ag.sigmoid(x)), rand(4, 3)) < 1e-6
    assert grad_check(lambda x: ag.tsum(ag.scale(x, 3.0)), rand(5)) < 1e-9


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        out = ag.tsum(x * x)
        inner = out._backward
        out._backward = lambda g: tuple(2.0 * v for v in inner(g))
        return out

    assert grad_check(bad, rand(3)) > 0.4


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_grad_check_requires_float64_and_finite():
    with pytest.raises(UsageError):
        grad_check(lambda x: ag.tsum(x), Tensor(np.ones(2, np.float32)))
    with pytest.raises(NumericError):
        grad_check(lambda x: ag.tsum(ag.tlog(x)), t64([-1.0, 1.0]))


def test_grad_check_noise_aware_floor():
    # f is dominated by a large constant so the quotient only resolves ~1e-7
    big = t64([1e8])

    def f(x):
        return ag.tsum(x * 1e-9) + big

    x = rand(3)
    assert grad_check(f, x, eps=1e-6, floor=None) < 1e-3


@pytest.mark.parametrize("op", [
    lambda x: ag.tsum(ag.texp(x)),
    lambda x: ag.tsum(ag.transpose(ag.reshape(x, (3, 4)), (1, 0)) * t64(np.arange(12.0).reshape(4, 3))),
    lambda x: ag.tsum(ag.softmax(x, axis=0) * t64(np.arange(12.0).reshape(2, 6))),
    lambda x: ag.tsum(ag.concat([x, x * 2.0], axis=1) * t64(np.arange(24.0).reshape(2, 12))),
    lambda x: ag.mean(ag.sigmoid(x) / (1.5 + x)),
])
def test_small_op_gradchecks(op):
    assert grad_check(op, rand(2, 6, seed=4)) < 1e-4
