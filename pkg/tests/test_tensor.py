import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secpnet import tensor as T
from secpnet.errors import ConfigurationError, DataError, NumericalError, UsageError
from secpnet.tensor import Parameter, Tensor, grad_check, grad_check_details, no_grad, precision

import oracles
from helpers import OPS, op_instance, param, weighted_sum


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------- conv2d

def test_conv_scalar_kernel_doubles():
    out = T.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.full((1, 1, 1, 1), 2.0)), t64([0.0]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = T.conv2d(t64(x), t64(w), None, 1, 1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(t64(x), t64(w), t64(b))
    assert np.abs(out.data - oracles.conv2d_loops(x, w, b, 1, 0)).max() < 1e-6


def test_conv_is_cross_correlation_not_convolution():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = T.conv2d(t64(x), t64(w), None, 1, 0)
    assert out.data.item() == w[0, 0, 0, 0]


@pytest.mark.parametrize(
    "xshape,wshape,kw",
    [
        ((1, 2, 5, 5), (3, 3, 3, 3), {}),  # channel mismatch
        ((1, 1, 5, 5), (1, 1, 2, 2), {}),  # even kernel
        ((1, 1, 6, 6), (1, 1, 3, 3), {"stride": 2}),  # (6-3)/2 not integral
        ((1, 1, 2, 2), (1, 1, 3, 3), {}),  # kernel larger than input
    ],
)
def test_conv_rejects_bad_shapes(xshape, wshape, kw):
    with pytest.raises(ConfigurationError):
        T.conv2d(t64(np.ones(xshape)), t64(np.ones(wshape)), **kw)


# ---------------------------------------------------------------- pooling / upsampling

def test_pool_constant_and_forced_max():
    c = T.max_pool2x2(t64(np.full((1, 2, 4, 6), 3.5)))
    np.testing.assert_array_equal(c.data, np.full((1, 2, 2, 3), 3.5))
    assert T.max_pool2x2(t64([[[[1, 2], [3, 4]]]])).data.tolist() == [[[[4.0]]]]


def test_pool_matches_scan_oracle():
    x = np.random.default_rng(2).standard_normal((1, 3, 8, 8))
    np.testing.assert_array_equal(T.max_pool2x2(t64(x)).data, oracles.max_pool_scan(x))


def test_pool_tie_routes_gradient_to_first_element():
    x = Parameter(np.ones((1, 1, 2, 2)), dtype=np.float64)
    T.max_pool2x2(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_pool_odd_extent_rejected():
    with pytest.raises(ConfigurationError):
        T.max_pool2x2(t64(np.ones((1, 1, 3, 4))))


def test_upsample_constants_and_single_pixel():
    out = T.upsample_bilinear2x(t64(np.full((2, 3, 3, 5), -1.25)))
    np.testing.assert_allclose(out.data, -1.25, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(T.upsample_bilinear2x(t64([[[[7.0]]]])).data, np.full((1, 1, 2, 2), 7.0))


def test_upsample_matches_formula_oracle():
    x = np.random.default_rng(3).standard_normal((1, 2, 3, 3))
    assert np.abs(T.upsample_bilinear2x(t64(x)).data - oracles.upsample_formula(x)).max() < 1e-12


def test_bilinear_matrix_rows_sum_to_one_and_are_cached():
    m = T.bilinear_matrix(5, 10)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    assert T.bilinear_matrix(5, 10) is m
    assert not m.flags.writeable


# ---------------------------------------------------------------- small ops

def test_small_op_examples():
    np.testing.assert_array_equal(T.relu(t64([-1.0, 2.0])).data, [0.0, 2.0])
    assert T.sigmoid(t64([0.0])).data[0] == 0.5
    np.testing.assert_array_equal(T.global_avg_pool(t64(np.full((2, 3, 4, 5), 1.5))).data, np.full((2, 3), 1.5))
    x = np.random.default_rng(4).standard_normal((3, 4))
    np.testing.assert_array_equal(T.linear(t64(x), t64(np.eye(4)), t64(np.zeros(4))).data, x)


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(t64([-800.0, 800.0])).data
    assert s[0] == 0.0 and s[1] == 1.0


def test_concat_extent_mismatch():
    with pytest.raises(ConfigurationError):
        T.concat_channels(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 4, 5))))
    with pytest.raises(ConfigurationError):
        T.linear(t64(np.ones((2, 3))), t64(np.ones((4, 2))))


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31)
)
def test_concat_then_split_round_trips(n, ca, cb, h, w, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, ca, h, w)), rng.standard_normal((n, cb, h, w))
    ra, rb = T.split_channels(T.concat_channels(t64(a), t64(b)), [ca, cb])
    np.testing.assert_array_equal(ra.data, a)
    np.testing.assert_array_equal(rb.data, b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 2), st.integers(1, 14), st.integers(1, 5), st.floats(0.1, 200.0), st.integers(0, 2**31))
def test_softmax_sums_to_one(n, k, h, scale, seed):
    x = np.random.default_rng(seed).standard_normal((n, k, h, h)) * scale
    for dtype in (np.float32, np.float64):
        p = T.softmax_channels(Tensor(x.astype(dtype))).data
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-6


# ---------------------------------------------------------------- loss

def test_uniform_logits_give_log_k():
    loss = T.softmax_cross_entropy(t64(np.zeros((1, 14, 3, 3))), np.zeros((1, 3, 3), dtype=int))
    assert loss.item() == pytest.approx(math.log(14), abs=1e-12)
    assert round(loss.item(), 4) == 2.6391


def test_confident_true_logit_drives_loss_to_zero():
    logits = np.zeros((1, 3, 1, 1))
    logits[0, 1] = 500.0
    assert T.softmax_cross_entropy(t64(logits), np.ones((1, 1, 1), dtype=int)).item() < 1e-12


def test_cross_entropy_matches_per_pixel_oracle():
    rng = np.random.default_rng(5)
    logits, target = rng.standard_normal((1, 3, 2, 2)), rng.integers(0, 3, size=(1, 2, 2))
    loss = T.softmax_cross_entropy(t64(logits), target).item()
    assert abs(loss - oracles.cross_entropy_per_pixel(logits, target)) < 1e-6


def test_cross_entropy_gradient_formula():
    rng = np.random.default_rng(6)
    logits, target = rng.standard_normal((2, 4, 3, 3)), rng.integers(0, 4, size=(2, 3, 3))
    x = Parameter(logits, dtype=np.float64)
    T.softmax_cross_entropy(x, target).backward()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    onehot = np.moveaxis(np.eye(4)[target], -1, 1)
    np.testing.assert_allclose(x.grad, (p - onehot) / 18, atol=1e-15)


@pytest.mark.parametrize("bad", [-1, 3])
def test_cross_entropy_rejects_out_of_range(bad):
    target = np.zeros((1, 2, 2), dtype=int)
    target[0, 1, 1] = bad
    with pytest.raises(DataError, match=str(bad)):
        T.softmax_cross_entropy(t64(np.zeros((1, 3, 2, 2))), target)


# ---------------------------------------------------------------- autodiff mechanics

def test_gradients_accumulate_over_shared_subgraphs():
    x = Parameter(np.array([3.0]), dtype=np.float64)
    y = x * x + x  # dy/dx = 2x + 1
    y.sum().backward()
    assert x.grad.tolist() == [7.0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        T.mul(t64([1e308]), t64([1e308]))


def test_precision_contexts():
    assert Tensor([1.0]).dtype == np.float32
    with precision("check"):
        assert Tensor([1.0]).dtype == np.float64
    with pytest.raises(ConfigurationError):
        with precision("half"):
            pass


def test_no_grad_records_nothing():
    x = Parameter(np.ones(3), dtype=np.float64)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_zero_extent_tensor_rejected():
    with pytest.raises(ConfigurationError):
        Tensor(np.zeros((0, 3)))


# ---------------------------------------------------------------- grad_check

def test_linear_grad_check_is_essentially_exact():
    fn, params = op_instance("linear", 0)
    assert grad_check(fn, params, eps=1e-5) < 1e-6


def test_conv_relu_loss_composite():
    rng = np.random.default_rng(7)
    x, w, b = param(rng, (2, 2, 6, 6)), param(rng, (3, 2, 3, 3)), param(rng, (3,), 0.1)
    target = rng.integers(0, 3, size=(2, 6, 6))
    fn = lambda: T.softmax_cross_entropy(T.relu(T.conv2d(x, w, b, 1, 1)), target)
    assert grad_check(fn, [x, w, b]) < 1e-4


def test_frozen_parameter_gets_no_gradient():
    rng = np.random.default_rng(8)
    x = param(rng, (2, 3))
    w = Parameter(rng.standard_normal((4, 3)), frozen=True, dtype=np.float64)
    b = param(rng, (4,))
    weighted_sum(T.linear(x, w, b), rng).backward()
    assert w.grad is None
    res = grad_check_details(lambda: weighted_sum(T.linear(x, w, b), np.random.default_rng(0)), [x, w, b])
    assert res.max_rel_error < 1e-6
    assert res.checked == x.data.size + b.data.size


def test_grad_check_restores_parameters():
    fn, params = op_instance("conv2d", 3)
    before = [p.data.copy() for p in params]
    grad_check(fn, params)
    for p, d in zip(params, before):
        np.testing.assert_array_equal(p.data, d)
        assert p.grad is None


def test_grad_check_rejects_non_scalar():
    x = param(np.random.default_rng(0), (2, 2))
    with pytest.raises(UsageError):
        grad_check(lambda: T.relu(x), [x])


def test_grad_check_detects_a_wrong_backward():
    x = param(np.random.default_rng(0), (3,))

    def bad_square():
        return T._result(x.data**2, (x,), lambda g: (g * x.data,), "bad_square").sum()

    assert grad_check(bad_square, [x]) > 0.1


@pytest.mark.parametrize("op", OPS)
def test_op_grad_check_twenty_instances(op):
    worst = max(grad_check(*op_instance(op, seed)) for seed in range(20))
    assert worst < 1e-4
