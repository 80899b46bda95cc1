import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracbam.autodiff import GraphConsumedError, Tensor, grad_check, no_grad, ops

from oracles import conv2d_direct, matmul_loops


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- tensor basics ----------------------------------------------------------

def test_tensor_rejects_nonpositive_extent():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 0)))


def test_uint8_cannot_require_grad():
    with pytest.raises(TypeError):
        Tensor(np.zeros(3, dtype=np.uint8), requires_grad=True)


def test_grad_matches_shape_and_is_float():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    ops.sum(ops.mul(x, x)).backward()
    assert x.grad.shape == x.shape
    assert x.grad.dtype == np.float32


# -- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 1, 4, 4))
    y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x)


def test_dilated_receptive_extent():
    # a 9-wide input is the smallest a 3-tap kernel with dilation 4 accepts
    k = Tensor(np.ones((1, 1, 3, 3)))
    assert ops.conv2d(Tensor(np.ones((1, 1, 9, 9))), k, dilation=4).shape == (1, 1, 1, 1)
    with pytest.raises(ValueError, match="non-positive"):
        ops.conv2d(Tensor(np.ones((1, 1, 8, 8))), k, dilation=4)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    np.testing.assert_allclose(got, conv2d_direct(x, k, b, 2, 1), atol=1e-6)


def test_conv_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 5, 5\).*\(1, 3, 3, 3\)"):
        ops.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3),
    k=st.integers(1, 3), stride=st.integers(1, 3), padding=st.integers(0, 2),
    dilation=st.integers(1, 3), size=st.integers(5, 9), seed=st.integers(0, 2**31),
)
def test_conv_property_vs_direct(n, c, o, k, stride, padding, dilation, size, seed):
    if (size + 2 * padding - dilation * (k - 1) - 1) < 0:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, size, size))
    w = rng.standard_normal((o, c, k, k))
    got = ops.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding,
                     dilation=dilation).data
    np.testing.assert_allclose(got, conv2d_direct(x, w, None, stride, padding, dilation),
                               atol=1e-6)


def test_conv_gradcheck_dilation4():
    rng = np.random.default_rng(3)
    x, k, b = rand(rng, 2, 2, 10, 10), rand(rng, 3, 2, 3, 3), rand(rng, 3)
    err = grad_check(lambda x, k, b: ops.conv2d(x, k, b, padding=4, dilation=4), [x, k, b])
    assert err < 1e-5


def test_conv_gradcheck_strided():
    rng = np.random.default_rng(4)
    x, k = rand(rng, 2, 3, 7, 7), rand(rng, 2, 3, 3, 3)
    assert grad_check(lambda x, k: ops.conv2d(x, k, stride=2, padding=1), [x, k]) < 1e-6


# -- batch norm -------------------------------------------------------------

def _bn_buffers(c):
    return np.zeros(c), np.ones(c)


def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    rm, rv = _bn_buffers(3)
    y = ops.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-5)
    assert not np.allclose(rm, 0)


def test_batch_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(6)
    beta = np.array([0.5, -1.0])
    rm, rv = _bn_buffers(2)
    y = ops.batch_norm(rand(rng, 3, 2, 4, 4), Tensor(np.zeros(2)), Tensor(beta), rm, rv, True)
    np.testing.assert_array_equal(y.data, np.broadcast_to(beta[None, :, None, None], y.shape))


def test_batch_norm_eval_uses_initial_stats():
    x = np.random.default_rng(7).standard_normal((2, 3))
    rm, rv = _bn_buffers(3)
    y = ops.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, False)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5))


def test_batch_norm_constant_channel_is_finite():
    rm, rv = _bn_buffers(1)
    y = ops.batch_norm(Tensor(np.full((4, 1, 2, 2), 3.0)), Tensor(np.ones(1)),
                       Tensor(np.zeros(1)), rm, rv, True)
    np.testing.assert_array_equal(y.data, 0.0)


@pytest.mark.parametrize("shape", [(4, 3, 3, 3), (5, 4)])
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradcheck(shape, training):
    rng = np.random.default_rng(8)
    c = shape[1]
    x, g, b = rand(rng, *shape), Tensor(rng.uniform(0.5, 1.5, c)), rand(rng, c)
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)

    def fn(x, g, b):
        return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training)

    assert grad_check(fn, [x, g, b]) < 1e-4


# -- pooling ----------------------------------------------------------------

def test_global_avg_of_constant():
    y = ops.pool(Tensor(np.full((2, 3, 4, 5), 2.5)), "global_avg")
    assert y.shape == (2, 3, 1, 1)
    np.testing.assert_array_equal(y.data, 2.5)


def test_max_pool_single_window():
    y = ops.pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "max", 2, 2)
    np.testing.assert_array_equal(y.data, [[[[4.0]]]])


def test_max_pool_window_too_large():
    with pytest.raises(ValueError):
        ops.pool(Tensor(np.ones((1, 1, 2, 2))), "max", 3, 1)


def test_max_pool_tie_goes_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ops.sum(ops.max_pool2d(x, 2)).backward()
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


@pytest.mark.parametrize("window,stride,padding", [(2, 2, 0), (3, 1, 1), (3, 2, 0)])
def test_max_pool_gradcheck(window, stride, padding):
    x = rand(np.random.default_rng(9), 2, 2, 6, 6)
    assert grad_check(lambda x: ops.max_pool2d(x, window, stride, padding), x) < 1e-4


def test_global_avg_gradcheck():
    x = rand(np.random.default_rng(10), 2, 3, 4, 4)
    assert grad_check(ops.global_avg_pool, x) < 1e-6


# -- dense / activations / loss ---------------------------------------------

def test_dense_identity_and_zero_input():
    x = np.random.default_rng(11).standard_normal((3, 4))
    np.testing.assert_array_equal(
        ops.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.arange(4.0)
    np.testing.assert_array_equal(
        ops.dense(Tensor(np.zeros((3, 4))), Tensor(np.eye(4)), Tensor(b)).data,
        np.broadcast_to(b, (3, 4)))


def test_dense_matches_loops():
    rng = np.random.default_rng(12)
    a, w = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
    got = ops.dense(Tensor(a), Tensor(w), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(got, matmul_loops(a, w), atol=1e-6)


def test_dense_extent_mismatch():
    with pytest.raises(ValueError):
        ops.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_dense_gradcheck():
    rng = np.random.default_rng(13)
    x, w, b = rand(rng, 3, 5), rand(rng, 5, 2), rand(rng, 2)
    assert grad_check(ops.dense, [x, w, b]) < 1e-6


def test_activation_values():
    assert ops.activation(Tensor(0.0), "sigmoid").item() == 0.5
    np.testing.assert_array_equal(ops.activation(Tensor([-3.0, 3.0]), "relu").data, [0, 3])


def test_relu_gradient_at_zero_is_zero():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    ops.sum(ops.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_sigmoid_gradcheck_and_range():
    x = rand(np.random.default_rng(14), 4, 5)
    assert grad_check(ops.sigmoid, x) < 1e-6
    s = ops.sigmoid(Tensor(np.array([-30.0, 30.0]))).data
    assert np.all((s > 0) & (s < 1))


def test_cross_entropy_uniform_is_ln2():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, 2))), np.array([[1, 0]] * 3))
    assert math.isclose(loss.item(), math.log(2), rel_tol=1e-12)


def test_cross_entropy_saturates():
    loss = ops.softmax_cross_entropy(Tensor(np.array([[50.0, 0.0]])), np.array([[1, 0]]))
    assert loss.item() < 1e-10


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(15)
    z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    t = np.eye(3)[rng.integers(0, 3, 4)]
    ops.softmax_cross_entropy(z, t).backward()
    np.testing.assert_allclose(z.grad, (ops.softmax_np(z.data) - t) / 4, atol=1e-15)
    assert grad_check(lambda z: ops.softmax_cross_entropy(z, t), Tensor(z.data.copy())) < 1e-5


def test_cross_entropy_rejects_bad_one_hot():
    with pytest.raises(ValueError, match="row 1"):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 2))), np.array([[1, 0], [1, 1]]))


def test_softmax_rows_sum_to_one_extreme_logits():
    z = np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4], [3.0, 1e4, 1e4]])
    np.testing.assert_allclose(ops.softmax(Tensor(z)).data.sum(axis=1), 1, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=8))
def test_softmax_normalization_property(row):
    s = ops.softmax_np(np.array([row]))
    assert abs(s.sum() - 1) < 1e-6


def test_concat_gradcheck():
    rng = np.random.default_rng(16)
    a, b = rand(rng, 2, 2, 3, 3), rand(rng, 2, 3, 3, 3)
    assert grad_check(lambda a, b: ops.concat([a, b]), [a, b]) < 1e-8


# -- backward semantics -----------------------------------------------------

def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(17).standard_normal((2, 3, 4)), requires_grad=True)
    ops.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_of_square_sum():
    xv = np.random.default_rng(18).standard_normal(5)
    x = Tensor(xv, requires_grad=True)
    ops.sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2 * xv)


def test_second_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = ops.sum(x)
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ops.mul(x, x).backward()


def test_shared_parameter_sums_paths():
    rng = np.random.default_rng(19)
    wv, a, b = rng.standard_normal((3, 2)), rng.standard_normal((4, 3)), rng.standard_normal((2, 3))

    def path1(w):
        return ops.sum(ops.sigmoid(ops.dense(Tensor(a), w)))

    def path2(w):
        return ops.sum(ops.relu(ops.dense(Tensor(b), w)) * ops.relu(ops.dense(Tensor(b), w)))

    grads = []
    for path in (path1, path2):
        w = Tensor(wv.copy(), requires_grad=True)
        path(w).backward()
        grads.append(w.grad)
    w = Tensor(wv.copy(), requires_grad=True)
    ops.add(path1(w), path2(w)).backward()
    np.testing.assert_allclose(w.grad, grads[0] + grads[1], rtol=1e-12, atol=1e-14)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = ops.mul(x, x)
    assert y.node is None and not y.requires_grad


def test_forward_backward_bit_deterministic():
    rng = np.random.default_rng(20)
    xv, kv = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3))
    runs = []
    for _ in range(2):
        x, k = Tensor(xv, requires_grad=True), Tensor(kv, requires_grad=True)
        y = ops.conv2d(x, k, padding=2, dilation=2)
        ops.sum(ops.sigmoid(y)).backward()
        runs.append((y.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()))
    assert runs[0] == runs[1]


def test_grad_check_identity_is_exact():
    x = rand(np.random.default_rng(21), 3, 4)
    assert grad_check(lambda x: x, x) < 1e-12


def test_grad_check_rejects_float32_and_bad_step():
    with pytest.raises(TypeError):
        grad_check(lambda x: x, Tensor(np.ones(2, dtype=np.float32)))
    with pytest.raises(ValueError):
        grad_check(lambda x: x, Tensor(np.ones(2)), h=1e-2)
