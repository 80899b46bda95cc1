import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fracbam.attention import (
    BamParams, attention_map, bam_param_count, bam_refine, channel_gate, spatial_gate,
)
from fracbam.autodiff import Tensor, grad_check


def randomized(params, rng):
    """Give every weight (including the zero-started final gammas) random values."""
    for name, t in params.weights.items():
        scale = 0.5 if name.endswith((".beta", ".bias")) else 1.0
        t.data = (rng.standard_normal(t.shape) * scale).astype(t.dtype)
        if name.endswith(".gamma"):
            t.data = rng.uniform(0.5, 1.5, t.shape).astype(t.dtype)
    return params


def f64_params(channels=8, r=4, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return randomized(BamParams.create(channels, r, d, rng, np.float64), rng)


def test_reduction_ratio_must_divide_channels():
    with pytest.raises(ValueError, match="divisible"):
        BamParams.create(24, 16)


def test_param_count_closed_form():
    for c, r in [(16, 16), (32, 16), (64, 8), (12, 3)]:
        assert BamParams.create(c, r).param_count() == bam_param_count(c, r)


def test_channel_gate_shape_and_zero_params():
    params = BamParams.create(32, 16)
    f = Tensor(np.random.default_rng(0).standard_normal((2, 32, 14, 14)).astype(np.float32))
    assert channel_gate(f, params).shape == (2, 32, 1, 1)
    for name, t in params.weights.items():
        if name.startswith("channel.") and not name.endswith(".beta"):
            t.data = np.zeros_like(t.data)
    params.weights["channel.bn.beta"].data[:] = 0.25
    np.testing.assert_array_equal(channel_gate(f, params).data, 0.25)


def test_spatial_gate_shape_and_zero_convs():
    params = BamParams.create(32, 16, 4)
    f = Tensor(np.random.default_rng(1).standard_normal((2, 32, 14, 14)).astype(np.float32))
    assert spatial_gate(f, params).shape == (2, 1, 14, 14)
    for name, t in params.weights.items():
        if name.endswith(".weight"):
            t.data = np.zeros_like(t.data)
    params.weights["spatial.bn.gamma"].data[:] = 1.0
    params.weights["spatial.bn.beta"].data[:] = -0.5
    np.testing.assert_array_equal(spatial_gate(f, params).data, -0.5)


def test_dilated_convs_preserve_extent():
    params = BamParams.create(16, 4, dilation=4)
    f = Tensor(np.ones((1, 16, 5, 7), dtype=np.float32))
    assert spatial_gate(f, params).shape == (1, 1, 5, 7)


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="channels"):
        bam_refine(Tensor(np.ones((1, 8, 4, 4))), BamParams.create(16, 4))


def test_fresh_module_is_one_and_a_half_identity():
    rng = np.random.default_rng(2)
    for _ in range(5):
        params = BamParams.create(16, 4, 2, rng, np.float64)
        f = rng.standard_normal((2, 16, 6, 6)) * 10
        for training in (True, False):
            np.testing.assert_array_equal(bam_refine(Tensor(f), params, training).data, 1.5 * f)


def test_zero_feature_map_maps_to_zero():
    params = f64_params()
    out = bam_refine(Tensor(np.zeros((2, 8, 5, 5))), params)
    np.testing.assert_array_equal(out.data, 0.0)


def test_nonnegative_input_output_between_f_and_2f():
    rng = np.random.default_rng(3)
    params = f64_params(seed=3)
    f = np.abs(rng.standard_normal((3, 8, 6, 6)))
    out = bam_refine(Tensor(f), params).data
    for idx in np.ndindex(f.shape):
        assert f[idx] <= out[idx] <= 2 * f[idx]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 3), hw=st.integers(3, 8),
       magnitude=st.sampled_from([1e-3, 1.0, 1e3]))
def test_attention_map_strictly_inside_unit_interval(seed, n, hw, magnitude):
    rng = np.random.default_rng(seed)
    params = f64_params(seed=seed)
    f = rng.uniform(-magnitude, magnitude, (n, 8, hw, hw))
    m = attention_map(Tensor(f), params).data
    assert m.shape == f.shape
    assert np.all((m > 0) & (m < 1))
    out = bam_refine(Tensor(f), params).data
    assert out.shape == f.shape
    nonneg = np.abs(f)
    assert np.all(np.abs(bam_refine(Tensor(nonneg), params).data) >= nonneg)


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("gate", [channel_gate, spatial_gate, bam_refine])
def test_gates_pass_grad_check(gate, training):
    rng = np.random.default_rng(4)
    params = f64_params(seed=4)
    for name, buf in params.buffers.items():
        var = name.endswith("var")
        buf[:] = rng.uniform(0.5, 1.5, buf.shape) if var else rng.standard_normal(buf.shape)
    # per-sample offsets so the hidden ReLU pattern differs across the batch;
    # otherwise batch norm cancels the first bias exactly and its gradient is 0
    offsets = np.array([-1.5, 0.0, 1.5])[:, None, None, None]
    f = Tensor(rng.standard_normal((3, 8, 9, 9)) + offsets)
    names = list(params.weights)

    def fn(f, *ws):
        params.weights.update(dict(zip(names, ws)))
        return gate(f, params, training)

    err = grad_check(fn, [f] + [params.weights[n] for n in names], samples=20)
    assert err < 1e-4
