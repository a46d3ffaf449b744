import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clnet.errors import FormatError, UnsupportedOperationError
from clnet.layers import (ConnectionTable, FilterBank, LayerParams, apply_filter, cl_layer_forward,
                          cnn_layer_backward, cnn_layer_forward, contrastive_norm, divisive_norm, l2_pool,
                          layer_backward, local_std, read_bank, spatial_convolution, spatial_sad,
                          subtractive_norm, tanh_map, write_bank)
from clnet.reference import naive_convolution, naive_sad
from clnet.tensor import make_gaussian_kernel, uniform_kernel

from helpers import central_difference, loop_conv, loop_local_mean, loop_sad, random_bank, rel_error

GAUSS5 = make_gaussian_kernel(5)


# -- connection tables and banks ----------------------------------------------------

def test_connection_table_validation():
    with pytest.raises(ValueError):
        ConnectionTable(2, ((0, 2),))
    with pytest.raises(ValueError):
        ConnectionTable(2, ((),))
    with pytest.raises(ValueError):
        ConnectionTable(2, ((1, 1),))
    t = ConnectionTable(3, ((0, 2), (1,)))
    assert t.out_planes == 2 and not t.is_full
    np.testing.assert_array_equal(t.consumers(0), [0])
    np.testing.assert_array_equal(t.mask(), [[True, False, True], [False, True, False]])


def test_bank_zeroes_unconnected_weights():
    t = ConnectionTable(2, ((1,),))
    bank = FilterBank(np.ones((1, 2, 2, 2)), t)
    assert bank.weights[0, 0].sum() == 0 and bank.weights[0, 1].sum() == 4
    assert bank.tap_count() == 4
    np.testing.assert_array_equal(bank.filters(0), np.ones((1, 2, 2)))


def test_bank_from_filters_checks_shapes():
    t = ConnectionTable(3, ((0, 1), (2,)))
    bank = FilterBank.from_filters([np.ones((2, 3, 3)), np.full((1, 3, 3), 2.0)], t)
    assert bank.weights.shape == (2, 3, 3, 3)
    with pytest.raises(ValueError):
        FilterBank.from_filters([np.ones((1, 3, 3)), np.ones((1, 3, 3))], t)


# -- filtering -----------------------------------------------------------------------

def test_sad_hand_case():
    x = np.array([[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]])
    bank = FilterBank(np.array([[[[1.0, 1.0]]]]), ConnectionTable(1, ((0,),)))
    np.testing.assert_array_equal(spatial_sad(x, bank), [[[1.0, 3.0], [7.0, 9.0]]])


def test_sad_of_exact_match_is_zero():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 6))
    w = x[:, 1:4, 2:5][None]
    out = spatial_sad(x, FilterBank(w, ConnectionTable(2, ((0, 1),))))
    assert out[0, 1, 2] == 0.0
    assert out.min() == 0.0


def test_conv_is_cross_correlation_without_flip():
    x = np.zeros((1, 3, 3))
    x[0, 0, 0] = 1.0
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 5.0
    out = spatial_convolution(x, FilterBank(w, ConnectionTable(1, ((0,),)), np.zeros(1)))
    assert out[0, 0, 0] == 5.0 and out.sum() == 5.0


@pytest.mark.parametrize("sparse", [False, True])
def test_fast_kernels_match_scalar_loops(sparse):
    rng = np.random.default_rng(7 + sparse)
    x = rng.normal(size=(3, 7, 6))
    bank = random_bank(rng, 3, 4, 3, 2, sparse=sparse)
    np.testing.assert_allclose(spatial_sad(x, bank), loop_sad(x, bank), rtol=1e-12)
    np.testing.assert_allclose(spatial_convolution(x, bank), loop_conv(x, bank), rtol=1e-12, atol=1e-12)


def test_package_reference_kernels_match_scalar_loops():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 5))
    bank = random_bank(rng, 2, 3, 2, 2, sparse=True)
    np.testing.assert_allclose(naive_sad(x, bank), loop_sad(x, bank), rtol=1e-12)
    np.testing.assert_allclose(naive_convolution(x, bank), loop_conv(x, bank), rtol=1e-12, atol=1e-12)


def test_batched_filtering_equals_per_image():
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(3, 2, 6, 6))
    bank = random_bank(rng, 2, 3, 3, 3, sparse=True)
    for op in ("sad", "conv"):
        batch = apply_filter(xs, bank, op)
        for n in range(3):
            np.testing.assert_allclose(batch[n], apply_filter(xs[n], bank, op), rtol=1e-13)


def test_filtering_errors():
    rng = np.random.default_rng(0)
    bank = random_bank(rng, 2, 2, 3, 3)
    with pytest.raises(ValueError):
        spatial_sad(np.zeros((3, 5, 5)), bank)
    with pytest.raises(ValueError):
        spatial_sad(np.zeros((2, 2, 5)), bank)
    with pytest.raises(ValueError):
        spatial_convolution(np.zeros((2, 5, 5)), FilterBank(bank.weights, bank.table, None))
    with pytest.raises(ValueError):
        apply_filter(np.zeros((2, 5, 5)), bank, "max")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_sad_is_translation_invariant_in_value(seed, c):
    # shifting input and weights by the same constant leaves SAD unchanged
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 5))
    bank = random_bank(rng, 2, 2, 2, 2, sparse=True)
    moved = FilterBank(bank.weights + c, bank.table, bank.bias)
    np.testing.assert_allclose(spatial_sad(x + c, moved), spatial_sad(x, bank), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sad_is_nonnegative_and_conv_linear(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 2, 5, 5))
    bank = random_bank(rng, 2, 3, 3, 3, bias=False)
    bank = FilterBank(bank.weights, bank.table, np.zeros(3))
    assert spatial_sad(x, bank).min() >= 0
    np.testing.assert_allclose(spatial_convolution(2 * x - y, bank),
                               2 * spatial_convolution(x, bank) - spatial_convolution(y, bank), atol=1e-10)


# -- pooling -------------------------------------------------------------------------

def test_l2_pool_literal_is_weighted_sum():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    out = l2_pool(x)
    np.testing.assert_allclose(out, [[[2.5, 4.5], [10.5, 12.5]]])


def test_l2_pool_true_l2():
    x = np.full((1, 2, 2), 3.0)
    np.testing.assert_allclose(l2_pool(x, mode="true_l2"), [[[3.0]]])


def test_l2_pool_custom_kernel_and_errors():
    x = np.arange(9, dtype=float).reshape(1, 3, 3)
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    assert l2_pool(x, 3, k)[0, 0, 0] == 4.0
    with pytest.raises(ValueError):
        l2_pool(np.zeros((1, 5, 4)), 2)
    with pytest.raises(ValueError):
        l2_pool(np.zeros((1, 4, 4)), 2, mode="max")


def test_tanh_map():
    np.testing.assert_allclose(tanh_map(np.array([[[0.0, 1.0]]])), [[[0.0, np.tanh(1.0)]]])


# -- normalization -------------------------------------------------------------------

def test_subtractive_norm_matches_window_loop():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 7, 8))
    expected = x - loop_local_mean(x, GAUSS5)[None]
    np.testing.assert_allclose(subtractive_norm(x, GAUSS5), expected, atol=1e-12)


def test_local_std_matches_window_loop():
    rng = np.random.default_rng(12)
    v = rng.normal(size=(2, 6, 6))
    expected = np.sqrt(loop_local_mean(v * v, GAUSS5))
    np.testing.assert_allclose(local_std(v, GAUSS5), expected, atol=1e-12)


def test_divisive_norm_denominator_rule():
    rng = np.random.default_rng(13)
    v = rng.normal(size=(2, 6, 6))
    sigma = np.sqrt(loop_local_mean(v * v, GAUSS5))
    denom = np.maximum(np.maximum(sigma.mean(), sigma), 1e-6)
    np.testing.assert_allclose(divisive_norm(v, GAUSS5), v / denom, rtol=1e-12)


def test_divisive_norm_of_zero_is_zero_and_rejects_bad_epsilon():
    np.testing.assert_array_equal(divisive_norm(np.zeros((1, 4, 4)), GAUSS5), np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        divisive_norm(np.zeros((1, 4, 4)), GAUSS5, epsilon=0.0)


def test_norm_rejects_even_kernel():
    with pytest.raises(ValueError):
        subtractive_norm(np.zeros((1, 4, 4)), np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100), st.integers(1, 4), st.integers(3, 12))
def test_subtractive_norm_annihilates_constants(seed, c, planes, size):
    x = np.full((planes, size, size), c)
    assert np.max(np.abs(subtractive_norm(x, make_gaussian_kernel(9)))) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 10.0]))
def test_divisive_norm_scale_equivariance(seed, alpha):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(2, 8, 8))
    np.testing.assert_allclose(divisive_norm(alpha * v, GAUSS5), divisive_norm(v, GAUSS5), atol=1e-9)


def test_contrastive_norm_is_bounded_and_centred():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 10, size=(3, 32, 32))
    y = contrastive_norm(x, make_gaussian_kernel(9))
    assert np.all(np.isfinite(y))
    assert abs(y[:, 4:-4, 4:-4].mean(axis=(1, 2))).max() < 0.15


def test_batched_normalization_equals_per_image():
    rng = np.random.default_rng(2)
    xs = rng.normal(size=(3, 2, 7, 7))
    batch = contrastive_norm(xs, GAUSS5)
    for n in range(3):
        np.testing.assert_allclose(batch[n], contrastive_norm(xs[n], GAUSS5), rtol=1e-12)


# -- composite layers ------------------------------------------------------------------

def test_cl_layer_output_shape_and_stage_order():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 12, 12))
    params = LayerParams(random_bank(rng, 2, 4, 5, 5, sparse=True), contrast_kernel=GAUSS5, norm_kernel=GAUSS5)
    out = cl_layer_forward(x, params)
    assert out.shape == (4, 4, 4)
    manual = subtractive_norm(tanh_map(l2_pool(contrastive_norm(spatial_sad(x, params.bank), GAUSS5))), GAUSS5)
    np.testing.assert_allclose(out, manual, rtol=1e-12)


def test_cnn_layer_output_matches_stages():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(3, 10, 10))
    params = LayerParams(random_bank(rng, 3, 2, 3, 3), norm_kernel=GAUSS5, op="conv")
    manual = subtractive_norm(tanh_map(l2_pool(spatial_convolution(x, params.bank))), GAUSS5)
    np.testing.assert_allclose(cnn_layer_forward(x, params), manual, rtol=1e-12)


# -- gradients -------------------------------------------------------------------------

def _check_grad(forward, backward_in, x, upstream, tol=1e-4):
    num = central_difference(lambda: float(np.sum(forward(x) * upstream)), x)
    assert rel_error(backward_in, num) < tol


@pytest.mark.parametrize("seed", range(3))
def test_convolution_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6, 5))
    bank = random_bank(rng, 2, 3, 3, 2, sparse=True)
    g = rng.normal(size=(3, 4, 4))
    gin, gp = layer_backward("convolution", x, g, bank)
    _check_grad(lambda v: spatial_convolution(v, bank), gin, x, g)
    f = lambda: float(np.sum(spatial_convolution(x, bank) * g))  # noqa: E731
    mask = np.broadcast_to(bank.table.mask()[:, :, None, None], bank.weights.shape)
    assert np.all(gp["weights"][~mask] == 0)
    assert rel_error(gp["weights"][mask], central_difference(f, bank.weights)[mask]) < 1e-4
    assert rel_error(gp["bias"], central_difference(f, bank.bias)) < 1e-4


@pytest.mark.parametrize("mode", ["literal", "true_l2"])
def test_pool_gradients(mode):
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 6, 6)) + (3.0 if mode == "true_l2" else 0.0)
    g = rng.normal(size=(2, 3, 3))
    k = np.array([[0.1, 0.2], [0.3, 0.4]])
    params = {"region": 2, "kernel": k, "mode": mode}
    gin, _ = layer_backward("l2_pool", x, g, params)
    _check_grad(lambda v: l2_pool(v, 2, params["kernel"], mode), gin, x, g)


def test_tanh_and_subtractive_gradients():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 6, 7))
    g = rng.normal(size=x.shape)
    _check_grad(tanh_map, layer_backward("tanh", x, g)[0], x, g)
    _check_grad(lambda v: subtractive_norm(v, GAUSS5), layer_backward("subtractive_norm", x, g, GAUSS5)[0], x, g)


def test_whole_cnn_layer_gradient():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(2, 9, 9))
    params = LayerParams(random_bank(rng, 2, 3, 2, 2, sparse=True), norm_kernel=GAUSS5, op="conv")
    g = rng.normal(size=(3, 4, 4))
    gin, gp = cnn_layer_backward(x, g, params)
    _check_grad(lambda v: cnn_layer_forward(v, params), gin, x, g)
    f = lambda: float(np.sum(cnn_layer_forward(x, params) * g))  # noqa: E731
    mask = np.broadcast_to(params.bank.table.mask()[:, :, None, None], params.bank.weights.shape)
    num = central_difference(f, params.bank.weights)
    assert rel_error(gp["weights"][mask], num[mask]) < 1e-4
    assert rel_error(gp["bias"], central_difference(f, params.bank.bias)) < 1e-4


@pytest.mark.parametrize("kind", ["sad", "spatial_sad", "divisive_norm", "contrastive_norm"])
def test_untrainable_stages_refuse_backward(kind):
    with pytest.raises(UnsupportedOperationError):
        layer_backward(kind, np.zeros((1, 4, 4)), np.zeros((1, 4, 4)))


def test_unknown_backward_kind():
    with pytest.raises(ValueError):
        layer_backward("softmax", np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))


# -- serialization ---------------------------------------------------------------------

@pytest.mark.parametrize("bias", [True, False])
def test_bank_round_trip(bias):
    rng = np.random.default_rng(20)
    bank = random_bank(rng, 4, 5, 3, 2, sparse=True, bias=bias)
    buf = io.BytesIO()
    write_bank(buf, bank)
    buf.seek(0)
    assert read_bank(buf).same_as(bank)


def test_bank_format_errors():
    rng = np.random.default_rng(21)
    buf = io.BytesIO()
    write_bank(buf, random_bank(rng, 2, 2, 2, 2))
    raw = buf.getvalue()
    with pytest.raises(FormatError):
        read_bank(io.BytesIO(b"NOPE" + raw[4:]))
    with pytest.raises(FormatError):
        read_bank(io.BytesIO(raw[:-5]))


def test_uniform_pool_kernel_average():
    x = np.arange(4, dtype=float).reshape(1, 2, 2)
    assert l2_pool(x, 2, uniform_kernel(2))[0, 0, 0] == 1.5
