import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamg.discretization import fdm_stencil, transfer_stencils
from metamg.grid import (
    ContractError, StencilKernel, conv, conv_strided, correlate, correlate_kernel_grad,
    deconv, format_stencil, level_extents, prolong, restrict, upsample,
)

from oracles import brute_correlate

LAPLACE = fdm_stencil("laplace", 1.0)


def test_identity_kernel_leaves_field_unchanged():
    v = np.random.default_rng(0).standard_normal((1, 5, 4))
    np.testing.assert_array_equal(conv(StencilKernel.delta(2), v), v)


def test_laplacian_on_ones():
    out = conv(LAPLACE, np.ones((1, 2, 2)))
    np.testing.assert_array_equal(out, np.full((1, 2, 2), -2.0))


def test_laplacian_on_delta():
    v = np.zeros((1, 3, 3))
    v[0, 1, 1] = 1
    np.testing.assert_array_equal(conv(LAPLACE, v)[0], [[0, 1, 0], [1, -4, 1], [0, 1, 0]])


def test_channel_mismatch_is_contract_error():
    K = StencilKernel(np.zeros((1, 2, 3, 3)))
    with pytest.raises(ContractError):
        conv(K, np.zeros((1, 4, 4)))
    with pytest.raises(ContractError):
        conv(StencilKernel.delta(3), np.zeros((1, 4, 4)))


def test_even_taps_rejected():
    with pytest.raises(ContractError):
        StencilKernel(np.zeros((1, 1, 2, 3)))


@pytest.mark.parametrize("shape,taps", [((2, 5, 6), (3, 3)), ((3, 4, 3, 5), (3, 1, 3))])
def test_multichannel_matches_brute_force(shape, taps):
    rng = np.random.default_rng(1)
    cin = shape[0]
    coef = rng.standard_normal((2, cin) + taps)
    v = rng.standard_normal(shape)
    np.testing.assert_allclose(correlate(coef, v), brute_correlate(coef, v), rtol=0, atol=1e-12)


def test_per_sample_matches_separate_calls():
    rng = np.random.default_rng(2)
    for d, cin, cout in [(2, 1, 1), (2, 4, 3), (3, 2, 2)]:
        coef = rng.standard_normal((3, cout, cin) + (3,) * d)
        v = rng.standard_normal((3, cin) + (5,) * d)
        ref = np.stack([brute_correlate(coef[b], v[b]) for b in range(3)])
        np.testing.assert_allclose(correlate(coef, v, per_sample=True), ref, atol=1e-12)


@pytest.mark.parametrize("per_sample,cin,cout", [(False, 1, 1), (True, 1, 1), (True, 3, 2), (False, 2, 3)])
def test_kernel_gradient_is_adjoint_of_correlation(per_sample, cin, cout):
    rng = np.random.default_rng(3)
    lead = (2,) if per_sample else ()
    coef = rng.standard_normal(lead + (cout, cin, 5, 3))
    v = rng.standard_normal((2, cin, 6, 7))
    g = rng.standard_normal((2, cout, 6, 7))
    dk = correlate_kernel_grad(g, v, (5, 3), per_sample)
    # <g, K * v> is linear in K, so it equals <dk, K>
    assert np.sum(g * correlate(coef, v, per_sample)) == pytest.approx(np.sum(dk * coef), rel=1e-12)


def test_strided_delta_subsamples():
    v = np.arange(16.0).reshape(1, 4, 4)
    out = conv_strided(StencilKernel.delta(2), v, 2)
    np.testing.assert_array_equal(out[0], [[v[0, 0, 0], v[0, 0, 2]], [v[0, 2, 0], v[0, 2, 2]]])


def test_stride_one_equals_conv():
    rng = np.random.default_rng(4)
    K = StencilKernel(rng.standard_normal((2, 1, 3, 5)))
    v = rng.standard_normal((1, 7, 6))
    np.testing.assert_array_equal(conv_strided(K, v, 1), conv(K, v))


def test_strided_extent_is_ceiling():
    assert conv_strided(StencilKernel.delta(2), np.ones((1, 7, 8)), 2).shape == (1, 4, 4)


def test_restriction_of_constant_is_weight_sum():
    P, R = transfer_stencils(2)
    out = conv_strided(R, np.ones((1, 9, 9)), 2, offset=1)
    # interior coarse nodes see all nine taps
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 4.0)


def test_deconv_delta_inserts_zeros():
    v = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = deconv(StencilKernel.delta(2), v, 2)
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = v[0]
    np.testing.assert_array_equal(out, expected)


def test_deconv_is_conv_after_upsampling():
    rng = np.random.default_rng(5)
    K = StencilKernel(rng.standard_normal((1, 1, 3, 5)))
    v = rng.standard_normal((1, 3, 4))
    np.testing.assert_array_equal(deconv(K, v, 2), conv(K, upsample(v, 2, 0, (6, 8))))


def test_prolongation_imprints_stencil():
    P, _ = transfer_stencils(2)
    v = np.zeros((1, 3, 3))
    v[0, 1, 1] = 1
    fine = prolong(P, v)
    assert fine.shape == (1, 7, 7)
    expected = np.zeros((7, 7))
    expected[2:5, 2:5] = P.taps_array
    np.testing.assert_array_equal(fine[0], expected)
    up = upsample(v, 2, 1, (7, 7))
    np.testing.assert_array_equal(fine, brute_correlate(P.coef, up))


def test_level_extents_vertex_centered():
    assert level_extents(256, 5) == [255, 127, 63, 31, 15]
    with pytest.raises(ContractError):
        level_extents(8, 4)
    with pytest.raises(ContractError):
        level_extents(24, 2)


def test_format_stencil_six_significant_digits():
    text = format_stencil(StencilKernel.scalar([[1 / 3, -1.0, 2e-7]]))
    assert text.splitlines()[1] == " 0.333333 -1  2e-07"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, d, alpha, beta):
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((2, 2) + (3,) * d)
    u = rng.standard_normal((2,) + (4,) * d)
    v = rng.standard_normal((2,) + (4,) * d)
    lhs = correlate(K, alpha * u + beta * v)
    rhs = alpha * correlate(K, u) + beta * correlate(K, v)
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1.0)
    assert np.abs(lhs - rhs).max() <= 1e-13 * scale * 10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3]), st.sampled_from([3, 5, 7]))
def test_restriction_prolongation_adjoint(seed, d, n):
    rng = np.random.default_rng(seed)
    P, R = transfer_stencils(d)
    u = rng.standard_normal((1,) + (n,) * d)
    v = rng.standard_normal((1,) + ((n - 1) // 2,) * d)
    lhs = np.vdot(restrict(R, u), v)
    rhs = np.vdot(u, prolong(P, v))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_offset_zero_stride_adjoint(seed):
    # offset-0 strided conv and deconv are adjoint too (with P = R symmetric)
    rng = np.random.default_rng(seed)
    P, R = transfer_stencils(2)
    u = rng.standard_normal((1, 8, 8))
    v = rng.standard_normal((1, 4, 4))
    assert np.vdot(conv_strided(R, u, 2), v) == pytest.approx(np.vdot(u, deconv(P, v, 2)), rel=1e-12, abs=1e-12)


def test_outputs_are_finite_and_float64():
    out = conv(LAPLACE, np.ones((1, 3, 3), dtype=np.float32))
    assert out.dtype == np.float64
    with pytest.raises(ContractError):
        StencilKernel.scalar([[np.nan]])
