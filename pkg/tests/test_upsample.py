import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcdd.errors import ConfigurationError
from fcdd.model import RFInfo
from fcdd.numerics import Tensor
from fcdd.upsample import blur, gaussian_kernel, kernel_size, upsample, upsample_loop
from oracles import central_difference, rel_error


def random_case(rng):
    """Random (A, rf, sigma, out_shape) with a geometry upsample accepts."""
    stride = int(rng.integers(1, 9))
    rf_size = int(rng.integers(stride, 4 * stride + 8))
    pad_total = int(rng.integers(0, (rf_size - 1) // 2 + 1))
    center = (rf_size - 1) / 2 - pad_total
    u, v = int(rng.integers(1, 7)), int(rng.integers(1, 7))
    h = int(round(center + (u - 1) * stride + (rf_size - 1) / 2 - pad_total)) + 1
    w = int(round(center + (v - 1) * stride + (rf_size - 1) / 2 - pad_total)) + 1
    A = rng.random((int(rng.integers(1, 3)), 1, u, v))
    sigma = float(rng.uniform(0.3, 6.0))
    return A, RFInfo(rf_size, stride, center), sigma, (max(h, 1), max(w, 1))


def test_kernel_size_one():
    np.testing.assert_array_equal(gaussian_kernel(1, 2.0), [[1.0]])


@given(st.floats(0.05, 20))
def test_kernel_3x3_shape(sigma):
    g = gaussian_kernel(3, sigma)
    assert g.argmax() == 4
    np.testing.assert_array_equal(g, g.T)
    np.testing.assert_array_equal(g, g[::-1])
    np.testing.assert_array_equal(g, g[:, ::-1])
    assert g.sum() == pytest.approx(1.0)


def test_kernel_ratios_sigma_one():
    g = gaussian_kernel(3, 1.0)
    assert g[0, 1] / g[1, 1] == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert g[0, 0] / g[1, 1] == pytest.approx(math.exp(-1.0), rel=1e-12)


def test_kernel_rejects_even_size_and_bad_sigma():
    with pytest.raises(ConfigurationError):
        gaussian_kernel(4, 1.0)
    with pytest.raises(ConfigurationError):
        gaussian_kernel(3, 0.0)


def test_even_receptive_field_drops_one():
    assert kernel_size(RFInfo(10, 4, 4.5)) == 9
    assert kernel_size(RFInfo(9, 4, 4.0)) == 9


def test_single_pixel_places_kernel_at_field_center():
    rf = RFInfo(5, 2, 2.0)
    A = np.zeros((1, 1, 4, 4))
    A[0, 0, 1, 2] = 1.0
    out = upsample(A, rf, 1.0, (9, 9))[0, 0]
    expected = np.zeros((9, 9))
    cy, cx = 2 + 1 * 2, 2 + 2 * 2
    expected[cy - 2 : cy + 3, cx - 2 : cx + 3] = gaussian_kernel(5, 1.0)
    np.testing.assert_allclose(out, expected, atol=1e-15)


@given(st.integers(0, 10**6))
def test_upsample_is_linear(seed):
    rng = np.random.default_rng(seed)
    A, rf, sigma, shape = random_case(rng)
    B = rng.random(A.shape)
    np.testing.assert_allclose(
        upsample(A + B, rf, sigma, shape), upsample(A, rf, sigma, shape) + upsample(B, rf, sigma, shape), atol=1e-12
    )


@given(st.integers(0, 10**6))
def test_loop_and_transposed_conv_agree(seed):
    A, rf, sigma, shape = random_case(np.random.default_rng(seed))
    assert np.max(np.abs(upsample(A, rf, sigma, shape) - upsample_loop(A, rf, sigma, shape))) < 1e-6


@given(st.integers(0, 10**6))
def test_mass_never_increases(seed):
    A, rf, sigma, shape = random_case(np.random.default_rng(seed))
    out = upsample(A, rf, sigma, shape)
    assert np.all(out.sum(axis=(1, 2, 3)) <= A.sum(axis=(1, 2, 3)) + 1e-9)


def test_mass_preserved_for_interior_pixels():
    rf = RFInfo(7, 4, 3.0)
    A = np.zeros((1, 1, 4, 4))
    A[0, 0, 1:3, 1:3] = [[1.0, 2.0], [0.5, 3.0]]
    assert upsample(A, rf, 2.0, (16, 16)).sum() == pytest.approx(A.sum(), rel=1e-12)


def test_alignment_with_defect_center():
    rf = RFInfo(18, 4, 1.5)  # small 64px network geometry
    defect = (37, 22)
    A = np.zeros((1, 1, 16, 16))
    i, j = round((defect[0] - 1.5) / 4), round((defect[1] - 1.5) / 4)
    A[0, 0, i, j] = 1.0
    out = upsample(A, rf, 3.0, (64, 64))[0, 0]
    peak = np.unravel_index(out.argmax(), out.shape)
    assert max(abs(peak[0] - defect[0]), abs(peak[1] - defect[1])) <= rf.rf_size / 2


def test_upsample_gradient_flows_to_heatmap():
    rf = RFInfo(5, 2, 1.0)
    A = np.random.default_rng(0).random((2, 1, 3, 3))
    g = np.random.default_rng(1).normal(size=(2, 1, 6, 6))
    t = Tensor(A, requires_grad=True, dtype=np.float64)
    (upsample(t, rf, 1.5, (6, 6)) * g).sum().backward()
    num = central_difference(lambda: float((upsample(A, rf, 1.5, (6, 6)) * g).sum()), A, 1e-6)
    assert rel_error(t.grad, num) < 1e-8


def test_incompatible_geometry_rejected():
    with pytest.raises(ConfigurationError):
        upsample(np.zeros((1, 1, 2, 2)), RFInfo(3, 1, 1.0), 1.0, (64, 64))


# blur ------------------------------------------------------------------------------------------

def test_blur_constant_map():
    np.testing.assert_allclose(blur(np.full((2, 10, 12), 0.7), 1.5), 0.7, atol=1e-6)


def test_blur_preserves_interior_mass():
    m = np.zeros((21, 21))
    m[8:13, 9:12] = np.arange(15.0).reshape(5, 3)
    assert blur(m, 1.0).sum() == pytest.approx(m.sum(), rel=1e-12)


def test_blur_delta_gives_kernel():
    m = np.zeros((15, 15))
    m[7, 7] = 1.0
    np.testing.assert_allclose(blur(m, 1.2, size=7)[4:11, 4:11], gaussian_kernel(7, 1.2), atol=1e-15)
