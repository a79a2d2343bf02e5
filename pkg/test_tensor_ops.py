import numpy as np
import pytest

from errors import ShapeError
from tensor_ops import (depthwise_gaussian_blur, depthwise_gaussian_blur_adjoint, downsample2, downsample2_adjoint,
                        finite_diff_grad, gaussian_kernel2d, upsample_to, upsample_to_adjoint)


def test_kernel_sums_to_one_and_is_symmetric():
    k = gaussian_kernel2d(5, 1.3).weights
    assert abs(k.sum() - 1.0) < 1e-12
    np.testing.assert_array_equal(k, k[::-1, :])
    np.testing.assert_array_equal(k, k[:, ::-1])
    np.testing.assert_array_equal(k, k.T)


def test_kernel_matches_closed_form():
    ax = np.arange(-2, 3)
    ii, jj = np.meshgrid(ax, ax, indexing='ij')
    expected = np.exp(-(ii ** 2 + jj ** 2) / 2.0)
    expected /= expected.sum()
    np.testing.assert_allclose(gaussian_kernel2d(5, 1.0).weights, expected, atol=1e-15)


def test_kernel_large_sigma_is_uniform():
    np.testing.assert_allclose(gaussian_kernel2d(3, 1e6).weights, np.full((3, 3), 1 / 9), atol=1e-10)


def test_kernel_center_is_max_and_corners_equal():
    k = gaussian_kernel2d(3, 0.8).weights
    assert k[1, 1] == k.max()
    assert k[0, 0] == k[0, 2] == k[2, 0] == k[2, 2]


@pytest.mark.parametrize('size,sigma', [(4, 1.0), (1, 1.0), (-3, 1.0), (3, 0.0), (3, -1.0)])
def test_kernel_rejects_bad_arguments(size, sigma):
    with pytest.raises(ValueError):
        gaussian_kernel2d(size, sigma)


def test_blur_of_constant_is_exact():
    x = np.full((2, 7, 9), 0.3712)
    np.testing.assert_array_equal(depthwise_gaussian_blur(x, gaussian_kernel2d(5, 1.0)), x)


def test_blur_impulse_response_is_kernel():
    k = gaussian_kernel2d(3, 0.9)
    x = np.zeros((1, 9, 9))
    x[0, 4, 4] = 1.0
    y = depthwise_gaussian_blur(x, k)
    np.testing.assert_allclose(y[0, 3:6, 3:6], k.weights, atol=1e-15)
    assert abs(y.sum() - 1.0) < 1e-12


def test_blur_matches_naive_loop(rng):
    k = gaussian_kernel2d(3, 1.0)
    x = rng.standard_normal((1, 8, 8))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode='edge')
    expected = np.zeros_like(x)
    for i in range(8):
        for j in range(8):
            expected[0, i, j] = np.sum(xp[0, i:i + 3, j:j + 3] * k.weights)
    np.testing.assert_allclose(depthwise_gaussian_blur(x, k), expected, atol=1e-12)


def test_blur_is_linear_and_bounded(rng):
    k = gaussian_kernel2d(5, 1.0)
    x, y = rng.standard_normal((2, 3, 10, 10))
    lhs = depthwise_gaussian_blur(2.5 * x - 0.7 * y, k)
    rhs = 2.5 * depthwise_gaussian_blur(x, k) - 0.7 * depthwise_gaussian_blur(y, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    b = depthwise_gaussian_blur(x, k)
    assert b.min() >= x.min() - 1e-12 and b.max() <= x.max() + 1e-12


def test_blur_rejects_small_input():
    with pytest.raises(ShapeError):
        depthwise_gaussian_blur(np.zeros((1, 4, 4)), gaussian_kernel2d(5, 1.0))


def test_downsample_keeps_even_indices():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    np.testing.assert_array_equal(downsample2(x)[0], [[0, 2], [8, 10]])
    assert downsample2(np.zeros((1, 5, 5))).shape == (1, 3, 3)
    with pytest.raises(ShapeError):
        downsample2(np.zeros((1, 1, 1)))


@pytest.mark.parametrize('n', range(2, 17))
def test_downsample_shape_rule(n):
    assert downsample2(np.zeros((1, n, n + 1))).shape == (1, (n + 1) // 2, (n + 2) // 2)


def test_upsample_constant_and_midpoint():
    np.testing.assert_array_equal(upsample_to(np.full((2, 3, 3), 0.25), 7, 5), np.full((2, 7, 5), 0.25))
    c = np.full((1, 8, 8), 0.6)
    np.testing.assert_array_equal(upsample_to(downsample2(c), 8, 8), c)
    y = upsample_to(np.array([[[0.0, 1.0], [0.0, 1.0]]]), 2, 3)
    np.testing.assert_array_equal(y[0, :, 1], [0.5, 0.5])
    with pytest.raises(ShapeError):
        upsample_to(np.zeros((1, 4, 4)), 3, 4)


def test_adjoints_satisfy_dot_product_identity(rng):
    k = gaussian_kernel2d(3, 1.0)
    x = rng.standard_normal((2, 7, 6))
    g = rng.standard_normal((2, 7, 6))
    assert np.isclose(np.sum(depthwise_gaussian_blur(x, k) * g), np.sum(x * depthwise_gaussian_blur_adjoint(g, k)))
    gd = rng.standard_normal((2, 4, 3))
    assert np.isclose(np.sum(downsample2(x) * gd), np.sum(x * downsample2_adjoint(gd, 7, 6)))
    small = rng.standard_normal((2, 4, 3))
    gu = rng.standard_normal((2, 7, 6))
    assert np.isclose(np.sum(upsample_to(small, 7, 6) * gu), np.sum(small * upsample_to_adjoint(gu, 4, 3)))


def test_finite_diff_of_quadratic_and_constant(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_allclose(finite_diff_grad(lambda z: np.sum(z ** 2), x, 1e-5), 2 * x, atol=1e-6)
    np.testing.assert_array_equal(finite_diff_grad(lambda z: 3.0, x), np.zeros_like(x))
