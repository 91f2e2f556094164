"""Rasterizer tests: hand-checked values, brute-force oracle, finite differences."""

import math

import numpy as np
import pytest

from gsvideo.gaussians import (
    DIAG_EPS,
    Gaussian2D,
    GaussianSet,
    covariance_from_cholesky,
    eval_gaussian,
    render,
    render_backward,
    render_reference,
)
from gsvideo.media import Image

from helpers import box_downsample, central_diff, random_set, rel_err


def make_gaussian(mu, chol, color):
    return Gaussian2D(np.array(mu, float), np.array(chol, float), np.array(color, float))


def single_set(mu, chol, color, width, height):
    return GaussianSet(
        np.array([mu], float), np.array([chol], float), np.array([color], float),
        width, height,
    )


class TestCovariance:
    # the positivity floor shifts diagonals by DIAG_EPS, hence the tolerances

    def test_identity_factor(self):
        cov = covariance_from_cholesky(np.array([1.0, 0.0, 1.0]))
        assert np.allclose(cov, np.eye(2), atol=3 * DIAG_EPS)

    def test_diagonal_factor(self):
        cov = covariance_from_cholesky(np.array([2.0, 0.0, 3.0]))
        assert np.allclose(cov, np.diag([4.0, 9.0]), atol=7 * DIAG_EPS)

    def test_full_factor_hand_multiplied(self):
        # L = [[1,0],[1,1]] -> L L^T = [[1,1],[1,2]]
        cov = covariance_from_cholesky(np.array([1.0, 1.0, 1.0]))
        assert np.allclose(cov, np.array([[1.0, 1.0], [1.0, 2.0]]), atol=5 * DIAG_EPS)

    def test_exact_when_floor_cancelled(self):
        l = 1.0 - DIAG_EPS
        cov = covariance_from_cholesky(np.array([l, 0.0, l]))
        assert np.array_equal(cov, np.eye(2))

    def test_symmetry_and_psd(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            chol = rng.normal(size=3) * 3
            cov = covariance_from_cholesky(chol)
            assert cov[0, 1] == cov[1, 0]
            assert np.linalg.det(cov) >= 0
            assert cov[0, 0] > 0 and cov[1, 1] > 0


class TestEvalGaussian:
    def test_center_is_one(self):
        g = make_gaussian([0.3, 0.7], [0.05, 0.01, 0.08], [1, 1, 1])
        w = eval_gaussian(g, (0.3 * 40, 0.7 * 30), 40, 30)
        assert w == 1.0

    def test_isotropic_half_sigma(self):
        # unit normalized covariance, displacement (1, 0) -> sigma = 0.5
        l = 1.0 - DIAG_EPS
        g = make_gaussian([0.5, 0.5], [l, 0.0, l], [1, 1, 1])
        w = eval_gaussian(g, ((0.5 + 1.0) * 10, 0.5 * 10), 10, 10)
        assert w == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_sigma_eight(self):
        l = 1.0 - DIAG_EPS
        g = make_gaussian([0.5, 0.5], [l, 0.0, l], [1, 1, 1])
        w = eval_gaussian(g, (0.5 * 10, (0.5 + 4.0) * 10), 10, 10)
        assert w == pytest.approx(math.exp(-8.0), rel=1e-12)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            g = make_gaussian(rng.uniform(0, 1, 2), rng.normal(size=3) * 0.2, [1, 1, 1])
            w = eval_gaussian(g, tuple(rng.uniform(-8, 40, 2)), 32, 32)
            assert 0.0 <= w <= 1.0


class TestRender:
    def test_empty_set(self):
        s = GaussianSet(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)), 8, 8)
        img = render(s, 8, 8)
        assert img.data.shape == (8, 8, 3)
        assert np.all(img.data == 0)
        ref = render_reference(s, 8, 8)
        assert np.all(ref.data == 0)

    def test_far_pixels_outside_cutoff_are_zero(self):
        s = single_set([0.5, 0.5], [1.0 / 64, 0.0, 1.0 / 64], [1.0, 0.5, 0.2], 64, 64)
        img = render(s, 64, 64)
        assert np.all(img.data[0, 0] == 0.0)
        assert np.all(img.data[-1, -1] == 0.0)

    def test_single_gaussian_matches_pointwise_eval(self):
        # odd dims so the center pixel sample hits the center exactly
        w = h = 33
        s = single_set([0.5, 0.5], [3.0 / w, 0.0, 3.0 / h], [1.0, 0.0, 0.0], w, h)
        img = render(s, w, h)
        assert np.allclose(img.data[16, 16], [1.0, 0.0, 0.0], atol=1e-12)
        g = s.gaussian(0)
        for row in range(h):
            for col in range(w):
                expect = eval_gaussian(g, (col + 0.5, row + 0.5), w, h)
                got = img.data[row, col, 0]
                if got != 0.0:  # inside the influence box
                    assert got == pytest.approx(expect, abs=1e-12)
                else:
                    assert expect < 1e-7

    def test_single_gaussian_reference_is_analytic(self):
        w = h = 17
        s = single_set([0.4, 0.6], [2.0 / w, 0.5 / h, 2.0 / h], [0.3, -0.2, 0.9], w, h)
        ref = render_reference(s, w, h)
        g = s.gaussian(0)
        for row in range(h):
            for col in range(w):
                expect = eval_gaussian(g, (col + 0.5, row + 0.5), w, h)
                assert ref.data[row, col] == pytest.approx(
                    expect * s.color[0], abs=1e-12
                )

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_reference_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s = random_set(rng, 50, 32, 32)
        img = render(s, 32, 32)
        ref = render_reference(s, 32, 32)
        assert np.max(np.abs(img.data - ref.data)) < 1e-5

    def test_matches_reference_at_other_resolution(self):
        rng = np.random.default_rng(11)
        s = random_set(rng, 40, 32, 24)
        img = render(s, 51, 40)
        ref = render_reference(s, 51, 40)
        assert np.max(np.abs(img.data - ref.data)) < 1e-5

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        s = random_set(rng, 30, 32, 32)
        a = render(s, 32, 32)
        b = render(s, 32, 32)
        assert np.array_equal(a.data, b.data)

    def test_resolution_covariance(self):
        # smooth scene: stds >= 2 px, 2x render box-downsampled ~ native render
        rng = np.random.default_rng(9)
        s = random_set(rng, 30, 32, 32, min_std_px=2.0, max_std_px=5.0)
        native = render(s, 32, 32)
        doubled = render(s, 64, 64)
        down = box_downsample(doubled.data, 2)
        assert np.max(np.abs(down - native.data)) < 5e-2

    def test_scale_doubles_dimensions(self):
        rng = np.random.default_rng(13)
        s = random_set(rng, 10, 16, 16)
        img = render(s, 32, 32)
        assert img.data.shape == (32, 32, 3)


class TestRenderBackward:
    def test_zero_grad_image(self):
        rng = np.random.default_rng(2)
        s = random_set(rng, 12, 16, 16)
        grad = Image(np.zeros((16, 16, 3)))
        dmu, dchol, dcolor = render_backward(s, grad, 16, 16)
        assert not dmu.any() and not dchol.any() and not dcolor.any()

    def test_color_grad_single_pixel(self):
        w = h = 17
        s = single_set([0.5, 0.5], [3.0 / w, 0.0, 3.0 / h], [0.2, 0.4, 0.6], w, h)
        g = np.zeros((h, w, 3))
        g[5, 7] = [1.0, 2.0, 3.0]
        _, _, dcolor = render_backward(s, Image(g), w, h)
        weight = eval_gaussian(s.gaussian(0), (7.5, 5.5), w, h)
        assert np.allclose(dcolor[0], weight * g[5, 7], atol=1e-12)

    def test_matches_central_differences(self):
        rng = np.random.default_rng(17)
        s = random_set(rng, 10, 16, 16, min_std_px=0.8, max_std_px=3.0)
        grad = rng.normal(size=(16, 16, 3))

        def loss():
            return float(np.sum(render(s, 16, 16).data * grad))

        dmu, dchol, dcolor = render_backward(s, Image(grad), 16, 16)
        assert rel_err(dmu, central_diff(loss, s.mu, h=1e-4)) < 1e-4
        assert rel_err(dchol, central_diff(loss, s.chol, h=1e-4)) < 1e-4
        assert rel_err(dcolor, central_diff(loss, s.color, h=1e-4)) < 1e-4

    def test_deterministic(self):
        rng = np.random.default_rng(23)
        s = random_set(rng, 25, 32, 32)
        grad = Image(rng.normal(size=(32, 32, 3)))
        a = render_backward(s, grad, 32, 32)
        b = render_backward(s, grad, 32, 32)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_grad_shape_mismatch_raises(self):
        rng = np.random.default_rng(1)
        s = random_set(rng, 3, 8, 8)
        with pytest.raises(ValueError):
            render_backward(s, Image(np.zeros((4, 4, 3))), 8, 8)
