import itertools
import math

import numpy as np
import pytest

from ifslab.errors import NotConvergedError, NumericError, UnsupportedInstanceError
from ifslab.geometry import PointCloud
from ifslab.ot import (
    SinkhornConfig,
    divergence_and_grad,
    exact_w2,
    gradient_wrt_points,
    marginal_violations,
    sinkhorn_divergence,
)


def uniform_cloud(rng, n, d=2, scale=1.0):
    return PointCloud.from_points(scale * rng.random((n, d)))


TIGHT = SinkhornConfig(blur=0.1, max_iters=20000, tol=1e-12)


class TestSinkhornDivergence:
    def test_self_divergence_zero(self):
        cloud = uniform_cloud(np.random.default_rng(0), 64, scale=4.0)
        res = sinkhorn_divergence(cloud, cloud, SinkhornConfig(blur=0.05))
        assert abs(res.cost) <= 1e-8

    def test_two_diracs_small_blur(self):
        a = PointCloud.from_points([[0.0, 0.0]])
        b = PointCloud.from_points([[1.0, 0.0]])
        res = sinkhorn_divergence(a, b, SinkhornConfig(blur=1e-3))
        assert res.value == pytest.approx(1.0, abs=1e-3)

    def test_matches_exact_within_two_percent(self):
        rng = np.random.default_rng(5)
        a, b = uniform_cloud(rng, 64), uniform_cloud(rng, 64)
        w = exact_w2(a, b)
        res = sinkhorn_divergence(a, b, SinkhornConfig(blur=0.01, max_iters=4000))
        assert abs(res.value - w.value) <= 0.02 * w.value

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a, b = uniform_cloud(rng, 40), uniform_cloud(rng, 30)
        cfg = SinkhornConfig(blur=0.1, max_iters=5000, tol=1e-10)
        sab = sinkhorn_divergence(a, b, cfg)
        sba = sinkhorn_divergence(b, a, cfg)
        assert sab.cost == pytest.approx(sba.cost, abs=1e-8)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            a = uniform_cloud(rng, rng.integers(4, 40))
            b = uniform_cloud(rng, rng.integers(4, 40))
            res = sinkhorn_divergence(a, b, SinkhornConfig(blur=0.05, max_iters=2000))
            assert res.cost >= -1e-8

    def test_value_is_sqrt_of_cost(self):
        rng = np.random.default_rng(8)
        res = sinkhorn_divergence(uniform_cloud(rng, 10), uniform_cloud(rng, 12))
        assert res.value == pytest.approx(math.sqrt(max(res.cost, 0.0)), abs=1e-12)

    def test_monotone_approach_to_exact(self):
        rng = np.random.default_rng(9)
        a, b = uniform_cloud(rng, 48), uniform_cloud(rng, 48)
        w = exact_w2(a, b).value
        errs = []
        for blur in (0.1, 0.05, 0.01):
            res = sinkhorn_divergence(a, b, SinkhornConfig(blur=blur, max_iters=20000))
            errs.append(abs(res.value - w))
        assert errs[1] <= errs[0] + 0.01 * w
        assert errs[2] <= errs[1] + 0.01 * w

    def test_nonconvergence_is_flagged_not_raised(self):
        rng = np.random.default_rng(10)
        a, b = uniform_cloud(rng, 32), uniform_cloud(rng, 32)
        res = sinkhorn_divergence(a, b, SinkhornConfig(blur=0.01, max_iters=2))
        assert not res.converged
        assert np.isfinite(res.cost)

    def test_overflow_cost_matrix_raises(self):
        a = PointCloud.from_points([[1e200, 0.0]])
        b = PointCloud.from_points([[-1e200, 0.0]])
        with pytest.raises(NumericError):
            sinkhorn_divergence(a, b)

    def test_monotone_marginal_violations(self):
        rng = np.random.default_rng(11)
        a, b = uniform_cloud(rng, 50, scale=2.0), uniform_cloud(rng, 40, scale=2.0)
        viol = marginal_violations(a, b, SinkhornConfig(blur=0.05, max_iters=3000))
        assert len(viol) > 3
        assert np.all(np.diff(viol) <= 1e-12)


class TestExactW2:
    def test_unit_translation(self):
        a = PointCloud.from_points([[0.0, 0.0], [1.0, 0.0]])
        b = PointCloud.from_points([[0.0, 1.0], [1.0, 1.0]])
        assert exact_w2(a, b).value == pytest.approx(1.0, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        pts = rng.random((20, 2))
        a = PointCloud.from_points(pts)
        b = PointCloud.from_points(pts[rng.permutation(20)])
        assert exact_w2(a, b).cost == pytest.approx(0.0, abs=1e-15)

    def test_equals_exhaustive_permutation_minimum(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = uniform_cloud(rng, 6)
            b = uniform_cloud(rng, 6)
            best = min(
                sum(np.sum((a.points[i] - b.points[p[i]]) ** 2) for i in range(6))
                for p in itertools.permutations(range(6))
            )
            assert exact_w2(a, b).cost == pytest.approx(best / 6, abs=1e-12)

    def test_upper_bounds_any_explicit_permutation(self):
        rng = np.random.default_rng(3)
        a, b = uniform_cloud(rng, 25), uniform_cloud(rng, 25)
        cost = exact_w2(a, b).cost
        for _ in range(20):
            perm = rng.permutation(25)
            explicit = float(np.sum((a.points - b.points[perm]) ** 2)) / 25
            assert cost <= explicit + 1e-12

    def test_unsupported_instances(self):
        rng = np.random.default_rng(4)
        with pytest.raises(UnsupportedInstanceError):
            exact_w2(uniform_cloud(rng, 4), uniform_cloud(rng, 5))
        weighted = PointCloud(rng.random((4, 2)), np.array([0.4, 0.3, 0.2, 0.1]))
        with pytest.raises(UnsupportedInstanceError):
            exact_w2(weighted, uniform_cloud(rng, 4))
        with pytest.raises(UnsupportedInstanceError):
            exact_w2(uniform_cloud(rng, 4, d=2), uniform_cloud(rng, 4, d=3))


class TestGradient:
    def test_zero_at_identity(self):
        cloud = uniform_cloud(np.random.default_rng(0), 32, scale=2.0)
        grad = gradient_wrt_points(cloud, cloud, SinkhornConfig(blur=0.05))
        assert np.abs(grad).max() <= 1e-6

    def test_single_dirac_pair(self):
        a = PointCloud.from_points([[0.5, -1.0]])
        b = PointCloud.from_points([[2.0, 0.5]])
        grad = gradient_wrt_points(a, b, SinkhornConfig(blur=0.05, tol=1e-10))
        np.testing.assert_allclose(grad[0], 2.0 * (a.points[0] - b.points[0]), atol=1e-9)
        assert np.linalg.norm(grad[0]) == pytest.approx(
            2.0 * np.linalg.norm(a.points[0] - b.points[0]), abs=1e-9)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        a = uniform_cloud(rng, 32)
        b = uniform_cloud(rng, 32)
        grad = gradient_wrt_points(a, b, TIGHT)
        h = 1e-4
        worst = 0.0
        for i in range(a.n):
            for k in range(2):
                for sign in (1.0,):
                    pts = a.points.copy()
                    pts[i, k] += h
                    up = sinkhorn_divergence(PointCloud.from_points(pts), b, TIGHT).cost
                    pts[i, k] -= 2 * h
                    dn = sinkhorn_divergence(PointCloud.from_points(pts), b, TIGHT).cost
                    fd = (up - dn) / (2 * h)
                    worst = max(worst, abs(grad[i, k] - fd) / max(abs(fd), 1e-8))
        assert worst <= 1e-3

    def test_stale_gradient_refused(self):
        rng = np.random.default_rng(14)
        a, b = uniform_cloud(rng, 24), uniform_cloud(rng, 24)
        with pytest.raises(NotConvergedError):
            gradient_wrt_points(a, b, SinkhornConfig(blur=0.01, max_iters=2))

    def test_divergence_and_grad_consistent_with_value(self):
        rng = np.random.default_rng(15)
        a, b = uniform_cloud(rng, 20), uniform_cloud(rng, 20)
        cfg = SinkhornConfig(blur=0.1, max_iters=5000, tol=1e-10)
        res1 = sinkhorn_divergence(a, b, cfg)
        res2, _ = divergence_and_grad(a, b, cfg)
        assert res1.cost == pytest.approx(res2.cost, abs=1e-14)
