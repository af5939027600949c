import heapq
import itertools
import math

import numpy as np
import pytest

from ifslab.errors import (
    CertificationError,
    ConfigError,
    InstabilityError,
    UnsupportedInstanceError,
)
from ifslab.geometry import PointCloud, hausdorff_distance
from ifslab.ifs_core import (
    AffineBranch,
    CallableBranch,
    ConstantSelector,
    StochasticIFS,
    barycentric_map,
    cantor_ifs,
    certification_record,
    certify_average_contraction,
    collage_bound,
    half_double_ifs,
    hutchinson_iterates,
    hutchinson_step,
    lyapunov_exponent_mc,
    markov_step,
    sample_attractor,
    sierpinski_ifs,
    transfer_step,
)
from ifslab.ot import exact_w2

SIERPINSKI_VERTS = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]])


def gasket_distance_bound(p, depth=24):
    """Branch-and-bound distance from p to the Sierpinski gasket.

    Cells at level d are balls of radius R/2^d around their centroids; the
    returned value is within R/2^depth of the true distance.
    """
    center = SIERPINSKI_VERTS.mean(axis=0)
    radius = float(np.linalg.norm(SIERPINSKI_VERTS[0] - center))
    best = math.inf
    heap = [(max(0.0, np.linalg.norm(p - center) - radius), 0, tuple(center))]
    while heap:
        bound, level, c = heapq.heappop(heap)
        if bound >= best:
            break
        c = np.asarray(c)
        if level == depth:
            best = min(best, float(np.linalg.norm(p - c)))
            continue
        r_child = radius / 2 ** (level + 1)
        for v in SIERPINSKI_VERTS:
            child = (c + v) / 2.0
            lb = max(0.0, float(np.linalg.norm(p - child)) - r_child)
            if lb < best:
                heapq.heappush(heap, (lb, level + 1, tuple(child)))
    return best + radius / 2 ** depth


class TestHutchinson:
    def test_sierpinski_image_of_vertex(self):
        K = PointCloud.from_points([[0.0, 0.0]])
        out = hutchinson_step(sierpinski_ifs(), K)
        got = {tuple(np.round(p, 9)) for p in out.points}
        assert (0.0, 0.0) in got and (0.5, 0.0) in got
        assert len(got) == 3

    def test_identity_branch_preserves_set(self):
        ident = StochasticIFS([AffineBranch(np.eye(2), np.zeros(2))],
                              ConstantSelector(np.zeros(1)), dim=2)
        K = PointCloud.from_points(np.random.default_rng(0).random((12, 2)))
        out = hutchinson_step(ident, K)
        assert hausdorff_distance(out, K) == 0.0

    def test_cantor_iterates_match_ternary_oracle(self):
        iterates = hutchinson_iterates(cantor_ifs(), PointCloud.from_points([[0.0], [1.0]]), 8)
        # oracle: all sums of digits in {0, 2} over 8 ternary places, plus an
        # endpoint offset of 0 or 3^-8
        lefts = [sum(d * 3.0 ** -(k + 1) for k, d in enumerate(digits))
                 for digits in itertools.product((0.0, 2.0), repeat=8)]
        oracle = sorted({v + e for v in lefts for e in (0.0, 3.0 ** -8)})
        got = PointCloud.from_points(np.asarray(sorted(iterates[8].points.ravel()))[:, None])
        want = PointCloud.from_points(np.asarray(oracle)[:, None])
        assert hausdorff_distance(got, want) <= 1e-9

    def test_cantor_iterate_contraction(self):
        iterates = hutchinson_iterates(cantor_ifs(), PointCloud.from_points([[0.0], [1.0]]), 4)
        d23 = hausdorff_distance(iterates[2], iterates[3])
        d34 = hausdorff_distance(iterates[3], iterates[4])
        assert d34 <= d23 / 3.0 + 1e-12

    def test_hutchinson_contraction_on_random_compacts(self):
        rng = np.random.default_rng(5)
        for ifs, c in ((cantor_ifs(), 1.0 / 3.0), (sierpinski_ifs(), 0.5)):
            d = ifs.dim
            for _ in range(20):
                K1 = PointCloud.from_points(rng.random((rng.integers(2, 30), d)))
                K2 = PointCloud.from_points(rng.random((rng.integers(2, 30), d)))
                lhs = hausdorff_distance(hutchinson_step(ifs, K1, cap=None),
                                         hutchinson_step(ifs, K2, cap=None))
                assert lhs <= c * hausdorff_distance(K1, K2) + 1e-9

    def test_cap_subsamples_deterministically(self):
        K = PointCloud.from_points(np.random.default_rng(1).random((30, 2)))
        a = hutchinson_step(sierpinski_ifs(), K, cap=40, rng=np.random.default_rng(9))
        b = hutchinson_step(sierpinski_ifs(), K, cap=40, rng=np.random.default_rng(9))
        assert a.n == 40 and np.array_equal(a.points, b.points)

    def test_cap_below_input_size_rejected(self):
        K = PointCloud.from_points(np.random.default_rng(2).random((10, 2)))
        with pytest.raises(ConfigError):
            hutchinson_step(sierpinski_ifs(), K, cap=5)

    def test_lazy_families_cannot_iterate_sets(self):
        lazy = StochasticIFS(None, ConstantSelector(np.zeros(1)), dim=1,
                             selected_apply=lambda X, i: X)
        with pytest.raises(UnsupportedInstanceError):
            hutchinson_step(lazy, PointCloud.from_points([[0.0]]))


class TestMarkovStep:
    def test_degenerate_categorical(self):
        ifs = StochasticIFS(
            [AffineBranch([[0.5]], [0.0]), AffineBranch([[2.0]], [0.0])],
            ConstantSelector(np.array([50.0, 0.0])), dim=1)
        rng = np.random.default_rng(0)
        for _ in range(50):
            _, idx = markov_step(ifs, np.array([1.0]), rng)
            assert idx == 0

    def test_half_double_contracts_with_high_probability(self):
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng([seed, 17])
            x = np.array([1.0])
            ifs = half_double_ifs(0.6)
            for _ in range(10_000):
                x, _ = markov_step(ifs, x, rng)
                if abs(x[0]) > 1e290:  # overflow guard, counts as a miss
                    break
            if abs(x[0]) < 1e-3:
                hits += 1
        assert hits >= 99

    def test_branch_frequencies_multinomial(self):
        logits = np.log(np.array([0.5, 0.3, 0.2]))
        ifs = StochasticIFS([AffineBranch([[0.1]], [float(k)]) for k in range(3)],
                            ConstantSelector(logits), dim=1)
        rng = np.random.default_rng(3)
        n = 100_000
        counts = np.zeros(3)
        x = np.zeros(1)
        for _ in range(n):
            x, idx = markov_step(ifs, np.zeros(1), rng)
            counts[idx] += 1
        p = np.array([0.5, 0.3, 0.2])
        band = 3.0 * np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= band)

    def test_noise_added_after_branch(self):
        ifs = StochasticIFS([AffineBranch(np.eye(1), np.zeros(1))],
                            ConstantSelector(np.zeros(1)), noise_sigma=0.5, dim=1)
        rng = np.random.default_rng(4)
        ys = np.array([markov_step(ifs, np.zeros(1), rng)[0][0] for _ in range(4000)])
        assert abs(ys.std() - 0.5) < 0.02


class TestTransferStep:
    def test_identity_fixed_point(self):
        ident = StochasticIFS([AffineBranch(np.eye(2), np.zeros(2))],
                              ConstantSelector(np.zeros(1)), dim=2)
        mu = PointCloud.from_points(np.random.default_rng(0).random((20, 2)))
        out = transfer_step(ident, mu, np.random.default_rng(1))
        assert np.array_equal(out.points, mu.points)
        assert np.array_equal(out.weights, mu.weights)

    def test_outputs_live_on_branch_images(self):
        ifs = half_double_ifs(0.6)
        mu = PointCloud.from_points([[1.0], [3.0]])
        out = transfer_step(ifs, mu, np.random.default_rng(2))
        for x, y in zip(mu.points.ravel(), out.points.ravel()):
            assert min(abs(y - x / 2), abs(y - 2 * x)) < 1e-12

    def test_w2_contraction_of_sampled_pushforward(self):
        rng = np.random.default_rng(7)
        c = 0.5
        maps = []
        for _ in range(3):
            M = rng.standard_normal((2, 2))
            M *= c / np.linalg.norm(M, 2)
            maps.append(AffineBranch(M, rng.standard_normal(2)))
        ifs = StochasticIFS(maps, ConstantSelector(np.zeros(3)), dim=2)
        ratios = []
        for seed in range(10):
            r = np.random.default_rng([seed, 5])
            mu = PointCloud.from_points(2 * r.standard_normal((64, 2)))
            nu = PointCloud.from_points(2 * r.standard_normal((64, 2)) + 1.0)
            base = exact_w2(mu, nu).value
            step = exact_w2(transfer_step(ifs, mu, r), transfer_step(ifs, nu, r)).value
            ratios.append((step, base))
        mean_step = np.mean([s for s, _ in ratios])
        mean_base = np.mean([b for _, b in ratios])
        assert mean_step <= c * mean_base + 0.05


class TestSampleAttractor:
    def test_single_contraction_fixed_point(self):
        ifs = StochasticIFS([AffineBranch([[0.5]], [1.0])],
                            ConstantSelector(np.zeros(1)), dim=1)
        att = sample_attractor(ifs, 200, 50, np.random.default_rng(0))
        assert np.abs(att.points - 2.0).max() <= 1e-3

    def test_sierpinski_samples_lie_on_gasket(self):
        att = sample_attractor(sierpinski_ifs(), 2000, 200, np.random.default_rng(1))
        worst = max(gasket_distance_bound(p) for p in att.points)
        assert worst <= 1e-6

    def test_half_double_concentrates_at_zero(self):
        att = sample_attractor(half_double_ifs(0.6), 400, 3000,
                               np.random.default_rng(2), allow_uncertified=True)
        assert np.median(np.abs(att.points)) < 1e-2

    def test_divergence_guard(self):
        expanding = StochasticIFS([AffineBranch([[3.0]], [0.0])],
                                  ConstantSelector(np.zeros(1)), dim=1)
        with pytest.raises(InstabilityError):
            sample_attractor(expanding, 10, 200, np.random.default_rng(3),
                             allow_uncertified=True)

    def test_uncertified_refused_without_flag(self):
        with pytest.raises(CertificationError):
            sample_attractor(half_double_ifs(0.6), 10, 10, np.random.default_rng(4))

    def test_attractor_support_matches_hutchinson_fixed_point(self):
        ifs = sierpinski_ifs()
        att = sample_attractor(ifs, 5000, 200, np.random.default_rng([0, 11]))
        t10 = hutchinson_iterates(ifs, PointCloud.from_points([[0.0, 0.0]]), 10)[-1]
        assert hausdorff_distance(att, t10) <= 0.02


class TestCertification:
    def test_uniform_half_maps(self):
        ifs = sierpinski_ifs()
        estimate, ok = certify_average_contraction(ifs)
        assert estimate == pytest.approx(0.25, abs=1e-12)
        assert ok

    def test_half_double_not_certified(self):
        estimate, ok = certify_average_contraction(half_double_ifs(0.6))
        assert estimate == pytest.approx(0.6 * 0.25 + 0.4 * 4.0, abs=1e-12)
        assert not ok

    def test_first_power_variant(self):
        estimate, ok = certify_average_contraction(half_double_ifs(0.6), power=1)
        assert estimate == pytest.approx(0.6 * 0.5 + 0.4 * 2.0, abs=1e-12)
        assert not ok

    def test_shared_certificate(self):
        branches = [CallableBranch(lambda x: 0.9 * x, lipschitz_cert=0.9) for _ in range(4)]
        ifs = StochasticIFS(branches, ConstantSelector(np.random.default_rng(0).random(4)),
                            dim=2)
        estimate, ok = certify_average_contraction(ifs)
        assert estimate == pytest.approx(0.81, abs=1e-12)
        assert ok

    def test_missing_certificate(self):
        ifs = StochasticIFS([CallableBranch(lambda x: x)], ConstantSelector(np.zeros(1)),
                            dim=1)
        with pytest.raises(CertificationError):
            certify_average_contraction(ifs)

    def test_record_is_one_line_json(self):
        import json

        rec = certification_record(sierpinski_ifs())
        assert "\n" not in rec
        parsed = json.loads(rec)
        assert parsed["certified"] is True
        assert set(parsed) == {"sup_estimate", "certified", "probe_size"}


class TestCollageBound:
    def test_arithmetic(self):
        assert collage_bound(0.1, 0.5).bound == pytest.approx(0.2, abs=1e-15)
        assert collage_bound(0.0, 0.7).bound == 0.0
        assert collage_bound(0.05, 0.9).bound == pytest.approx(0.5, abs=1e-15)

    def test_domain_errors(self):
        with pytest.raises(ConfigError):
            collage_bound(0.1, 1.0)
        with pytest.raises(ConfigError):
            collage_bound(-0.1, 0.5)

    def test_banach_iteration_rate(self):
        # single contraction w(x) = c x + b: d(x_n, fix) <= c^n/(1-c) d(x1, x0)
        c, b = 0.6, 0.8
        fix = b / (1 - c)
        x = 5.0
        d10 = abs((c * x + b) - x)
        xn = x
        for n in range(1, 30):
            xn = c * xn + b
            assert abs(xn - fix) <= c ** n / (1 - c) * d10 + 1e-12


class TestLyapunov:
    def test_half_double_mc_matches_formula(self):
        got = lyapunov_exponent_mc(half_double_ifs(0.6), 100_000,
                                   np.random.default_rng([1, 2]))
        assert got == pytest.approx((1 - 2 * 0.6) * math.log(2.0), abs=0.01)

    def test_symmetric_p_is_zero(self):
        got = lyapunov_exponent_mc(half_double_ifs(0.5), 100_000,
                                   np.random.default_rng([3, 4]))
        assert abs(got) <= 0.01

    def test_single_branch_deterministic(self):
        ifs = StochasticIFS([AffineBranch([[0.5]], [0.0])], ConstantSelector(np.zeros(1)),
                            dim=1)
        assert lyapunov_exponent_mc(ifs, 10, np.random.default_rng(0)) == pytest.approx(
            math.log(0.5), abs=1e-12)

    def test_zero_certificate_sentinel(self):
        ifs = StochasticIFS([CallableBranch(lambda x: 0 * x, lipschitz_cert=0.0)],
                            ConstantSelector(np.zeros(1)), dim=1)
        assert lyapunov_exponent_mc(ifs, 10, np.random.default_rng(0)) == -math.inf


class TestBarycentric:
    def test_half_double_slope(self):
        np.testing.assert_allclose(
            barycentric_map(half_double_ifs(0.6), np.array([1.0])), [1.1], atol=1e-12)

    def test_two_expert_average_is_identity(self):
        branches = [CallableBranch(lambda x: 0.0 * x), CallableBranch(lambda x: 2.0 * x)]
        ifs = StochasticIFS(branches, ConstantSelector(np.zeros(2)), dim=2)
        x = np.array([0.3, -1.2])
        np.testing.assert_allclose(barycentric_map(ifs, x), x, atol=1e-15)

    def test_mc_mean_of_markov_matches(self):
        ifs = half_double_ifs(0.6)
        rng = np.random.default_rng(8)
        x = np.array([1.0])
        draws = np.array([markov_step(ifs, x, rng)[0][0] for _ in range(100_000)])
        se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - 1.1) <= 3 * se

    def test_dichotomy_expanding_mean_vs_contracting_paths(self):
        # the barycentric iteration blows up while samples collapse to zero
        ifs = half_double_ifs(0.6)
        x = np.array([1.0])
        steps = 0
        while abs(x[0]) <= 1e3:
            x = barycentric_map(ifs, x)
            steps += 1
            assert steps <= 80
        att = sample_attractor(ifs, 256, 2000, np.random.default_rng(6),
                               allow_uncertified=True)
        assert np.median(np.abs(att.points)) < 1e-2
