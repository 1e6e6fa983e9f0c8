import math

import numpy as np
import pytest

from byzant.oracle import finite_diff_grad
from byzant.problems import ProblemFamily, build_problem, shard_loss
from byzant.trial import (
    build_trial_set,
    fit_loglog_slope,
    predict,
    trial_grad,
    trial_loss,
    trial_loss_many,
    zeta_curve,
)


def direct_sum_loss(ts, x):
    """Independent oracle: naive per-sample summation of f_1(x, xi_j)."""
    return math.fsum(shard_loss(ts.shard, x) + float(xi @ x) for xi in ts.samples) / ts.n_samples


class TestBuildTrialSet:
    def test_zero_noise_trial_equals_local_objective(self):
        fam = ProblemFamily(kind="quadratic", d=4, L=2.0, mu=0.5)
        shards, _ = build_problem(fam, 2, seed=3)
        rng = np.random.default_rng(0)
        for n in (1, 10, 100):
            ts = build_trial_set(shards[0], n, seed=3)
            for _ in range(3):
                x = rng.normal(size=4)
                assert trial_loss(ts, x) == shard_loss(shards[0], x)

    def test_single_sample_is_that_samples_loss(self, quad_problem):
        shards, _ = quad_problem
        ts = build_trial_set(shards[0], 1, seed=9)
        x = np.ones(shards[0].dimension)
        expected = shard_loss(shards[0], x) + float(ts.samples[0] @ x)
        assert trial_loss(ts, x) == pytest.approx(expected, rel=1e-15)

    def test_two_seeds_give_distinct_losses(self, logistic_problem):
        shards, _ = logistic_problem
        a = build_trial_set(shards[0], 100, seed=1)
        b = build_trial_set(shards[0], 100, seed=2)
        x0 = np.ones(shards[0].dimension)
        assert trial_loss(a, x0) != trial_loss(b, x0)

    def test_rebuild_is_bit_identical(self, quad_problem):
        shards, _ = quad_problem
        a = build_trial_set(shards[0], 50, seed=4)
        b = build_trial_set(shards[0], 50, seed=4)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.probes, b.probes)

    def test_zero_samples_rejected(self, quad_problem):
        shards, _ = quad_problem
        with pytest.raises(ValueError, match=">= 1"):
            build_trial_set(shards[0], 0, seed=4)


class TestTrialEvaluation:
    def test_grad_vanishes_at_empirical_center(self):
        fam = ProblemFamily(kind="quadratic", d=5, L=3.0, mu=1.0, sigma=1.0)
        shards, _ = build_problem(fam, 2, seed=12)
        s = shards[0]
        ts = build_trial_set(s, 64, seed=12)
        center = s.center - np.linalg.solve(s.hessian, ts.xi_mean)
        assert np.linalg.norm(trial_grad(ts, center)) <= 1e-10

    def test_losses_ordered_like_direct_summation(self, quad_trial, rng):
        d = quad_trial.shard.dimension
        for _ in range(10):
            x, y = rng.normal(size=d), rng.normal(size=d)
            cached = trial_loss(quad_trial, x) - trial_loss(quad_trial, y)
            direct = direct_sum_loss(quad_trial, x) - direct_sum_loss(quad_trial, y)
            assert math.copysign(1, cached) == math.copysign(1, direct)

    def test_finite_sum_identity_against_direct_summation(self, quad_trial, rng):
        x = rng.normal(size=quad_trial.shard.dimension)
        assert trial_loss(quad_trial, x) == pytest.approx(direct_sum_loss(quad_trial, x), rel=1e-12)

    def test_grad_matches_finite_differences(self, quad_trial, rng):
        d = quad_trial.shard.dimension
        for _ in range(3):
            x = rng.normal(size=d)
            fd = finite_diff_grad(lambda v: trial_loss(quad_trial, v), x, 1e-5)
            g = trial_grad(quad_trial, x)
            assert np.linalg.norm(fd - g) <= 1e-5 * max(1.0, np.linalg.norm(g))

    def test_batch_matches_scalar_evaluation(self, quad_trial, rng):
        xs = rng.normal(size=(7, quad_trial.shard.dimension))
        batch = trial_loss_many(quad_trial, xs)
        for k in range(7):
            assert batch[k] == pytest.approx(trial_loss(quad_trial, xs[k]), rel=1e-14)

    def test_smoothness_inherited(self, quad_problem, rng):
        shards, _ = quad_problem
        ts = build_trial_set(shards[0], 32, seed=8)
        lip = 10.0  # family smoothness
        for _ in range(100):
            x, y = rng.normal(size=10), rng.normal(size=10)
            lhs = np.linalg.norm(trial_grad(ts, x) - trial_grad(ts, y))
            assert lhs <= 1.01 * lip * np.linalg.norm(x - y)

    def test_predict_shapes_and_ranges(self, quad_trial, logistic_problem):
        out = predict(quad_trial, np.ones(quad_trial.shard.dimension))
        assert out.shape == (quad_trial.probes.shape[0],)
        shards, _ = logistic_problem
        lts = build_trial_set(shards[0], 16, seed=2)
        probs = predict(lts, np.ones(shards[0].dimension))
        assert np.all((probs >= 0) & (probs <= 1))


class TestZetaCurve:
    def test_zero_noise_curve_is_zero(self):
        fam = ProblemFamily(kind="quadratic", d=4, L=2.0, mu=0.5)
        shards, _ = build_problem(fam, 2, seed=3)
        probes = [np.zeros(4), np.ones(4)]
        table = zeta_curve(shards[0], probes, [10, 20, 50, 100], repetitions=20, seed=3)
        assert all(v == 0.0 for _, v in table)

    def test_doubling_n_roughly_halves_and_slope_in_band(self):
        fam = ProblemFamily(kind="quadratic", d=8, L=4.0, mu=1.0, sigma=1.0)
        shards, _ = build_problem(fam, 2, seed=17)
        rng = np.random.default_rng(17)
        probes = [rng.normal(size=8) for _ in range(3)]
        table = zeta_curve(shards[0], probes, [50, 100, 200, 400, 800], repetitions=20, seed=17)
        values = dict(table)
        assert 0.3 <= values[100] / values[50] <= 0.8
        assert -1.4 <= fit_loglog_slope(table) <= -0.6

    def test_more_repetitions_reduce_spread_across_seeds(self):
        fam = ProblemFamily(kind="quadratic", d=6, L=4.0, mu=1.0, sigma=1.0)
        shards, _ = build_problem(fam, 2, seed=23)
        probes = [np.ones(6)]
        n_values = [40, 80, 160, 400]

        def largest_n_value(reps, seed):
            return dict(zeta_curve(shards[0], probes, n_values, reps, seed))[400]

        lo = [largest_n_value(1, s) for s in range(10)]
        hi = [largest_n_value(50, s) for s in range(10)]
        assert np.std(hi) < np.std(lo)

    def test_preconditions(self, quad_problem):
        shards, _ = quad_problem
        probes = [np.zeros(10)]
        with pytest.raises(ValueError, match="4 distinct"):
            zeta_curve(shards[0], probes, [10, 20, 100], 20, seed=1)
        with pytest.raises(ValueError, match="decade"):
            zeta_curve(shards[0], probes, [10, 20, 40, 80], 20, seed=1)
        with pytest.raises(ValueError, match="repetition"):
            zeta_curve(shards[0], probes, [10, 20, 50, 100], 0, seed=1)
