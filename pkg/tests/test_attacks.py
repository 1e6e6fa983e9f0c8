import math

import numpy as np
import pytest

from byzant.aggregation import coordinate_mean
from byzant.attacks import (
    AttackSpec,
    alie_quantile_scale,
    apply_attack,
    byzantine_schedule,
)
from byzant.oracle import finite_diff_grad
from byzant.problems import (
    ProblemFamily,
    build_problem,
    flip_labels,
    shard_gradient,
    shard_loss,
)
from byzant.rng import TAG_ATTACK, TAG_GRAD, stream


@pytest.fixture(scope="module")
def shard():
    fam = ProblemFamily(kind="logistic", d=5, L=3.0, mu=0.1)
    shards, _ = build_problem(fam, 3, seed=61)
    return shards[1]


def attack_gen(seed=0, worker=2, t=0):
    return stream(seed, worker=worker, round_=t, tag=TAG_ATTACK)


class TestApplyAttack:
    def test_ipm_is_scaled_negated_mean_exactly(self, shard, rng):
        g = rng.normal(size=5)
        honest = np.stack([g, g])
        spec = AttackSpec(kind="ipm", fraction_pct=50.0, kappa=0.5)
        out = apply_attack(spec, honest, None, shard, np.zeros(5), attack_gen())
        np.testing.assert_array_equal(out, -0.5 * g)

    def test_sign_flip_of_zero_is_zero(self, shard):
        spec = AttackSpec(kind="sign-flip", fraction_pct=10.0)
        out = apply_attack(spec, np.zeros((1, 5)), np.zeros(5), shard, np.zeros(5), attack_gen())
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_alie_with_identical_gradients_returns_common_gradient(self, shard, rng):
        g = rng.normal(size=5)
        honest = np.tile(g, (4, 1))
        for z in (0.5, 1.0, 3.0):
            spec = AttackSpec(kind="alie", fraction_pct=10.0, z=z)
            out = apply_attack(spec, honest, None, shard, np.zeros(5), attack_gen())
            np.testing.assert_array_equal(out, g)

    def test_alie_hand_case_population_std(self, shard):
        honest = np.array([[0.0], [2.0]])
        spec = AttackSpec(kind="alie", fraction_pct=10.0, z=1.0)
        fake = ProblemFamily(kind="quadratic", d=1, L=1.0, mu=1.0)
        shards, _ = build_problem(fake, 2, seed=1)
        out = apply_attack(spec, honest, None, shards[0], np.zeros(1), attack_gen())
        assert out[0] == 0.0  # mu=1, population std=1

    def test_alie_permutation_invariance_exact(self, shard, rng):
        honest = rng.normal(size=(6, 5))
        spec = AttackSpec(kind="alie", fraction_pct=10.0, z=1.3)
        base = apply_attack(spec, honest, None, shard, np.zeros(5), attack_gen())
        for _ in range(10):
            perm = rng.permutation(6)
            out = apply_attack(spec, honest[perm], None, shard, np.zeros(5), attack_gen())
            np.testing.assert_array_equal(out, base)

    def test_exact_equalities_fuzz(self, shard, rng):
        ipm = AttackSpec(kind="ipm", fraction_pct=10.0, kappa=0.5)
        flip = AttackSpec(kind="sign-flip", fraction_pct=10.0)
        x = np.zeros(5)
        for _ in range(1000):
            honest = rng.normal(size=(rng.integers(1, 6), 5)) * rng.uniform(0.01, 100)
            own = rng.normal(size=5)
            out_ipm = apply_attack(ipm, honest, own, shard, x, attack_gen())
            np.testing.assert_array_equal(out_ipm, -0.5 * coordinate_mean(honest))
            out_flip = apply_attack(flip, honest, own, shard, x, attack_gen())
            np.testing.assert_array_equal(out_flip, -own)

    def test_random_gradient_scale_and_determinism(self, shard):
        spec = AttackSpec(kind="random-gradient", fraction_pct=10.0, sigma_a=3.0)
        a = apply_attack(spec, np.zeros((1, 5)), None, shard, np.zeros(5), attack_gen(seed=4))
        b = apply_attack(spec, np.zeros((1, 5)), None, shard, np.zeros(5), attack_gen(seed=4))
        np.testing.assert_array_equal(a, b)
        draws = np.stack(
            [
                apply_attack(spec, np.zeros((1, 5)), None, shard, np.zeros(5), attack_gen(seed=4, t=t))
                for t in range(2000)
            ]
        )
        assert np.std(draws) == pytest.approx(3.0, rel=0.05)

    def test_label_flip_matches_independent_loss_then_gradient(self):
        fam = ProblemFamily(kind="logistic", d=4, L=2.0, mu=0.1)
        shards, _ = build_problem(fam, 2, seed=71)
        s = shards[1]
        x = np.array([0.2, -0.4, 0.1, 0.3])
        spec = AttackSpec(kind="label-flip", fraction_pct=10.0)
        out = apply_attack(spec, np.zeros((1, 4)), None, s, x, stream(71, 2, 0, TAG_GRAD))
        fd = finite_diff_grad(lambda v: shard_loss(flip_labels(s), v), x, 1e-6)
        assert np.linalg.norm(out - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))

    def test_label_flip_on_quadratic_negates_residual_part(self):
        fam = ProblemFamily(kind="quadratic", d=3, L=2.0, mu=0.5)
        shards, _ = build_problem(fam, 2, seed=5)
        s = shards[1]
        x = np.ones(3)
        spec = AttackSpec(kind="label-flip", fraction_pct=10.0)
        out = apply_attack(spec, np.zeros((1, 3)), None, s, x, stream(5, 2, 0, TAG_GRAD))
        np.testing.assert_array_equal(out, -shard_gradient(s, x))

    def test_omniscient_attacks_need_honest_snapshot(self, shard):
        for kind in ("ipm", "alie"):
            spec = AttackSpec(kind=kind, fraction_pct=10.0)
            with pytest.raises(ValueError, match="honest gradient"):
                apply_attack(spec, np.zeros((0, 5)), None, shard, np.zeros(5), attack_gen())


class TestAttackSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown attack kind"):
            AttackSpec(kind="gaussian", fraction_pct=10.0)

    def test_full_byzantine_fraction_rejected(self):
        with pytest.raises(ValueError, match="fraction"):
            AttackSpec(kind="ipm", fraction_pct=100.0)

    def test_quantile_scale_matches_normal_quantile(self):
        # n=10, 4 byzantine: s=2, z = Phi^-1(4/6)
        from statistics import NormalDist

        assert alie_quantile_scale(10, 4) == pytest.approx(NormalDist().inv_cdf(2 / 3))
        assert alie_quantile_scale(10, 6) == 1.0  # majority: fallback


class TestByzantineSchedule:
    def test_zero_fraction_is_empty(self):
        sched = byzantine_schedule(8, 0.0, "static", seed=1)
        assert all(sched.members(t) == frozenset() for t in range(20))

    def test_static_sixty_percent_of_ten(self):
        sched = byzantine_schedule(10, 60.0, "static", seed=3)
        members = sched.members(0)
        assert len(members) == 6
        assert 1 not in members
        assert all(sched.members(t) == members for t in range(50))

    def test_resample_is_reproducible_and_varies(self):
        a = byzantine_schedule(10, 40.0, "resample-per-round", seed=9)
        b = byzantine_schedule(10, 40.0, "resample-per-round", seed=9)
        sets = [a.members(t) for t in range(20)]
        assert sets == [b.members(t) for t in range(20)]
        assert len(set(sets)) > 1
        assert all(1 not in s and len(s) == 4 for s in sets)

    def test_fraction_leaving_no_honest_rejected(self):
        with pytest.raises(ValueError, match="no honest"):
            byzantine_schedule(4, 90.0, "static", seed=1)

    def test_unknown_policy(self):
        with pytest.raises(ValueError, match="policy"):
            byzantine_schedule(4, 10.0, "rotate", seed=1)
