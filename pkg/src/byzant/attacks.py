"""Byzantine behaviors against the omniscient-adversary interface.

Attackers see the full snapshot of honest gradients for the round before
producing their own message; the engine materializes that snapshot first,
so every attack here is a pure function of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional

import numpy as np

from .aggregation import coordinate_mean
from .problems import WorkerShard, flip_labels, honest_gradient
from .rng import TAG_BYZANTINE, stream

ATTACK_KINDS = ("label-flip", "sign-flip", "random-gradient", "ipm", "alie")
SCHEDULE_POLICIES = ("static", "resample-per-round")


@dataclass(frozen=True)
class AttackSpec:
    """One Byzantine behavior plus its parameters.

    ``fraction_pct`` is the Byzantine share in percent, matching the usual
    attack naming convention ("IPM (80%)").
    """

    kind: str
    fraction_pct: float = 0.0
    kappa: float = 0.5
    sigma_a: float = 1.0
    z: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not 0.0 <= self.fraction_pct < 100.0:
            raise ValueError(f"byzantine fraction must lie in [0, 100), got {self.fraction_pct}")
        if self.kind == "ipm" and self.kappa <= 0:
            raise ValueError(f"ipm scale kappa must be positive, got {self.kappa}")
        if self.kind == "random-gradient" and self.sigma_a <= 0:
            raise ValueError(f"random-gradient scale must be positive, got {self.sigma_a}")


def alie_quantile_scale(n: int, n_byz: int) -> float:
    """Deviation scale derived from the normal quantile of the honest split.

    With s = floor(n/2 + 1) - n_byz honest workers left to outvote, the
    largest deviation that still blends into the honest cloud is
    ``z = Phi^-1((n - n_byz - s) / (n - n_byz))``.  Only defined while the
    Byzantines are a minority; falls back to 1.0 otherwise.
    """
    honest = n - n_byz
    s = n // 2 + 1 - n_byz
    if honest <= 0 or s <= 0 or s >= honest:
        return 1.0
    return NormalDist().inv_cdf((honest - s) / honest)


def apply_attack(
    spec: AttackSpec,
    honest_grads: np.ndarray,
    own_grad: Optional[np.ndarray],
    shard: WorkerShard,
    x: np.ndarray,
    gen: np.random.Generator,
) -> np.ndarray:
    """Produce the Byzantine message for one worker.

    ``honest_grads`` is the omniscient snapshot (one row per active honest
    worker); for label flipping ``gen`` must be the worker's own gradient
    stream so the flipped recomputation reuses its minibatch randomness.
    """
    honest_grads = np.asarray(honest_grads, dtype=float)
    if spec.kind == "sign-flip":
        return -np.asarray(own_grad, dtype=float)
    if spec.kind == "label-flip":
        return honest_gradient(flip_labels(shard), x, gen)
    if spec.kind == "random-gradient":
        return gen.normal(0.0, spec.sigma_a, size=np.asarray(x).shape[0])
    if honest_grads.shape[0] == 0:
        raise ValueError(f"{spec.kind} requires at least one honest gradient in the snapshot")
    if spec.kind == "ipm":
        return -spec.kappa * coordinate_mean(honest_grads)
    # alie: coordinate-wise mean minus z * population standard deviation
    mu = coordinate_mean(honest_grads)
    var = np.array(
        [
            math.fsum((honest_grads[i, j] - mu[j]) ** 2 for i in range(honest_grads.shape[0]))
            / honest_grads.shape[0]
            for j in range(honest_grads.shape[1])
        ]
    )
    return mu - spec.z * np.sqrt(var)


@dataclass(frozen=True)
class ByzantineSchedule:
    """Per-round Byzantine membership; worker 1 (the server) is never in it."""

    n: int
    count: int
    policy: str
    seed: int
    _static: tuple = ()

    def members(self, t: int) -> frozenset:
        if self.count == 0:
            return frozenset()
        if self.policy == "static":
            return frozenset(self._static)
        gen = stream(self.seed, worker=0, round_=t, tag=TAG_BYZANTINE)
        return frozenset(int(w) for w in gen.choice(np.arange(2, self.n + 1), size=self.count, replace=False))


def byzantine_schedule(n: int, fraction_pct: float, policy: str, seed: int) -> ByzantineSchedule:
    """Build the round-indexed Byzantine membership schedule."""
    if policy not in SCHEDULE_POLICIES:
        raise ValueError(f"unknown schedule policy {policy!r}; expected one of {SCHEDULE_POLICIES}")
    count = int(n * fraction_pct / 100.0 + 0.5)
    if count >= n:
        raise ValueError(
            f"byzantine fraction {fraction_pct}% leaves no honest worker out of {n}"
        )
    static: tuple = ()
    if count > 0 and policy == "static":
        gen = stream(seed, worker=0, round_=0, tag=TAG_BYZANTINE)
        static = tuple(int(w) for w in gen.choice(np.arange(2, n + 1), size=count, replace=False))
    return ByzantineSchedule(n=n, count=count, policy=policy, seed=seed, _static=static)
