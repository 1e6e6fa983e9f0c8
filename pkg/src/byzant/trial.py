"""Server-held trial function built from N delayed oracle samples.

The per-sample loss of shard 1's stochastic oracle is
``f_1(x, xi) = f_1(x) + <xi, x>`` with ``xi`` the gradient-noise draw, so
the trial function over N samples is ``fhat(x) = f_1(x) + <mean(xi), x>``.
Its gradient error versus grad f_1 is exactly the averaged noise, which
shrinks like 1/N in squared norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .problems import WorkerShard, _sigmoid, shard_gradient, shard_loss, shard_loss_many
from .rng import TAG_PROBE, TAG_TRIAL, mix_seed, stream


@dataclass(frozen=True, eq=False)
class TrialSet:
    """N oracle samples from the server shard plus cached aggregates.

    ``probes`` are fixed trial inputs used to compute model outputs for
    similarity-based weighting (predictions of a candidate parameter vector
    on server-held data).
    """

    shard: WorkerShard
    samples: np.ndarray  # (N, d) linear-loss perturbations
    xi_mean: np.ndarray  # cached per-coordinate mean of samples
    probes: np.ndarray  # (M, d) trial inputs for model outputs

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


def build_trial_set(shard: WorkerShard, n: int, seed: int, probes: int = 32) -> TrialSet:
    """Draw N i.i.d. oracle samples from the server shard's distribution."""
    if n < 1:
        raise ValueError(f"trial sample count must be >= 1, got {n}")
    d = shard.dimension
    gen = stream(seed, worker=shard.worker_id, round_=0, tag=TAG_TRIAL)
    if shard.sigma > 0:
        samples = gen.normal(0.0, shard.sigma / math.sqrt(d), size=(n, d))
    else:
        samples = np.zeros((n, d))
    pgen = stream(seed, worker=shard.worker_id, round_=0, tag=TAG_PROBE)
    probe_mat = pgen.normal(size=(probes, d))
    return TrialSet(shard=shard, samples=samples, xi_mean=samples.mean(axis=0), probes=probe_mat)


def trial_loss(ts: TrialSet, x: np.ndarray) -> float:
    return shard_loss(ts.shard, x) + float(ts.xi_mean @ np.asarray(x, dtype=float))


def trial_loss_many(ts: TrialSet, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    return shard_loss_many(ts.shard, xs) + xs @ ts.xi_mean


def trial_grad(ts: TrialSet, x: np.ndarray) -> np.ndarray:
    return shard_gradient(ts.shard, x) + ts.xi_mean


def predict(ts: TrialSet, x: np.ndarray) -> np.ndarray:
    """Model outputs of parameter vector x on the trial inputs.

    Logistic shards predict probabilities in [0, 1]; quadratic-like shards
    predict linear responses.
    """
    x = np.asarray(x, dtype=float)
    if ts.shard.kind == "logistic":
        return _sigmoid(ts.probes @ x)
    return ts.probes @ x


def zeta_curve(shard: WorkerShard, probes, n_values, repetitions: int, seed: int):
    """Measure the squared gradient gap between f_1 and the trial function.

    Returns a list of ``(N, value)`` pairs where value is, for each trial
    size N, the max over probe points of the mean (over ``repetitions``
    independent trial sets) of ``||grad f_1(x) - grad fhat(x)||^2``.
    """
    n_values = [int(v) for v in n_values]
    if len(set(n_values)) < 4:
        raise ValueError("need at least 4 distinct trial sizes")
    if max(n_values) < 10 * min(n_values):
        raise ValueError("trial sizes must span at least one decade")
    if repetitions < 1:
        raise ValueError(f"need at least 1 repetition, got {repetitions}")
    probes = [np.asarray(p, dtype=float) for p in probes]
    table = []
    for n in sorted(n_values):
        acc = np.zeros(len(probes))
        for rep in range(repetitions):
            ts = build_trial_set(shard, n, mix_seed(seed, n, rep))
            for k, x in enumerate(probes):
                diff = shard_gradient(shard, x) - trial_grad(ts, x)
                acc[k] += float(diff @ diff)
        table.append((n, float(np.max(acc / repetitions))))
    return table


def fit_loglog_slope(table) -> float:
    """Least-squares slope of log(value) against log(N); zero rows dropped."""
    pts = [(n, v) for n, v in table if v > 0]
    if len(pts) < 2:
        return 0.0
    logn = np.log([p[0] for p in pts])
    logv = np.log([p[1] for p in pts])
    slope = np.polyfit(logn, logv, 1)[0]
    return float(slope)
