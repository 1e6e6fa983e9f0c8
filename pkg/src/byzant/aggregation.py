"""Defense rules: trust-score aggregators and classic robust baselines.

All functions here are pure.  Sums whose result must not depend on worker
order (normalizations, weighted steps, coordinate means) go through
``math.fsum``, which returns the correctly rounded exact sum and therefore
makes every rule permutation-equivariant bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .trial import TrialSet, predict, trial_grad, trial_loss, trial_loss_many

SIMILARITY_KINDS = ("abs-diff", "cosine")


def fsum_weighted(vectors: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    """Order-independent weighted sum of row vectors."""
    vectors = np.asarray(vectors, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    return np.array(
        [math.fsum(coeffs[i] * vectors[i, j] for i in range(len(coeffs))) for j in range(vectors.shape[1])]
    )


def coordinate_mean(vectors: np.ndarray) -> np.ndarray:
    """Order-independent per-coordinate arithmetic mean."""
    v = np.asarray(vectors, dtype=float)
    if v.shape[0] == 0:
        raise ValueError("cannot average an empty gradient set")
    return np.array([math.fsum(v[:, j]) / v.shape[0] for j in range(v.shape[1])])


@dataclass(frozen=True, eq=False)
class TrustWeights:
    """Nonnegative per-active-worker weights on the unit simplex."""

    weights: np.ndarray
    workers: Tuple[int, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(w) != len(self.workers):
            raise ValueError("weights and worker ids disagree in length")
        if np.any(w < 0):
            raise ValueError("trust weights must be nonnegative")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"trust weights must sum to 1, got {math.fsum(w)!r}")

    @classmethod
    def uniform(cls, workers: Sequence[int]) -> "TrustWeights":
        k = len(workers)
        return cls(weights=np.full(k, 1.0 / k), workers=tuple(workers))


@dataclass(frozen=True, eq=False)
class ContributionCoeffs:
    """Trial-loss decreases theta_i of each worker's candidate step."""

    theta: np.ndarray
    workers: Tuple[int, ...]

    @property
    def clipped(self) -> np.ndarray:
        return np.maximum(self.theta, 0.0)

    @property
    def all_nonpositive(self) -> bool:
        return bool(np.all(self.theta <= 0.0))


def _as_grad_matrix(grads, d: int) -> np.ndarray:
    g = np.asarray(grads, dtype=float)
    if g.ndim != 2 or g.shape[1] != d:
        raise ValueError(f"expected gradients of dimension {d}, got array of shape {g.shape}")
    return g


def _scaled(grads: np.ndarray, precond_diag: Optional[np.ndarray]) -> np.ndarray:
    return grads if precond_diag is None else grads / precond_diag[None, :]


def contribution_coeffs(
    ts: TrialSet,
    x: np.ndarray,
    grads,
    gamma: float,
    precond_diag: Optional[np.ndarray] = None,
    workers: Optional[Sequence[int]] = None,
) -> ContributionCoeffs:
    """theta_i = fhat(x) - fhat(x - gamma * step_i) per worker.

    step_i is the candidate gradient, divided by the preconditioner
    diagonal when one is given.
    """
    if gamma <= 0:
        raise ValueError(f"step size must be positive, got {gamma}")
    x = np.asarray(x, dtype=float)
    g = _as_grad_matrix(grads, x.shape[0])
    candidates = x[None, :] - gamma * _scaled(g, precond_diag)
    # evaluate x through the same batch path so a zero step gives theta == 0
    losses = trial_loss_many(ts, np.concatenate([x[None, :], candidates], axis=0))
    theta = losses[0] - losses[1:]
    ids = tuple(workers) if workers is not None else tuple(range(1, len(theta) + 1))
    return ContributionCoeffs(theta=theta, workers=ids)


def bant_weights(prev: TrustWeights, coeffs: ContributionCoeffs, beta: float) -> TrustWeights:
    """Momentum blend of previous weights with normalized clipped scores.

    Falls back to a uniform fresh term when every clipped score is zero.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"momentum beta must lie in (0, 1], got {beta}")
    clipped = coeffs.clipped
    total = math.fsum(clipped)
    if total == 0.0:
        fresh = np.full(len(clipped), 1.0 / len(clipped))
    else:
        fresh = clipped / total
    w = (1.0 - beta) * np.asarray(prev.weights, dtype=float) + beta * fresh
    return TrustWeights(weights=w, workers=prev.workers)


def bant_step(
    x: np.ndarray,
    grads,
    weights: TrustWeights,
    coeffs: ContributionCoeffs,
    gamma: float,
    precond_diag: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Weighted step over workers whose candidate strictly decreased fhat."""
    x = np.asarray(x, dtype=float)
    g = _as_grad_matrix(grads, x.shape[0])
    active = coeffs.theta > 0.0
    eff = np.where(active, np.asarray(weights.weights, dtype=float), 0.0)
    agg = fsum_weighted(g, eff)
    if precond_diag is not None:
        agg = agg / precond_diag
    return x - gamma * agg


def _simplex_descent(objective, grad_objective, k: int, eta: float, iters: int, seeds=()):
    """Exponentiated-gradient descent on the simplex, returning the best iterate.

    ``seeds`` are extra candidate weight vectors evaluated into the
    best-so-far tracker (not used as iterates).
    """
    w = np.full(k, 1.0 / k)
    best_w, best_val = w, objective(w)
    for cand in seeds:
        val = objective(cand)
        if val < best_val:
            best_w, best_val = np.asarray(cand, dtype=float), val
    for _ in range(iters):
        u = -eta * grad_objective(w)
        u -= np.max(u)
        w = w * np.exp(u)
        w = w / math.fsum(w)
        val = objective(w)
        if val < best_val:
            best_w, best_val = w, val
    return best_w, best_val


def autobant_solve(
    ts: TrialSet,
    x: np.ndarray,
    grads,
    gamma: float,
    eta: float = 1.0,
    iters: int = 60,
    precond_diag: Optional[np.ndarray] = None,
    workers: Optional[Sequence[int]] = None,
):
    """Approximately minimize fhat(x - gamma * sum_i w_i g_i) over the simplex.

    Multiplicative-weights iterations (the closed form of the KL proximal
    step), started at uniform weights; the returned weights are the best
    iterate seen, so the achieved objective never exceeds the uniform one.
    """
    if iters < 1:
        raise ValueError(f"need at least one inner iteration, got {iters}")
    if eta <= 0:
        raise ValueError(f"inner step size must be positive, got {eta}")
    x = np.asarray(x, dtype=float)
    g = _as_grad_matrix(grads, x.shape[0])
    k = g.shape[0]
    ids = tuple(workers) if workers is not None else tuple(range(1, k + 1))
    if k == 1:
        w = np.ones(1)
        return TrustWeights(weights=w, workers=ids), trial_loss(ts, x - gamma * _scaled(g, precond_diag)[0])
    s = _scaled(g, precond_diag)

    def objective(w):
        return trial_loss(ts, x - gamma * (s.T @ w))

    def grad_objective(w):
        z = x - gamma * (s.T @ w)
        return -gamma * (s @ trial_grad(ts, z))

    w, val = _simplex_descent(objective, grad_objective, k, eta, iters)
    w = np.maximum(w, 0.0)
    w = w / math.fsum(w)
    return TrustWeights(weights=w, workers=ids), float(val)


def autobant_solve_points(
    ts: TrialSet,
    points,
    eta: float = 1.0,
    iters: int = 60,
    workers: Optional[Sequence[int]] = None,
    seeds=(),
):
    """Local-rounds variant: minimize fhat(sum_i w_i p_i) over mixing weights.

    ``seeds`` are extra candidates fed to the best-so-far tracker; the
    engine passes the server's own vertex so the aggregate can never be
    worse than the server's reported point.
    """
    if iters < 1:
        raise ValueError(f"need at least one inner iteration, got {iters}")
    p = np.asarray(points, dtype=float)
    k = p.shape[0]
    ids = tuple(workers) if workers is not None else tuple(range(1, k + 1))
    if k == 1:
        return TrustWeights(weights=np.ones(1), workers=ids), float(trial_loss(ts, p[0]))

    def objective(w):
        return trial_loss(ts, p.T @ w)

    def grad_objective(w):
        return p @ trial_grad(ts, p.T @ w)

    w, val = _simplex_descent(objective, grad_objective, k, eta, iters, seeds=seeds)
    w = np.maximum(w, 0.0)
    w = w / math.fsum(w)
    return TrustWeights(weights=w, workers=ids), float(val)


def autobant_step(
    x: np.ndarray,
    grads,
    weights: TrustWeights,
    gamma: float,
    precond_diag: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Plain weighted step (no indicator)."""
    x = np.asarray(x, dtype=float)
    g = _as_grad_matrix(grads, x.shape[0])
    agg = fsum_weighted(g, np.asarray(weights.weights, dtype=float))
    if precond_diag is not None:
        agg = agg / precond_diag
    return x - gamma * agg


def similarity_scores(
    candidate_outputs: np.ndarray,
    server_output: np.ndarray,
    kind: str,
    temperature: float,
) -> np.ndarray:
    """Per-worker similarity of candidate model outputs to the server's.

    abs-diff: mean over outputs of 1 - |a - b|, clipped at zero.
    cosine: cosine of temperature-softmaxed outputs, shifted to [0, 1]
    via (1 + cos)/2 so weights stay nonnegative.
    """
    if kind not in SIMILARITY_KINDS:
        raise ValueError(f"unknown similarity kind {kind!r}; expected one of {SIMILARITY_KINDS}")
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    outs = np.asarray(candidate_outputs, dtype=float)
    srv = np.asarray(server_output, dtype=float)
    if outs.ndim != 2 or outs.shape[1] != srv.shape[0]:
        raise ValueError("candidate outputs and server output disagree in shape")
    if kind == "abs-diff":
        return np.maximum(0.0, 1.0 - np.mean(np.abs(outs - srv[None, :]), axis=1))
    a = _softmax(outs / temperature)
    b = _softmax(srv[None, :] / temperature)[0]
    cos = (a @ b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b))
    return 0.5 * (1.0 + cos)


def _softmax(rows: np.ndarray) -> np.ndarray:
    z = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def simbant_weights(
    prev: TrustWeights,
    candidate_outputs: np.ndarray,
    server_output: np.ndarray,
    kind: str,
    temperature: float,
    beta: float,
) -> TrustWeights:
    """Momentum blend of previous weights with normalized similarities.

    A zero similarity sum falls back to a uniform fresh term, mirroring the
    fallback of the contribution-coefficient rule.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"momentum beta must lie in (0, 1], got {beta}")
    sims = similarity_scores(candidate_outputs, server_output, kind, temperature)
    total = math.fsum(sims)
    if total == 0.0:
        fresh = np.full(len(sims), 1.0 / len(sims))
    else:
        fresh = sims / total
    w = (1.0 - beta) * np.asarray(prev.weights, dtype=float) + beta * fresh
    return TrustWeights(weights=w, workers=prev.workers)


# ---------------------------------------------------------------------------
# baselines


def baseline_mean(grads) -> np.ndarray:
    g = np.asarray(grads, dtype=float)
    return coordinate_mean(g)


def baseline_coordinate_median(grads) -> np.ndarray:
    g = np.asarray(grads, dtype=float)
    if g.shape[0] == 0:
        raise ValueError("cannot take the median of an empty gradient set")
    return np.median(g, axis=0)


def zeno_scores(ts: TrialSet, x: np.ndarray, grads, gamma: float, rho: float) -> np.ndarray:
    """Trial-descent score with gradient-norm regularization."""
    x = np.asarray(x, dtype=float)
    g = _as_grad_matrix(grads, x.shape[0])
    losses = trial_loss_many(ts, np.concatenate([x[None, :], x[None, :] - gamma * g], axis=0))
    return losses[0] - losses[1:] - rho * np.einsum("ij,ij->i", g, g)


def zeno_aggregate(ts: TrialSet, x: np.ndarray, grads, gamma: float, rho: float, b: int) -> np.ndarray:
    """Drop the b lowest-scoring gradients and average the rest.

    Ties rank by position (stable sort), so equal scores keep worker order.
    """
    g = _as_grad_matrix(grads, np.asarray(x).shape[0])
    n = g.shape[0]
    if not 0 <= b < n:
        raise ValueError(f"trim count must satisfy 0 <= b < {n}, got {b}")
    scores = zeno_scores(ts, x, grads, gamma, rho)
    order = np.argsort(-scores, kind="stable")
    kept = np.sort(order[: n - b])
    return coordinate_mean(g[kept])


def centered_clip(grads, center: np.ndarray, tau: float, clip_iters: int) -> np.ndarray:
    """Iteratively re-center on clipped deviations from the running center."""
    if tau <= 0:
        raise ValueError(f"clip radius must be positive, got {tau}")
    if clip_iters < 1:
        raise ValueError(f"need at least one clip iteration, got {clip_iters}")
    g = np.asarray(grads, dtype=float)
    v = np.asarray(center, dtype=float).copy()
    for _ in range(clip_iters):
        dev = g - v[None, :]
        norms = np.linalg.norm(dev, axis=1)
        factor = np.where(norms > 0, np.minimum(1.0, tau / np.where(norms > 0, norms, 1.0)), 1.0)
        v = v + coordinate_mean(dev * factor[:, None])
    return v
