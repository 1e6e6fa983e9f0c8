"""Independent brute-force references.

Deliberately naive implementations used by tests and by the ``audit`` CLI
subcommand: an exhaustive lattice search for the simplex subproblem, central
finite differences, and a re-derivation of the momentum weight rule with a
different summation order and wider intermediate precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .aggregation import TrustWeights
from .trial import TrialSet, trial_loss_many

GRID_RESOLUTIONS = (0.01, 0.05)
MAX_GRID_DIM = 4


@dataclass(frozen=True)
class GridSpec:
    """Lattice over the probability simplex: coordinates are multiples of h."""

    n: int
    h: float

    def __post_init__(self):
        if self.n < 1 or self.n > MAX_GRID_DIM:
            raise ValueError(f"grid enumeration supports 1 <= n <= {MAX_GRID_DIM}, got {self.n}")
        if self.h not in GRID_RESOLUTIONS:
            raise ValueError(f"grid resolution must be one of {GRID_RESOLUTIONS}, got {self.h}")

    def points(self) -> np.ndarray:
        """All lattice points in lexicographic order, shape (count, n)."""
        steps = round(1.0 / self.h)
        out = []

        def rec(prefix, remaining, slots):
            if slots == 1:
                out.append(prefix + [remaining])
                return
            for k in range(remaining + 1):
                rec(prefix + [k], remaining - k, slots - 1)

        rec([], steps, self.n)
        return np.asarray(out, dtype=float) * self.h


def grid_min_simplex(
    ts: TrialSet,
    x: np.ndarray,
    grads,
    gamma: float,
    grid: GridSpec,
    precond_diag: Optional[np.ndarray] = None,
):
    """Exact minimum of fhat(x - gamma * sum w_i g_i) over the lattice.

    Ties break toward the lexicographically smallest weight vector (the
    lattice is enumerated in lexicographic order and only strict
    improvements replace the incumbent).
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grads, dtype=float)
    if g.shape[0] != grid.n:
        raise ValueError(f"grid is over {grid.n} workers but got {g.shape[0]} gradients")
    s = g if precond_diag is None else g / precond_diag[None, :]
    lattice = grid.points()
    zs = x[None, :] - gamma * (lattice @ s)
    vals = trial_loss_many(ts, zs)
    best = int(np.argmin(vals))  # argmin returns the first (lex-smallest) minimizer
    return lattice[best].copy(), float(vals[best])


def finite_diff_grad(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(x.shape[0]):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return out


def reference_bant_weights(prev: TrustWeights, theta, beta: float) -> TrustWeights:
    """Momentum weight rule recomputed in long-double precision.

    Sums run over the reversed worker order so agreement with the production
    rule is evidence of order independence, not shared rounding.
    """
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"momentum beta must lie in (0, 1], got {beta}")
    th = np.asarray(theta, dtype=np.longdouble)
    clipped = np.maximum(th, np.longdouble(0.0))
    total = np.longdouble(0.0)
    for v in clipped[::-1]:
        total = total + v
    k = len(clipped)
    if total == 0:
        fresh = np.full(k, np.longdouble(1.0) / k, dtype=np.longdouble)
    else:
        fresh = clipped / total
    prev_w = np.asarray(prev.weights, dtype=np.longdouble)
    w = (np.longdouble(1.0) - np.longdouble(beta)) * prev_w + np.longdouble(beta) * fresh
    w64 = np.asarray(w, dtype=float)
    w64 = np.maximum(w64, 0.0)
    w64 = w64 / math.fsum(w64)
    return TrustWeights(weights=w64, workers=prev.workers)
