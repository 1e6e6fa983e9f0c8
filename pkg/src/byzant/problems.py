"""Synthetic distributed optimization problems.

Three families (quadratic, logistic, nonconvex quadratic-plus-sine) with
controllable smoothness L, strong convexity mu, gradient-noise level sigma
and (delta1, delta2) heterogeneity across workers.  Every family exposes a
closed-form deterministic gradient, so tests can compare stochastic oracles
against exact references.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .rng import TAG_BUILD, stream

KINDS = ("quadratic", "logistic", "nonconvex-quadratic-plus-sine")

# Guarantees for the trust-score methods only cover delta2 <= 1/12; larger
# targets are rejected at construction time rather than silently accepted.
DELTA2_LIMIT = 1.0 / 12.0

DEFAULT_SAMPLES_PER_SHARD = 128


class HeterogeneityBoundError(ValueError):
    """delta2 target outside the range the convergence guarantees cover."""


@dataclass(frozen=True)
class ProblemFamily:
    """Parameters that define one synthetic problem family.

    delta1/delta2 are heterogeneity *targets*: the builder spreads worker
    optima (delta1) and scales worker curvature (delta2) to hit them; use
    :func:`audit_heterogeneity` to measure what was achieved.
    """

    kind: str
    d: int
    L: float = 1.0
    mu: float = 0.0
    sigma: float = 0.0
    delta1: float = 0.0
    delta2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}; expected one of {KINDS}")
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.L <= 0:
            raise ValueError(f"smoothness L must be positive, got {self.L}")
        if self.mu < 0:
            raise ValueError(f"strong convexity mu must be >= 0, got {self.mu}")
        if self.mu > self.L:
            raise ValueError(f"mu={self.mu} exceeds L={self.L}")
        if self.sigma < 0:
            raise ValueError(f"gradient noise sigma must be >= 0, got {self.sigma}")
        if self.delta1 < 0 or self.delta2 < 0:
            raise ValueError("heterogeneity targets must be >= 0")
        if self.delta2 >= DELTA2_LIMIT:
            raise HeterogeneityBoundError(
                f"delta2 target {self.delta2} is >= 1/12; the convergence guarantees "
                f"for trust-score aggregation assume delta2 <= 1/12"
            )
        if self.kind == "nonconvex-quadratic-plus-sine" and self.mu != 0:
            raise ValueError("the nonconvex family requires mu = 0")


@dataclass(frozen=True, eq=False)
class WorkerShard:
    """One worker's local objective.

    Quadratic-like kinds store a dense Hessian and a center; the logistic
    kind stores an explicit (features, labels) sample with a ridge term.
    ``label_sign`` is -1 on shards whose labels were flipped (logistic) or
    whose residual is negated (quadratic analogue of label flipping).
    """

    worker_id: int
    kind: str
    sigma: float
    n_samples: int
    label_sign: float = 1.0
    # quadratic / nonconvex payload
    hessian: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    sine_amp: float = 0.0
    sine_freq: float = 0.0
    scale: float = 1.0
    # logistic payload
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    ridge: float = 0.0

    @property
    def dimension(self) -> int:
        if self.kind == "logistic":
            return self.features.shape[1]
        return self.center.shape[0]


@dataclass(frozen=True, eq=False)
class GlobalObjective:
    """Handle for f(x) = (1/n) sum_i f_i(x) with exact loss/gradient."""

    kind: str
    shards: tuple
    x_star: Optional[np.ndarray] = None
    f_star: Optional[float] = None
    avg_hessian: Optional[np.ndarray] = None

    @property
    def dimension(self) -> int:
        return self.shards[0].dimension

    def loss(self, x: np.ndarray) -> float:
        return exact_loss(self, x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return exact_gradient(self, x)


def _check_dim(shard: WorkerShard, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (shard.dimension,):
        raise ValueError(f"expected parameter vector of shape ({shard.dimension},), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# per-shard deterministic loss / gradient


def shard_loss(shard: WorkerShard, x: np.ndarray) -> float:
    x = _check_dim(shard, x)
    if shard.kind == "logistic":
        margins = shard.label_sign * shard.labels * (shard.features @ x)
        data = float(np.mean(np.logaddexp(0.0, -margins)))
        return data + 0.5 * shard.ridge * float(x @ x)
    y = x - shard.center
    val = 0.5 * float(y @ (shard.hessian @ y))
    if shard.sine_amp:
        val += shard.scale * shard.sine_amp * float(np.sum(1.0 - np.cos(shard.sine_freq * y)))
    return val


def shard_loss_many(shard: WorkerShard, xs: np.ndarray) -> np.ndarray:
    """Vectorized shard_loss over rows of ``xs``."""
    xs = np.asarray(xs, dtype=float)
    if shard.kind == "logistic":
        margins = shard.label_sign * shard.labels[None, :] * (xs @ shard.features.T)
        data = np.mean(np.logaddexp(0.0, -margins), axis=1)
        return data + 0.5 * shard.ridge * np.einsum("ij,ij->i", xs, xs)
    ys = xs - shard.center[None, :]
    vals = 0.5 * np.einsum("ij,jk,ik->i", ys, shard.hessian, ys)
    if shard.sine_amp:
        vals = vals + shard.scale * shard.sine_amp * np.sum(1.0 - np.cos(shard.sine_freq * ys), axis=1)
    return vals


def shard_gradient(shard: WorkerShard, x: np.ndarray) -> np.ndarray:
    x = _check_dim(shard, x)
    if shard.kind == "logistic":
        z = shard.features
        yl = shard.label_sign * shard.labels
        margins = yl * (z @ x)
        # d/dx log(1+exp(-m)) = -y * sigmoid(-m) * z
        coeff = -yl * _sigmoid(-margins) / z.shape[0]
        return z.T @ coeff + shard.ridge * x
    y = x - shard.center
    g = shard.hessian @ y
    if shard.sine_amp:
        g = g + shard.scale * shard.sine_amp * shard.sine_freq * np.sin(shard.sine_freq * y)
    return shard.label_sign * g if shard.label_sign != 1.0 else g


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def flip_labels(shard: WorkerShard) -> WorkerShard:
    """Label-flipped view of a shard (logistic: y -> -y; else residual negated)."""
    return replace(shard, label_sign=-shard.label_sign)


def honest_gradient(shard: WorkerShard, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Stochastic gradient g_i(x, xi): exact gradient plus isotropic noise.

    Noise has per-coordinate standard deviation sigma/sqrt(d) so that
    E||g - grad f_i||^2 = sigma^2 regardless of dimension.
    """
    g = shard_gradient(shard, x)
    if shard.sigma > 0:
        g = g + gen.normal(0.0, shard.sigma / math.sqrt(shard.dimension), size=shard.dimension)
    return g


# ---------------------------------------------------------------------------
# global objective


def exact_loss(obj: GlobalObjective, x: np.ndarray) -> float:
    return math.fsum(shard_loss(s, x) for s in obj.shards) / len(obj.shards)


def exact_gradient(obj: GlobalObjective, x: np.ndarray) -> np.ndarray:
    acc = np.zeros(obj.dimension)
    for s in obj.shards:
        acc += shard_gradient(s, x)
    return acc / len(obj.shards)


# ---------------------------------------------------------------------------
# builders


def build_problem(
    family: ProblemFamily,
    n: int,
    seed: int,
    samples_per_shard: int = DEFAULT_SAMPLES_PER_SHARD,
):
    """Build n worker shards plus the global objective handle.

    Pure function of (family, n, seed): rebuilding with the same arguments
    yields bit-identical shards.
    """
    if n < 2:
        raise ValueError(f"need at least 2 workers, got {n}")
    gen = stream(seed, worker=0, round_=0, tag=TAG_BUILD)
    if family.kind == "logistic":
        return _build_logistic(family, n, gen, samples_per_shard)
    return _build_quadratic(family, n, gen)


def _curvature_scales(n: int, eps: float) -> np.ndarray:
    # +/- eps in cancelling pairs so the mean scale is exactly 1
    z = np.zeros(n)
    for i in range(n // 2):
        z[2 * i] = 1.0
        z[2 * i + 1] = -1.0
    return 1.0 + eps * z


def _random_orthogonal(d: int, gen: np.random.Generator) -> np.ndarray:
    if d == 1:
        return np.ones((1, 1))
    q, r = np.linalg.qr(gen.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _build_quadratic(family: ProblemFamily, n: int, gen: np.random.Generator):
    d = family.d
    nonconvex = family.kind == "nonconvex-quadratic-plus-sine"
    eps = math.sqrt(family.delta2)
    if family.mu * (1.0 + eps) > family.L * (1.0 - eps):
        raise ValueError(
            f"delta2 target {family.delta2} is incompatible with mu={family.mu}, L={family.L}"
        )

    if nonconvex:
        # Half the smoothness budget goes to the sine term, which makes the
        # Hessian indefinite away from the per-worker centers.
        sine_curv = family.L / (2.0 * (1.0 + eps))
        hi = family.L / (2.0 * (1.0 + eps))
        lo = family.L / (10.0 * (1.0 + eps))
        sine_amp = 1.0
        sine_freq = math.sqrt(sine_curv)
    else:
        sine_curv = 0.0
        hi = family.L / (1.0 + eps)
        lo = family.mu / (1.0 - eps) if eps < 1.0 else family.mu
        sine_amp = 0.0
        sine_freq = 0.0

    eigs = np.linspace(lo, hi, d) if d > 1 else np.array([hi])
    basis = _random_orthogonal(d, gen)
    base = basis @ np.diag(eigs) @ basis.T
    base = 0.5 * (base + base.T)

    scales = _curvature_scales(n, eps)
    hessians = [s * base for s in scales]

    origin = gen.normal(size=d)
    if family.delta1 > 0:
        dirs = gen.normal(size=(n, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        radius = _solve_center_radius(hessians, dirs, family.delta1)
        centers = origin[None, :] + radius * dirs
    else:
        centers = np.tile(origin, (n, 1))

    shards = tuple(
        WorkerShard(
            worker_id=i + 1,
            kind=family.kind,
            sigma=family.sigma,
            n_samples=1,
            hessian=hessians[i],
            center=centers[i],
            sine_amp=sine_amp,
            sine_freq=sine_freq,
            scale=scales[i],
        )
        for i in range(n)
    )

    avg_h = sum(hessians) / n
    if nonconvex:
        obj = GlobalObjective(kind=family.kind, shards=shards, avg_hessian=avg_h)
    else:
        rhs = sum(h @ c for h, c in zip(hessians, centers)) / n
        if family.mu > 0:
            x_star = np.linalg.solve(avg_h, rhs)
        else:
            x_star = np.linalg.lstsq(avg_h, rhs, rcond=None)[0]
        obj_tmp = GlobalObjective(kind=family.kind, shards=shards, avg_hessian=avg_h)
        f_star = exact_loss(obj_tmp, x_star)
        obj = GlobalObjective(
            kind=family.kind, shards=shards, x_star=x_star, f_star=f_star, avg_hessian=avg_h
        )
    return shards, obj


def _solve_center_radius(hessians, dirs, delta1: float) -> float:
    """Radius r so that max_i ||grad f_i(x*)||^2 = delta1 exactly.

    With centers c_i = origin + r*u_i the global optimum shifts to
    origin + r*M with M = Abar^+ mean_i(A_i u_i), and the worst local
    gradient at the optimum scales as r^2 * K.  Solve for r.
    """
    n = len(hessians)
    avg_h = sum(hessians) / n
    mean_au = sum(h @ u for h, u in zip(hessians, dirs)) / n
    m = np.linalg.lstsq(avg_h, mean_au, rcond=None)[0]
    k = max(float(np.sum((h @ (m - u)) ** 2)) for h, u in zip(hessians, dirs))
    if k <= 0:
        raise ValueError("degenerate worker directions; cannot hit the delta1 target")
    return math.sqrt(delta1 / k)


def _build_logistic(family: ProblemFamily, n: int, gen: np.random.Generator, m: int):
    d = family.d
    homogeneous = family.delta1 == 0 and family.delta2 == 0

    w_bar = gen.normal(size=d)
    w_bar /= np.linalg.norm(w_bar)

    def draw_shard_data(w_true):
        # 10% label noise keeps the problem non-separable (finite optimum)
        z = gen.normal(size=(m, d))
        margins = z @ w_true
        y = np.where(margins >= 0, 1.0, -1.0)
        noise = gen.random(m) < 0.1
        return z, np.where(noise, -y, y)

    if homogeneous:
        z0, y0 = draw_shard_data(w_bar)
        raw = [(z0, y0)] * n
    else:
        # spread label-generating weights; the spread h is calibrated below
        # so the measured delta1 at the optimum tracks the target.
        dirs = gen.normal(size=(n, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        h = 1.0 if family.delta1 > 0 else 0.0
        shards = obj = None
        for _ in range(4):
            raw = [draw_shard_data(w_bar + h * dirs[i]) for i in range(n)]
            shards, obj = _assemble_logistic(family, raw)
            if family.delta1 == 0:
                break
            measured = _measured_delta1(shards, obj)
            if measured <= 0:
                break
            ratio = family.delta1 / measured
            if 0.81 <= ratio <= 1.21:
                break
            h *= math.sqrt(ratio)
        return shards, obj

    return _assemble_logistic(family, raw)


def _assemble_logistic(family: ProblemFamily, raw):
    n = len(raw)
    mu = family.mu
    # scale features so the worst shard's logistic smoothness is exactly L - mu
    lam = max(
        float(np.linalg.eigvalsh((z.T @ z) / (4.0 * z.shape[0]))[-1]) for z, _ in raw
    )
    alpha = math.sqrt((family.L - mu) / lam) if lam > 0 else 1.0
    shards = tuple(
        WorkerShard(
            worker_id=i + 1,
            kind="logistic",
            sigma=family.sigma,
            n_samples=raw[i][0].shape[0],
            features=alpha * raw[i][0],
            labels=raw[i][1],
            ridge=mu,
        )
        for i in range(n)
    )
    obj_tmp = GlobalObjective(kind="logistic", shards=shards)
    x_star = _newton_minimize(obj_tmp)
    f_star = exact_loss(obj_tmp, x_star) if x_star is not None else None
    return shards, GlobalObjective(kind="logistic", shards=shards, x_star=x_star, f_star=f_star)


def _logistic_hessian(obj: GlobalObjective, x: np.ndarray) -> np.ndarray:
    d = obj.dimension
    h = np.zeros((d, d))
    for s in obj.shards:
        margins = s.label_sign * s.labels * (s.features @ x)
        w = _sigmoid(margins) * _sigmoid(-margins)
        h += (s.features.T * w) @ s.features / s.features.shape[0]
        h += s.ridge * np.eye(d)
    return h / len(obj.shards)


def _newton_minimize(obj: GlobalObjective, tol: float = 1e-12, max_iter: int = 200):
    """Deterministic damped Newton solve for the logistic optimum."""
    x = np.zeros(obj.dimension)
    for _ in range(max_iter):
        g = exact_gradient(obj, x)
        if np.linalg.norm(g) < tol:
            return x
        h = _logistic_hessian(obj, x) + 1e-12 * np.eye(obj.dimension)
        step = np.linalg.solve(h, g)
        t, f0 = 1.0, exact_loss(obj, x)
        while t > 1e-8 and exact_loss(obj, x - t * step) > f0:
            t *= 0.5
        x = x - t * step
    return x if np.linalg.norm(exact_gradient(obj, x)) < 1e-6 else None


def _measured_delta1(shards, obj: GlobalObjective) -> float:
    if obj.x_star is None:
        return 0.0
    g = exact_gradient(obj, obj.x_star)
    return max(float(np.sum((shard_gradient(s, obj.x_star) - g) ** 2)) for s in shards)


# ---------------------------------------------------------------------------
# assumption audits


def audit_gradient_oracle(shard: WorkerShard, x: np.ndarray, draws: int, seed: int) -> dict:
    """Unbiasedness and variance audit of the stochastic gradient oracle.

    Returns the worst per-coordinate bias of the empirical mean together
    with its CLT bound 5*sigma/sqrt(draws), and the empirical
    E||g - grad f_i||^2 against sigma^2.
    """
    x = _check_dim(shard, x)
    gen = stream(seed, worker=shard.worker_id, round_=0, tag=TAG_BUILD)
    exact = shard_gradient(shard, x)
    d = shard.dimension
    total = np.zeros(d)
    total_sq = 0.0
    chunk = 20000
    left = draws
    while left > 0:
        take = min(chunk, left)
        if shard.sigma > 0:
            noise = gen.normal(0.0, shard.sigma / math.sqrt(d), size=(take, d))
        else:
            noise = np.zeros((take, d))
        total += noise.sum(axis=0)
        total_sq += float(np.sum(noise**2))
        left -= take
    mean_bias = np.abs(total / draws)
    return {
        "draws": draws,
        "max_coordinate_bias": float(np.max(mean_bias)),
        "bias_bound": 5.0 * shard.sigma / math.sqrt(draws),
        "empirical_sq_error": total_sq / draws,
        "sigma_sq": shard.sigma**2,
    }


# ---------------------------------------------------------------------------
# heterogeneity audit


def audit_heterogeneity(shards: Sequence[WorkerShard], points: Sequence[np.ndarray]):
    """Fit the (delta1, delta2) envelope from worker gradients at audit points.

    For each point takes the worst-worker squared deviation from the mean
    gradient and fits it against ``delta1 + delta2 * ||grad f||^2`` by
    nonnegative least squares.
    """
    points = [np.asarray(p, dtype=float) for p in points]
    if len(points) < 10:
        raise ValueError(f"need at least 10 audit points, got {len(points)}")
    n = len(shards)
    worst = np.empty(len(points))
    gsq = np.empty(len(points))
    for k, x in enumerate(points):
        grads = np.stack([shard_gradient(s, x) for s in shards])
        mean = grads.mean(axis=0)
        worst[k] = float(np.max(np.sum((grads - mean) ** 2, axis=1)))
        gsq[k] = float(mean @ mean)
    design = np.column_stack([np.ones(len(points)), gsq])
    coef, _ = nnls(design, worst)
    return float(coef[0]), float(coef[1])
