"""Round-based federation loop.

Owns all mutable state: broadcasts the iterate, collects honest and
attacked gradients (attacks run only after the full honest snapshot exists),
maintains the diagonal preconditioner, applies the configured aggregator,
and supports local rounds and partial participation.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence, Tuple

import numpy as np

from . import aggregation as agg
from .attacks import AttackSpec, ByzantineSchedule, apply_attack, byzantine_schedule
from .problems import GlobalObjective, ProblemFamily, build_problem, honest_gradient
from .rng import TAG_GRAD, TAG_ATTACK, TAG_INIT, TAG_PARTICIPATION, stream
from .trial import TrialSet, build_trial_set, predict, trial_loss

AGGREGATORS = ("mean", "median", "bant", "autobant", "simbant", "zeno", "centered-clip")
PRECONDITIONERS = ("none", "identity", "adam", "rmsprop")

_PRECOND_DECAY = {"adam": 0.999, "rmsprop": 0.9, "identity": 0.0}


class StepSizeWarning(UserWarning):
    """The configured step size exceeds what the convergence analysis covers."""


@dataclass(frozen=True, eq=False)
class PreconditionerState:
    """Diagonal adaptive scaling with accumulator and floor.

    ``accum`` holds the squared diagonal, updated as a decaying average of
    squared gradients; ``p_hat`` is the floored square root actually used
    to scale steps.
    """

    kind: str
    decay: float
    floor: float
    accum: np.ndarray
    p_hat: np.ndarray


def make_preconditioner(kind: str, d: int, floor: float = 1e-8, decay: Optional[float] = None):
    kind = kind.replace("-like", "")
    if kind == "none":
        return None
    if kind not in _PRECOND_DECAY:
        raise ValueError(f"unknown preconditioner kind {kind!r}; expected one of {PRECONDITIONERS}")
    if floor <= 0:
        raise ValueError(f"preconditioner floor must be positive, got {floor}")
    if kind == "identity":
        return PreconditionerState(kind=kind, decay=0.0, floor=floor, accum=np.ones(d), p_hat=np.ones(d))
    return PreconditionerState(
        kind=kind,
        decay=_PRECOND_DECAY[kind] if decay is None else decay,
        floor=floor,
        accum=np.zeros(d),
        p_hat=np.full(d, floor),
    )


def update_preconditioner(ps: PreconditionerState, g: np.ndarray) -> PreconditionerState:
    """Decaying average of squared gradients, floored elementwise."""
    if ps.kind == "identity":
        return ps
    g = np.asarray(g, dtype=float)
    accum = ps.decay * ps.accum + (1.0 - ps.decay) * g * g
    p_hat = np.maximum(ps.floor, np.sqrt(accum))
    return replace(ps, accum=accum, p_hat=p_hat)


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemFamily
    n: int
    aggregator: str
    gamma: float
    rounds: int
    seed: int
    attack: Optional[AttackSpec] = None
    schedule_policy: str = "static"
    beta: float = 0.5
    eta: float = 1.0
    iters: int = 60
    tau: float = 1.0
    rho: Optional[float] = None
    b: Optional[int] = None
    clip_iters: int = 1
    sim_kind: str = "auto"
    temperature: float = 0.05
    trial_n: int = 500
    local_l: int = 1
    participation: float = 1.0
    preconditioner: str = "none"
    precond_floor: float = 1e-8
    precond_decay: Optional[float] = None
    sim_probes: int = 32
    samples_per_shard: int = 128
    x0_scale: float = 3.0
    eval_workers: int = 1
    record_timing: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.n < 2:
            raise ValueError(f"need at least 2 workers, got n={self.n}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.gamma <= 0:
            raise ValueError(f"step size gamma must be positive, got {self.gamma}")
        if self.rounds < 0:
            raise ValueError(f"round count must be >= 0, got {self.rounds}")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"momentum beta must lie in (0, 1], got {self.beta}")
        if self.eta <= 0 or self.iters < 1:
            raise ValueError("inner solver needs eta > 0 and iters >= 1")
        if self.trial_n < 1:
            raise ValueError(f"trial sample count must be >= 1, got {self.trial_n}")
        if self.local_l < 1:
            raise ValueError(f"local round length must be >= 1, got {self.local_l}")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation rate must lie in (0, 1], got {self.participation}")
        if self.local_l > 1 and self.aggregator != "autobant":
            raise ValueError("local rounds are defined for the autobant aggregator only")
        if self.local_l > 1 and self.participation < 1.0:
            raise ValueError("local rounds cannot be combined with partial participation")
        if self.preconditioner.replace("-like", "") not in PRECONDITIONERS:
            raise ValueError(
                f"unknown preconditioner {self.preconditioner!r}; expected one of {PRECONDITIONERS}"
            )
        if self.aggregator == "zeno":
            if self.rho is None or self.b is None:
                raise ValueError("zeno requires explicit rho and b (no endorsed defaults)")
            if not 0 <= self.b < self.n:
                raise ValueError(f"zeno trim count must satisfy 0 <= b < {self.n}, got {self.b}")
        if self.aggregator == "centered-clip":
            if self.tau <= 0 or self.clip_iters < 1:
                raise ValueError("centered-clip requires tau > 0 and clip_iters >= 1")
        if self.sim_kind not in ("auto",) + agg.SIMILARITY_KINDS:
            raise ValueError(f"unknown similarity kind {self.sim_kind!r}")
        if self.eval_workers < 1:
            raise ValueError(f"eval_workers must be >= 1, got {self.eval_workers}")
        if self.attack is not None:
            count = int(self.n * self.attack.fraction_pct / 100.0 + 0.5)
            if count >= self.n:
                raise ValueError("attack fraction leaves no honest worker")
        if (
            self.aggregator in ("bant", "autobant")
            and self.problem.kind == "quadratic"
            and self.gamma > 1.0 / (13.0 * self.problem.L)
        ):
            warnings.warn(
                f"gamma={self.gamma} exceeds 1/(13 L)={1.0 / (13.0 * self.problem.L):.3g}, "
                f"outside the stepsize range the convergence analysis covers",
                StepSizeWarning,
                stacklevel=2,
            )
        return self

    def effective_sim_kind(self) -> str:
        if self.sim_kind != "auto":
            return self.sim_kind
        return "abs-diff"


@dataclass(eq=False)
class RoundState:
    """Mutable state carried across rounds; owned exclusively by the engine."""

    t: int
    x: np.ndarray
    omega: np.ndarray
    objective: GlobalObjective
    precond: Optional[PreconditionerState] = None
    cc_center: Optional[np.ndarray] = None
    x_locals: Optional[np.ndarray] = None
    g1_inf_max: float = 0.0


@dataclass(frozen=True, eq=False)
class RoundReport:
    """One communication round's metrics, logged at the reported point."""

    round: int
    trial_loss: float
    global_loss: float
    grad_norm_sq: float
    suboptimality: Optional[float]
    weights: np.ndarray
    byz_mask: np.ndarray
    wall_micros: int


def sample_participation(n: int, rate: float, gen: np.random.Generator, t: int) -> Tuple[int, ...]:
    """Active set of ceil(rate*n) workers, always including worker 1."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"participation rate must lie in (0, 1], got {rate}")
    k = math.ceil(rate * n)
    if k >= n:
        return tuple(range(1, n + 1))
    rest = gen.choice(np.arange(2, n + 1), size=k - 1, replace=False) if k > 1 else np.array([], dtype=int)
    return tuple([1] + sorted(int(w) for w in rest))


@lru_cache(maxsize=64)
def _schedule_for(cfg: ExperimentConfig) -> ByzantineSchedule:
    frac = cfg.attack.fraction_pct if cfg.attack is not None else 0.0
    return byzantine_schedule(cfg.n, frac, cfg.schedule_policy, cfg.seed)


def _honest_grads(cfg, shards, points, t: int, workers: Sequence[int]) -> dict:
    """Honest gradient of each listed worker at its own point.

    Safe to fan out: each worker's draw comes from its own counter-based
    stream, so results cannot depend on scheduling.
    """

    def one(w: int) -> np.ndarray:
        return honest_gradient(shards[w - 1], points[w], stream(cfg.seed, w, t, TAG_GRAD))

    if cfg.eval_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.eval_workers) as pool:
            results = list(pool.map(one, workers))
        return dict(zip(workers, results))
    return {w: one(w) for w in workers}


def _attacked_messages(cfg, shards, points, t, active, byz, own):
    """Attack phase: runs only once the full honest snapshot exists."""
    honest_ids = [w for w in active if w not in byz]
    snapshot = np.stack([own[w] for w in honest_ids])
    msgs = {}
    for w in active:
        if w in byz:
            # label flipping reuses the worker's own gradient stream so the
            # flipped recomputation sees the same minibatch randomness
            tag = TAG_GRAD if cfg.attack.kind == "label-flip" else TAG_ATTACK
            gen = stream(cfg.seed, w, t, tag)
            msgs[w] = np.asarray(
                apply_attack(cfg.attack, snapshot, own[w], shards[w - 1], points[w], gen), dtype=float
            )
        else:
            msgs[w] = own[w]
    return msgs


def _sim_outputs(cfg: ExperimentConfig, ts: TrialSet, candidates: np.ndarray, server_candidate: np.ndarray):
    """Model outputs of every candidate (and the server's) on the trial inputs.

    Logistic models already emit probabilities.  Regression responses are
    unbounded and share a large common component, which would wash out the
    similarity contrast; they are standardized per probe across the
    candidate cohort and squashed to [0, 1], the bounded-output analogue.
    """
    rows = np.concatenate([candidates, server_candidate[None, :]], axis=0)
    outs = np.stack([predict(ts, c) for c in rows])
    if cfg.problem.kind != "logistic" and cfg.effective_sim_kind() == "abs-diff":
        mean = outs.mean(axis=0, keepdims=True)
        spread = outs.std(axis=0, keepdims=True)
        spread = np.where(spread > 0, spread, 1.0)
        # temperature plays the same sharpening role it has for softmaxed
        # logits: small T turns the squash nearly binary per probe
        z = (outs - mean) / (spread * cfg.temperature)
        outs = 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))
    return outs[:-1], outs[-1]


def _audit_preconditioner(ps: PreconditionerState, g1_inf_max: float) -> None:
    lo = ps.floor
    hi = max(ps.floor, g1_inf_max)
    if np.any(ps.p_hat < lo - 1e-15) or np.any(ps.p_hat > hi * (1 + 1e-12) + 1e-15):
        raise RuntimeError("preconditioner diagonal left its certified bounds")


def _report_at(obj: GlobalObjective, ts: TrialSet, x, t, weights_row, mask_row, wall) -> RoundReport:
    g = obj.gradient(x)
    f = obj.loss(x)
    sub = None if obj.f_star is None else f - obj.f_star
    return RoundReport(
        round=t,
        trial_loss=trial_loss(ts, x),
        global_loss=f,
        grad_norm_sq=float(g @ g),
        suboptimality=sub,
        weights=weights_row,
        byz_mask=mask_row,
        wall_micros=wall,
    )


def _prev_weights(state: RoundState, active: Sequence[int], full: bool) -> agg.TrustWeights:
    if full:
        return agg.TrustWeights(weights=state.omega.copy(), workers=tuple(active))
    idx = np.array([w - 1 for w in active])
    part = state.omega[idx]
    mass = math.fsum(part)
    if mass <= 0:
        return agg.TrustWeights.uniform(active)
    return agg.TrustWeights(weights=part / mass, workers=tuple(active))


def _store_weights(state: RoundState, active: Sequence[int], w: agg.TrustWeights, full: bool) -> None:
    idx = np.array([u - 1 for u in active])
    if full:
        state.omega = np.asarray(w.weights, dtype=float).copy()
    else:
        mass = math.fsum(state.omega[idx])
        state.omega[idx] = np.asarray(w.weights, dtype=float) * (mass if mass > 0 else 1.0 / len(state.omega) * len(idx))


def run_round(state: RoundState, cfg: ExperimentConfig, shards, ts: TrialSet):
    """Advance one communication round; returns (state, RoundReport).

    Metrics in the report describe the pre-step iterate x^t; the weights
    and Byzantine mask are the ones produced/active during the round.
    """
    t0 = time.perf_counter()
    t = state.t
    n = cfg.n
    x = state.x
    full = cfg.participation >= 1.0
    if full:
        active: Tuple[int, ...] = tuple(range(1, n + 1))
    else:
        active = sample_participation(n, cfg.participation, stream(cfg.seed, 0, t, TAG_PARTICIPATION), t)
    byz = frozenset(_schedule_for(cfg).members(t)) & set(active) if cfg.attack is not None else frozenset()

    points = {w: x for w in active}
    own = _honest_grads(cfg, shards, points, t, active)
    msgs = _attacked_messages(cfg, shards, points, t, active, byz, own)

    if state.precond is not None:
        state.precond = update_preconditioner(state.precond, own[1])
        state.g1_inf_max = max(state.g1_inf_max, float(np.max(np.abs(own[1]))))
        _audit_preconditioner(state.precond, state.g1_inf_max)
    pdiag = state.precond.p_hat if state.precond is not None else None

    grads = np.stack([msgs[w] for w in active])
    k = len(active)
    weights_row = np.zeros(n)
    idx = np.array([w - 1 for w in active])

    if cfg.aggregator == "mean":
        step = agg.baseline_mean(grads)
        x_next = x - cfg.gamma * (step if pdiag is None else step / pdiag)
        weights_row[idx] = 1.0 / k
    elif cfg.aggregator == "median":
        step = agg.baseline_coordinate_median(grads)
        x_next = x - cfg.gamma * (step if pdiag is None else step / pdiag)
        weights_row[idx] = 1.0 / k
    elif cfg.aggregator == "centered-clip":
        if state.cc_center is None:
            state.cc_center = np.zeros(x.shape[0])
        v = agg.centered_clip(grads, state.cc_center, cfg.tau, cfg.clip_iters)
        state.cc_center = v
        x_next = x - cfg.gamma * (v if pdiag is None else v / pdiag)
        weights_row[idx] = 1.0 / k
    elif cfg.aggregator == "zeno":
        step = agg.zeno_aggregate(ts, x, grads, cfg.gamma, cfg.rho, cfg.b)
        x_next = x - cfg.gamma * (step if pdiag is None else step / pdiag)
        scores = agg.zeno_scores(ts, x, grads, cfg.gamma, cfg.rho)
        kept = np.sort(np.argsort(-scores, kind="stable")[: k - cfg.b])
        weights_row[idx[kept]] = 1.0 / (k - cfg.b)
    elif cfg.aggregator == "bant":
        coeffs = agg.contribution_coeffs(ts, x, grads, cfg.gamma, pdiag, workers=active)
        w = agg.bant_weights(_prev_weights(state, active, full), coeffs, cfg.beta)
        x_next = agg.bant_step(x, grads, w, coeffs, cfg.gamma, pdiag)
        _store_weights(state, active, w, full)
        weights_row[idx] = w.weights
    elif cfg.aggregator == "autobant":
        w, _val = agg.autobant_solve(ts, x, grads, cfg.gamma, cfg.eta, cfg.iters, pdiag, workers=active)
        x_next = agg.autobant_step(x, grads, w, cfg.gamma, pdiag)
        _store_weights(state, active, w, full)
        weights_row[idx] = w.weights
    elif cfg.aggregator == "simbant":
        scaled = grads if pdiag is None else grads / pdiag[None, :]
        candidates = x[None, :] - cfg.gamma * scaled
        g1 = own[1] if pdiag is None else own[1] / pdiag
        server_candidate = x - cfg.gamma * g1
        outs, server_out = _sim_outputs(cfg, ts, candidates, server_candidate)
        w = agg.simbant_weights(
            _prev_weights(state, active, full), outs, server_out,
            cfg.effective_sim_kind(), cfg.temperature, cfg.beta,
        )
        x_next = agg.autobant_step(x, grads, w, cfg.gamma, pdiag)
        _store_weights(state, active, w, full)
        weights_row[idx] = w.weights
    else:  # pragma: no cover - guarded by validate()
        raise ValueError(f"unknown aggregator {cfg.aggregator!r}")

    mask_row = np.zeros(n)
    for w_id in byz:
        mask_row[w_id - 1] = 1.0
    wall = int((time.perf_counter() - t0) * 1e6) if cfg.record_timing else 0
    report = _report_at(state.objective, ts, x, t, weights_row, mask_row, wall)
    state.t = t + 1
    state.x = x_next
    return state, report


def run_local_round(state: RoundState, cfg: ExperimentConfig, shards, ts: TrialSet):
    """Advance one iteration of the local-rounds variant.

    Non-aggregation iterations perform purely local descent (Byzantines
    included; they corrupt only the point they report).  At aggregation
    ticks the simplex solve runs over candidate points, with the server's
    own candidate always considered, and the winner is broadcast.  Returns
    (state, RoundReport or None); a report is emitted per communication.
    """
    if cfg.local_l < 2:
        raise ValueError("run_local_round requires local_l >= 2; use run_round otherwise")
    t0 = time.perf_counter()
    t = state.t
    n = cfg.n
    if state.x_locals is None:
        state.x_locals = np.tile(state.x, (n, 1))
    active = tuple(range(1, n + 1))
    byz = frozenset(_schedule_for(cfg).members(t)) if cfg.attack is not None else frozenset()

    points = {w: state.x_locals[w - 1] for w in active}
    own = _honest_grads(cfg, shards, points, t, active)

    tick = (t % cfg.local_l == 0) or (t == cfg.rounds - 1)
    if not tick:
        for w in active:
            state.x_locals[w - 1] = points[w] - cfg.gamma * own[w]
        state.t = t + 1
        return state, None

    msgs = _attacked_messages(cfg, shards, points, t, active, byz, own)
    candidates = np.stack([points[w] - cfg.gamma * msgs[w] for w in active])
    server_vertex = np.zeros(n)
    server_vertex[0] = 1.0
    w, _val = agg.autobant_solve_points(
        ts, candidates, cfg.eta, cfg.iters, workers=active, seeds=(server_vertex,)
    )
    x_next = agg.fsum_weighted(candidates, np.asarray(w.weights, dtype=float))
    _store_weights(state, active, w, True)

    weights_row = np.asarray(w.weights, dtype=float).copy()
    mask_row = np.zeros(n)
    for w_id in byz:
        mask_row[w_id - 1] = 1.0
    wall = int((time.perf_counter() - t0) * 1e6) if cfg.record_timing else 0
    state.x = x_next
    state.x_locals = np.tile(x_next, (n, 1))
    state.t = t + 1
    report = _report_at(state.objective, ts, x_next, t, weights_row, mask_row, wall)
    return state, report


def initial_state(cfg: ExperimentConfig, obj: GlobalObjective) -> RoundState:
    d = cfg.problem.d
    x0 = cfg.x0_scale * stream(cfg.seed, 0, 0, TAG_INIT).normal(size=d)
    return RoundState(
        t=0,
        x=x0,
        omega=np.full(cfg.n, 1.0 / cfg.n),
        objective=obj,
        precond=make_preconditioner(cfg.preconditioner, d, cfg.precond_floor, cfg.precond_decay),
        cc_center=None,
        x_locals=None,
    )


def run_experiment(cfg: ExperimentConfig):
    """Run the configured experiment; returns (reports, summary dict)."""
    cfg.validate()
    t_start = time.perf_counter()
    shards, obj = build_problem(cfg.problem, cfg.n, cfg.seed, cfg.samples_per_shard)
    ts = build_trial_set(shards[0], cfg.trial_n, cfg.seed, cfg.sim_probes)
    state = initial_state(cfg, obj)
    reports = []
    local = cfg.local_l > 1
    for _ in range(cfg.rounds):
        if local:
            state, rep = run_local_round(state, cfg, shards, ts)
        else:
            state, rep = run_round(state, cfg, shards, ts)
        if rep is not None:
            reports.append(rep)
    wall = time.perf_counter() - t_start

    x = state.x
    g = obj.gradient(x)
    final_loss = obj.loss(x)
    if reports:
        avg_gsq = math.fsum(r.grad_norm_sq for r in reports) / len(reports)
        avg_weights = [
            math.fsum(float(r.weights[j]) for r in reports) / len(reports) for j in range(cfg.n)
        ]
    else:
        avg_gsq = float(g @ g)
        avg_weights = [1.0 / cfg.n] * cfg.n
    summary = {
        "config": config_to_dict(cfg),
        "rounds_reported": len(reports),
        "final_global_loss": final_loss,
        "final_trial_loss": trial_loss(ts, x),
        "final_grad_norm_sq": float(g @ g),
        "final_suboptimality": None if obj.f_star is None else final_loss - obj.f_star,
        "avg_grad_norm_sq": avg_gsq,
        "avg_weights": avg_weights,
        "wall_seconds": wall,
    }
    return reports, summary


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
