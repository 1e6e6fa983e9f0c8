"""Command-line experiment harness.

Subcommands: ``run`` (one experiment), ``sweep`` (cartesian product of
attacks x aggregators), ``zeta`` (trial-function discrepancy curve) and
``audit`` (assumption audits for a config).  Machine-readable outputs land
under ``--out`` (default: $BYZANT_OUT or ./out).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import engine, io, oracle, problems, trial
from .io import ConfigError
from .rng import TAG_BUILD, stream

_ATTACK_TOKEN = re.compile(r"^([a-z-]+?)(\d+)?$")
_TOKEN_KINDS = {
    "none": None,
    "labelflip": "label-flip",
    "label-flip": "label-flip",
    "signflip": "sign-flip",
    "sign-flip": "sign-flip",
    "random": "random-gradient",
    "random-gradient": "random-gradient",
    "ipm": "ipm",
    "alie": "alie",
}


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="byzant", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config document")
        p.add_argument("--out", default=None, help="output directory (default: $BYZANT_OUT or ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_run = sub.add_parser("run", help="run a single experiment")
    common(p_run)

    p_sweep = sub.add_parser("sweep", help="cartesian sweep over attacks x aggregators")
    common(p_sweep)
    p_sweep.add_argument("--attacks", default="none", help="comma list, e.g. none,ipm80,alie40")
    p_sweep.add_argument("--aggregators", default="mean,bant", help="comma list of aggregator kinds")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p_zeta = sub.add_parser("zeta", help="measure the trial-function gradient gap curve")
    common(p_zeta)
    p_zeta.add_argument("--n-values", default="50,100,200,400,800,1600,3200", help="comma list of trial sizes")
    p_zeta.add_argument("--reps", type=int, default=50, help="independent trial sets per size")
    p_zeta.add_argument("--probes", type=int, default=3, help="probe points")

    p_audit = sub.add_parser("audit", help="run assumption audits for a config")
    common(p_audit)
    p_audit.add_argument("--draws", type=int, default=100_000, help="oracle draws for the unbiasedness audit")

    return parser


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("BYZANT_OUT") or "out"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> engine.ExperimentConfig:
    text = Path(args.config).read_text()
    return io.parse_config(text, seed_override=args.seed)


def _run_one(cfg: engine.ExperimentConfig, out: Path, label: str):
    reports, summary = engine.run_experiment(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if reports:
        io.write_metrics(reports, out / "metrics.csv")
        io.plot_curves([(label, reports)], out / "curves.svg")
    summary["label"] = label
    io.write_summary(summary, out / "summary.json")
    return reports, summary


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    _, summary = _run_one(cfg, out, label=args_label(cfg))
    print(
        f"run complete: rounds={summary['rounds_reported']} "
        f"avg |grad f|^2={summary['avg_grad_norm_sq']:.3e} -> {out}"
    )
    return 0


def args_label(cfg: engine.ExperimentConfig) -> str:
    atk = "none" if cfg.attack is None else f"{cfg.attack.kind}{cfg.attack.fraction_pct:g}"
    return f"{cfg.aggregator}__{atk}"


def _parse_attack_token(token: str):
    m = _ATTACK_TOKEN.match(token.strip())
    if not m or m.group(1) not in _TOKEN_KINDS:
        raise ConfigError(f"cannot parse attack token {token!r} (expected e.g. ipm80, alie40, none)")
    kind = _TOKEN_KINDS[m.group(1)]
    pct = float(m.group(2)) if m.group(2) else 0.0
    if kind is None:
        return None, 0.0
    if pct <= 0:
        raise ConfigError(f"attack token {token!r} needs a percent suffix, e.g. {token}40")
    return kind, pct


def _sweep_config(base: engine.ExperimentConfig, aggregator: str, token: str) -> engine.ExperimentConfig:
    from .attacks import AttackSpec

    kind, pct = _parse_attack_token(token)
    if kind is None:
        attack = None
    elif base.attack is not None:
        attack = dataclasses.replace(base.attack, kind=kind, fraction_pct=pct)
    else:
        sigma_a = 10.0 * base.problem.sigma if base.problem.sigma > 0 else 1.0
        attack = AttackSpec(kind=kind, fraction_pct=pct, sigma_a=sigma_a)
    return dataclasses.replace(base, aggregator=aggregator, attack=attack)


def _sweep_entry(payload):
    cfg, out, label = payload
    _run_one(cfg, out, label)
    return label


def _cmd_sweep(args) -> int:
    base = _load_config(args)
    out = _out_dir(args)
    aggs = [a.strip() for a in args.aggregators.split(",") if a.strip()]
    attacks = [a.strip() for a in args.attacks.split(",") if a.strip()]
    jobs = []
    for aggregator in aggs:
        for token in attacks:
            cfg = _sweep_config(base, aggregator, token)
            cfg.validate()
            label = f"{aggregator}__{token}"
            jobs.append((cfg, out / label, label))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_sweep_entry, jobs))
    else:
        for payload in jobs:
            _sweep_entry(payload)
    runs = [(label, io.read_metrics(subdir / "metrics.csv")) for _, subdir, label in jobs]
    io.plot_curves(runs, out / "curves.svg")
    io.plot_grad_curves(runs, out / "grad_curves.svg")
    print(f"sweep complete: {len(jobs)} runs -> {out}")
    return 0


def _cmd_zeta(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    shards, obj = problems.build_problem(cfg.problem, cfg.n, cfg.seed, cfg.samples_per_shard)
    gen = stream(cfg.seed, worker=0, round_=0, tag=TAG_BUILD)
    probes = [gen.normal(size=cfg.problem.d) for _ in range(args.probes)]
    n_values = [int(v) for v in args.n_values.split(",")]
    table = trial.zeta_curve(shards[0], probes, n_values, args.reps, cfg.seed)
    slope = trial.fit_loglog_slope(table)
    io.write_zeta_csv(table, slope, out / "zeta.csv")
    io.plot_zeta(table, slope, out / "zeta.svg")
    summary = {
        "config": engine.config_to_dict(cfg),
        "zeta_table": [[n, v] for n, v in table],
        "zeta_slope": slope,
    }
    io.write_summary(summary, out / "summary.json")
    print(f"zeta curve complete: slope={slope:.3f} -> {out}")
    return 0


def _cmd_audit(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    checks = run_audits(cfg, draws=args.draws)
    (out / "audit.json").write_text(json.dumps(checks, indent=2, sort_keys=True) + "\n")
    failed = [name for name, c in checks.items() if not c["ok"]]
    for name, c in checks.items():
        print(f"{'PASS' if c['ok'] else 'FAIL'} {name}: {c['detail']}")
    if failed:
        print(f"audit failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"audit complete -> {out / 'audit.json'}")
    return 0


def run_audits(cfg: engine.ExperimentConfig, draws: int = 100_000) -> dict:
    """Assumption audits for a configuration, via the brute-force references."""
    shards, obj = problems.build_problem(cfg.problem, cfg.n, cfg.seed, cfg.samples_per_shard)
    gen = stream(cfg.seed, worker=0, round_=0, tag=TAG_BUILD)
    d = cfg.problem.d
    checks = {}

    x = gen.normal(size=d)
    oracle_audit = problems.audit_gradient_oracle(shards[0], x, draws, cfg.seed)
    bias_ok = oracle_audit["max_coordinate_bias"] < max(oracle_audit["bias_bound"], 1e-12)
    var_ok = oracle_audit["empirical_sq_error"] <= oracle_audit["sigma_sq"] * 1.02 + 1e-12
    checks["oracle_unbiased"] = {
        "ok": bool(bias_ok),
        "detail": f"max per-coordinate bias {oracle_audit['max_coordinate_bias']:.3e} "
        f"(bound {oracle_audit['bias_bound']:.3e})",
    }
    checks["oracle_variance"] = {
        "ok": bool(var_ok),
        "detail": f"E|g - grad f|^2 = {oracle_audit['empirical_sq_error']:.4f} "
        f"vs sigma^2 = {oracle_audit['sigma_sq']:.4f}",
    }

    points = [gen.normal(size=d) * 2.0 for _ in range(12)]
    d1, d2 = problems.audit_heterogeneity(shards, points)
    checks["heterogeneity_fit"] = {
        "ok": True,
        "detail": f"measured delta1 {d1:.4f} (target {cfg.problem.delta1}), "
        f"delta2 {d2:.4f} (target {cfg.problem.delta2})",
    }

    worst = 0.0
    for _ in range(3):
        p = gen.normal(size=d)
        fd = oracle.finite_diff_grad(lambda v: problems.exact_loss(obj, v), p, 1e-5)
        g = problems.exact_gradient(obj, p)
        worst = max(worst, float(np.linalg.norm(fd - g) / max(1.0, np.linalg.norm(g))))
    checks["gradient_vs_finite_diff"] = {
        "ok": worst <= 1e-5,
        "detail": f"worst relative error {worst:.2e} over 3 points",
    }

    ts = trial.build_trial_set(shards[0], cfg.trial_n, cfg.seed, cfg.sim_probes)
    p = gen.normal(size=d)
    direct = float(
        np.mean([problems.shard_loss(shards[0], p) + float(s @ p) for s in ts.samples])
    )
    gap = abs(direct - trial.trial_loss(ts, p)) / max(1.0, abs(direct))
    checks["trial_finite_sum"] = {
        "ok": gap <= 1e-10,
        "detail": f"cached vs direct summation relative gap {gap:.2e}",
    }

    if cfg.n <= 4:
        grads = np.stack([problems.shard_gradient(s, p) for s in shards])
        w, val = oracle.grid_min_simplex(ts, p, grads, cfg.gamma, oracle.GridSpec(cfg.n, 0.05))
        from .aggregation import autobant_solve

        _, solver_val = autobant_solve(ts, p, grads, cfg.gamma, cfg.eta, cfg.iters)
        checks["simplex_solver_vs_grid"] = {
            "ok": solver_val <= val + 1e-3,
            "detail": f"solver {solver_val:.6f} vs lattice {val:.6f}",
        }
    return checks


def cli(argv=None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "zeta":
            return _cmd_zeta(args)
        if args.command == "audit":
            return _cmd_audit(args)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1
    return 0


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
