"""Config parsing, metrics emission (CSV/JSON) and loss-curve figures."""

from __future__ import annotations

import csv
import json
import math
import subprocess
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import jsonschema
import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "byzant"

import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .attacks import AttackSpec, alie_quantile_scale
from .engine import ExperimentConfig, RoundReport
from .problems import ProblemFamily

METRICS_SCHEMA_VERSION = 1

_REQUIRED = object()


class ConfigError(Exception):
    """Configuration document problem; message carries line diagnostics."""


# section -> key -> (type tag, default)
_SCHEMA = {
    "problem": {
        "kind": ("str", _REQUIRED),
        "d": ("int", _REQUIRED),
        "L": ("float", 1.0),
        "mu": ("float", 0.0),
        "sigma": ("float", 0.0),
        "delta1": ("float", 0.0),
        "delta2": ("float", 0.0),
        "samples": ("int", 128),
    },
    "attack": {
        "kind": ("str", "none"),
        "fraction": ("float", 0.0),
        "policy": ("str", "static"),
        "kappa": ("float", 0.5),
        "sigma_a": ("float_or_auto", "auto"),
        "z": ("float_or_auto", 1.0),
    },
    "aggregator": {
        "kind": ("str", _REQUIRED),
        "gamma": ("float", _REQUIRED),
        "beta": ("float", 0.5),
        "eta": ("float", 1.0),
        "iters": ("int", 60),
        "tau": ("float", 1.0),
        "rho": ("float", None),
        "b": ("int", None),
        "clip_iters": ("int", 1),
        "sim": ("str", "auto"),
        "temperature": ("float", 0.05),
    },
    "engine": {
        "n": ("int", _REQUIRED),
        "rounds": ("int", _REQUIRED),
        "seed": ("int", _REQUIRED),
        "trial_n": ("int", 500),
        "local_l": ("int", 1),
        "participation": ("float", 1.0),
        "preconditioner": ("str", "none"),
        "precond_floor": ("float", 1e-8),
        "precond_decay": ("float", None),
        "sim_probes": ("int", 32),
        "x0_scale": ("float", 3.0),
        "eval_workers": ("int", 1),
        "record_timing": ("bool", False),
    },
}


def _parse_document(text: str):
    """Flat sectioned key/value document -> {section: {key: (raw, line)}}."""
    sections: dict = {}
    current = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{name}]")
            if name in sections:
                raise ConfigError(f"line {lineno}: section [{name}] appears twice")
            sections[name] = {}
            current = name
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key/value outside any [section]")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key not in _SCHEMA[current]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            first = sections[current][key][1]
            raise ConfigError(
                f"duplicate key {key!r} in [{current}]: lines {first} and {lineno}"
            )
        if value.startswith('"') and value.endswith('"') and len(value) >= 2:
            value = value[1:-1]
        sections[current][key] = (value, lineno)
    return sections


def _convert(section: str, key: str, raw: str, lineno: int, type_tag: str):
    try:
        if type_tag == "int":
            return int(raw)
        if type_tag == "float":
            return float(raw)
        if type_tag == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if type_tag == "float_or_auto":
            return "auto" if raw == "auto" else float(raw)
        return raw
    except ValueError:
        raise ConfigError(
            f"line {lineno}: key {key!r} in [{section}] expects {type_tag}, got {raw!r}"
        ) from None


def _typed_section(parsed, section: str):
    present = parsed.get(section, {})
    out = {}
    for key, (type_tag, default) in _SCHEMA[section].items():
        if key in present:
            raw, lineno = present[key]
            out[key] = _convert(section, key, raw, lineno, type_tag)
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r} in [{section}]")
        else:
            out[key] = default
    return out


def parse_config(text: str, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Parse and fully validate a configuration document."""
    parsed = _parse_document(text)
    for required_section in ("problem", "aggregator", "engine"):
        if required_section not in parsed:
            raise ConfigError(f"missing required section [{required_section}]")
    prob = _typed_section(parsed, "problem")
    atk = _typed_section(parsed, "attack")
    agr = _typed_section(parsed, "aggregator")
    eng = _typed_section(parsed, "engine")
    if seed_override is not None:
        eng["seed"] = seed_override

    try:
        family = ProblemFamily(
            kind=prob["kind"], d=prob["d"], L=prob["L"], mu=prob["mu"],
            sigma=prob["sigma"], delta1=prob["delta1"], delta2=prob["delta2"],
        )
    except ValueError as exc:
        raise ConfigError(f"[problem]: {exc}") from None

    attack = None
    if atk["kind"] != "none":
        n_byz = int(eng["n"] * atk["fraction"] / 100.0 + 0.5)
        sigma_a = atk["sigma_a"]
        if sigma_a == "auto":
            sigma_a = 10.0 * prob["sigma"] if prob["sigma"] > 0 else 1.0
        z = atk["z"]
        if z == "auto":
            z = alie_quantile_scale(eng["n"], n_byz)
        try:
            attack = AttackSpec(
                kind=atk["kind"], fraction_pct=atk["fraction"],
                kappa=atk["kappa"], sigma_a=sigma_a, z=z,
            )
        except ValueError as exc:
            raise ConfigError(f"[attack]: {exc}") from None

    cfg = ExperimentConfig(
        problem=family,
        n=eng["n"],
        aggregator=agr["kind"],
        gamma=agr["gamma"],
        rounds=eng["rounds"],
        seed=eng["seed"],
        attack=attack,
        schedule_policy=atk["policy"],
        beta=agr["beta"],
        eta=agr["eta"],
        iters=agr["iters"],
        tau=agr["tau"],
        rho=agr["rho"],
        b=agr["b"],
        clip_iters=agr["clip_iters"],
        sim_kind=agr["sim"],
        temperature=agr["temperature"],
        trial_n=eng["trial_n"],
        local_l=eng["local_l"],
        participation=eng["participation"],
        preconditioner=eng["preconditioner"],
        precond_floor=eng["precond_floor"],
        precond_decay=eng["precond_decay"],
        sim_probes=eng["sim_probes"],
        samples_per_shard=prob["samples"],
        x0_scale=eng["x0_scale"],
        eval_workers=eng["eval_workers"],
        record_timing=eng["record_timing"],
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------------------
# metrics CSV


def metrics_header(n: int) -> List[str]:
    return (
        ["round", "trial_loss", "global_loss", "grad_norm_sq", "suboptimality"]
        + [f"w_{i}" for i in range(1, n + 1)]
        + [f"b_{i}" for i in range(1, n + 1)]
        + ["wall_micros"]
    )


def _fmt(value: float) -> str:
    return repr(float(value))


def write_metrics(rows: Sequence[RoundReport], path) -> None:
    """Write round reports as an RFC-4180 CSV with a stable, versioned header."""
    path = Path(path)
    if not rows:
        raise ValueError("refusing to write an empty metrics file")
    n = len(rows[0].weights)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(metrics_header(n))
        for r in rows:
            record = [
                str(r.round), _fmt(r.trial_loss), _fmt(r.global_loss), _fmt(r.grad_norm_sq),
                "" if r.suboptimality is None else _fmt(r.suboptimality),
            ]
            record += [_fmt(w) for w in r.weights]
            record += [str(int(b)) for b in r.byz_mask]
            record.append(str(int(r.wall_micros)))
            writer.writerow(record)


def read_metrics(path) -> List[RoundReport]:
    path = Path(path)
    with path.open("r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for h in header if h.startswith("w_"))
        expected = metrics_header(n)
        if header != expected:
            raise ValueError(f"unexpected metrics header {header!r}")
        rows = []
        for rec in reader:
            rows.append(
                RoundReport(
                    round=int(rec[0]),
                    trial_loss=float(rec[1]),
                    global_loss=float(rec[2]),
                    grad_norm_sq=float(rec[3]),
                    suboptimality=None if rec[4] == "" else float(rec[4]),
                    weights=np.array([float(v) for v in rec[5 : 5 + n]]),
                    byz_mask=np.array([float(v) for v in rec[5 + n : 5 + 2 * n]]),
                    wall_micros=int(rec[5 + 2 * n]),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# summary JSON

_SCHEMA_PATH = Path(__file__).parent / "schemas" / "summary.schema.json"


def summary_schema() -> dict:
    with _SCHEMA_PATH.open() as fh:
        return json.load(fh)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"byzant-{__version__}"


def write_summary(summary: dict, path) -> dict:
    """Validate the summary against the packaged schema and write it."""
    doc = dict(summary)
    doc.setdefault("schema_version", METRICS_SCHEMA_VERSION)
    doc.setdefault("build", _git_describe())
    jsonschema.validate(doc, summary_schema())
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


# ---------------------------------------------------------------------------
# figures


def plot_curves(runs: Sequence[Tuple[str, Sequence[RoundReport]]], path) -> None:
    """One log-scale loss curve per run, legend from run labels, saved as SVG."""
    if not runs or any(len(rows) == 0 for _, rows in runs):
        raise ValueError("every plotted run needs at least one metrics row")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, rows in runs:
        ax.plot([r.round for r in rows], [r.global_loss for r in rows], label=label, linewidth=1.4)
    ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel("global loss")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_grad_curves(runs: Sequence[Tuple[str, Sequence[RoundReport]]], path) -> None:
    """Companion figure: squared gradient norm per round, log scale."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, rows in runs:
        ax.plot([r.round for r in rows], [r.grad_norm_sq for r in rows], label=label, linewidth=1.4)
    ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel("squared gradient norm")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_zeta(table: Sequence[Tuple[int, float]], slope: float, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ns = [n for n, _ in table]
    vals = [v for _, v in table]
    ax.loglog(ns, vals, marker="o", linewidth=1.4, label=f"measured (slope {slope:.2f})")
    if vals and vals[0] > 0:
        ref = [vals[0] * ns[0] / n for n in ns]
        ax.loglog(ns, ref, linestyle="--", linewidth=1.0, label="1/N reference")
    ax.set_xlabel("trial sample count N")
    ax.set_ylabel("max squared gradient gap")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_zeta_csv(table: Sequence[Tuple[int, float]], slope: float, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_samples", "grad_gap_sq"])
        for n, v in table:
            writer.writerow([str(n), _fmt(v)])
