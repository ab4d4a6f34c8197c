"""Experiment configuration, orchestration and schema-stable output.

A configuration is a TOML file describing one experiment::

    experiment = "perturbed-expansion"
    b_grid = [50, 100, 200]
    reps = 100000
    master_seed = 7

    [increments]
    kind = "exponential"
    mean = 1.0

    [perturbation]
    kind = "scaled_partial_sum"

    [truncation]
    theta = 1.0
    alpha = 0.6

Optional tables are ``[rank_sprt]`` (Delta, A, a, b) and ``[options]`` for
experiment-specific settings (see ``EXPERIMENTS``). Results are always
reduced in block order, so a rerun with the same configuration and seed
writes byte-identical files whatever the thread count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on the interpreter
    import tomli as tomllib

from . import constants as const
from .errors import ConfigError
from .expansion import compare_expansion, predict_var
from .parallel import child, threads
from .perturbed_walk import regularity_diagnostics, simulate_T_b_batch
from .rank_sprt import RankSprtConfig, predict_ET_rank, run_sprt_batch, sprt_rows, xi_scaling_check
from .renewal_core import (
    DEFAULT_MAX_STEPS,
    RenewalConstants,
    estimate_renewal_constants,
    mean_se,
    simulate_linear_crossings,
    variance_se,
)
from .rng_models import IncrementModel, PerturbationModel, TruncationParams

EXPANSION_COLUMNS = ["b", "predicted", "mc", "se", "residual", "band_lo", "band_hi"]
DIAGNOSTICS_COLUMNS = ["condition", "n", "estimate", "std_error", "pass"]
LINEAR_COLUMNS = ["b", "predicted", "mc", "se", "residual", "overshoot", "overshoot_se", "wald", "wald_se", "censored"]
SPRT_RUN_COLUMNS = ["rep", "stop_n", "boundary", "overshoot"]
XI_COLUMNS = ["n", "var_ratio", "mean_residual", "se"]
CONSTANTS_COLUMNS = ["name", "value", "err_estimate"]

EXPERIMENTS = (
    "linear-renewal", "perturbed-expansion", "intermediate", "variance",
    "rank-sprt-et", "xi-scaling", "diagnostics", "constants",
)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    increments: IncrementModel | None = None
    perturbation: PerturbationModel = field(default_factory=PerturbationModel.zero)
    truncation: TruncationParams = field(default_factory=TruncationParams)
    rank: RankSprtConfig | None = None
    b_grid: tuple[float, ...] = ()
    reps: int = 10_000
    master_seed: int = 0
    max_steps: int = DEFAULT_MAX_STEPS
    exact_repro: bool = False
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be non-negative")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        grid = list(self.b_grid)
        if any(c <= a for a, c in zip(grid, grid[1:])):
            raise ConfigError("b_grid must be strictly increasing")
        needs_grid = {"linear-renewal", "perturbed-expansion", "intermediate", "variance"}
        if self.experiment in needs_grid and not grid:
            raise ConfigError(f"{self.experiment} needs a non-empty b_grid")
        if self.experiment in needs_grid | {"diagnostics"} and self.increments is None:
            raise ConfigError(f"{self.experiment} needs an [increments] table")
        if self.experiment == "rank-sprt-et" and self.rank is None:
            raise ConfigError("rank-sprt-et needs a [rank_sprt] table")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {"experiment", "increments", "perturbation", "truncation", "rank_sprt", "b_grid", "reps",
                 "master_seed", "max_steps", "exact_repro", "options"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "experiment" not in d:
            raise ConfigError("configuration needs an 'experiment' key")
        trunc = TruncationParams.from_dict(d.get("truncation", {}))
        inc = IncrementModel.from_dict(d["increments"]) if "increments" in d else None
        pert = PerturbationModel.from_dict(d.get("perturbation", {}), trunc)
        rank = RankSprtConfig.from_dict(d["rank_sprt"]) if "rank_sprt" in d else None
        try:
            return cls(
                experiment=str(d["experiment"]),
                increments=inc,
                perturbation=pert,
                truncation=trunc,
                rank=rank,
                b_grid=tuple(float(b) for b in d.get("b_grid", ())),
                reps=int(d.get("reps", 10_000)),
                master_seed=int(d.get("master_seed", 0)),
                max_steps=int(d.get("max_steps", DEFAULT_MAX_STEPS)),
                exact_repro=bool(d.get("exact_repro", False)),
                options=dict(d.get("options", {})),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)

    def with_overrides(self, seed: int | None = None, exact_repro: bool | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, master_seed=int(seed))
        if exact_repro:
            cfg = replace(cfg, exact_repro=True)
        return cfg

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "experiment": self.experiment, "b_grid": list(self.b_grid), "reps": self.reps,
            "master_seed": self.master_seed, "max_steps": self.max_steps, "exact_repro": self.exact_repro,
            "perturbation": self.perturbation.to_dict(), "truncation": self.truncation.to_dict(),
            "options": dict(self.options),
        }
        if self.increments is not None:
            out["increments"] = self.increments.to_dict()
        if self.rank is not None:
            out["rank_sprt"] = {"Delta": self.rank.Delta, "A": self.rank.A, "a": self.rank.a, "b": self.rank.b}
        return out


@dataclass
class ReplicationSummary:
    experiment: str
    columns: list[str]
    rows: list[dict]
    flags: dict[str, bool] = field(default_factory=dict)
    censored: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(self.flags.values())

    def to_json(self) -> Any:
        if self.experiment == "diagnostics":
            return [{c: r[c] for c in DIAGNOSTICS_COLUMNS} for r in self.rows]
        return {
            "experiment": self.experiment, "columns": self.columns, "rows": self.rows,
            "flags": self.flags, "censored": self.censored, "meta": self.meta,
        }


# ---------------------------------------------------------------------------
# experiments


def _constants_for(cfg: ExperimentConfig, inc: IncrementModel) -> RenewalConstants:
    reps = int(cfg.options.get("constants_reps", max(cfg.reps, 1000)))
    return estimate_renewal_constants(inc, reps, child(cfg.master_seed, 1000), cfg.max_steps)


def _run_linear(cfg: ExperimentConfig) -> ReplicationSummary:
    inc = cfg.increments
    rc = _constants_for(cfg, inc)
    rows, flags, censored = [], {}, 0
    for i, b in enumerate(cfg.b_grid):
        batch = simulate_linear_crossings(inc, b, cfg.reps, child(cfg.master_seed, i), cfg.max_steps)
        ok = batch.ok
        t = mean_se(batch.stop_index[ok])
        over = mean_se(batch.overshoot[ok])
        d = mean_se(batch.stopped_sum[ok] - rc.mu * batch.stop_index[ok])
        pred = (b + rc.overshoot_correction) / rc.mu
        rows.append({
            "b": b, "predicted": pred, "mc": t.value, "se": t.std_error, "residual": t.value - pred,
            "overshoot": over.value, "overshoot_se": over.std_error, "wald": d.value, "wald_se": d.std_error,
            "censored": batch.n_censored,
        })
        flags[f"wald_b{b:g}"] = abs(d.value) <= 4 * d.std_error
        censored += batch.n_censored
    return ReplicationSummary(cfg.experiment, LINEAR_COLUMNS, rows, flags, censored, {"constants": rc.to_dict()})


def _run_expansion(cfg: ExperimentConfig) -> ReplicationSummary:
    inc = cfg.increments
    rc = _constants_for(cfg, inc)
    mult = float(cfg.options.get("band_multiplier", 10.0))
    tol = float(cfg.options.get("final_tolerance", 0.5))
    cmp = compare_expansion(inc, cfg.perturbation, cfg.b_grid, cfg.reps, cfg.master_seed, rc, cfg.truncation,
                            mult, cfg.max_steps, tol)
    rows = []
    flags: dict[str, bool] = {}
    for r in cmp.rows:
        rows.append({"b": r.b, "predicted": r.predicted_mu_ET, "mc": r.mc_mu_ET, "se": r.residual_se,
                     "residual": r.residual, "band_lo": r.band_lo, "band_hi": r.band_hi})
        if cfg.experiment == "intermediate":
            flags[f"band_b{r.b:g}"] = r.band_lo <= r.mc_mu_ET <= r.band_hi
    if cfg.experiment == "perturbed-expansion":
        flags["residual_decay"] = cmp.residual_decay
        flags["final_residual"] = cmp.final_within
    detail = [r.to_dict() for r in cmp.rows]
    return ReplicationSummary(cfg.experiment, EXPANSION_COLUMNS, rows, flags, sum(r.n_censored for r in cmp.rows),
                              {"constants": rc.to_dict(), "detail": detail})


def _run_variance(cfg: ExperimentConfig) -> ReplicationSummary:
    inc = cfg.increments
    if inc.declared_sigma2 is None:
        raise ConfigError("the variance experiment needs increments with a declared variance")
    rc = RenewalConstants.exact(inc.declared_mu, inc.declared_sigma2, 1.0, 1.0)
    mult = float(cfg.options.get("band_multiplier", 10.0))
    rows, flags, censored = [], {}, 0
    for i, b in enumerate(cfg.b_grid):
        batch, _ = simulate_T_b_batch(inc, cfg.perturbation, b, cfg.reps, child(cfg.master_seed, i), cfg.max_steps)
        t = batch.stop_index[batch.ok].astype(float)
        v, v_se = variance_se(t)
        band = predict_var(rc, b, cfg.truncation.rho(b), mult)
        rows.append({"b": b, "predicted": band.center, "mc": v, "se": v_se, "residual": v - band.center,
                     "band_lo": band.lo, "band_hi": band.hi})
        flags[f"band_b{b:g}"] = band.contains(v)
        censored += batch.n_censored
    return ReplicationSummary(cfg.experiment, EXPANSION_COLUMNS, rows, flags, censored)


def _run_rank_et(cfg: ExperimentConfig) -> ReplicationSummary:
    rk = cfg.rank
    mu = const.drift_mu(rk.Delta, rk.A)
    reflect = mu < 0
    inc = IncrementModel.rank_sprt(rk.Delta, rk.A, reflect=reflect)
    rc = _constants_for(cfg, inc)
    if rk.A == 1.0:
        ce = const.c_eta(rk.eta, int(cfg.options.get("n_max", 3200))).extrapolated
        h = None
    else:
        ce, h = None, const.h_integral(rk.Delta, rk.A)
    pred = predict_ET_rank(rk, rc, ce, h, reflect=reflect)
    xi_lim = None if rk.A == 1.0 else const.xi_mean_limit(rk.Delta, rk.A)
    pred_full = None if xi_lim is None else predict_ET_rank(rk, rc, reflect=reflect, xi_mean=xi_lim)
    max_pairs = int(cfg.options.get("max_pairs", 100_000))
    batch = run_sprt_batch(rk, cfg.reps, cfg.master_seed, max_pairs)
    t = mean_se(batch.stop_index[batch.ok])
    mu_abs = abs(mu)
    tol = max(4 * t.std_error * mu_abs, float(cfg.options.get("tolerance", 1.0)))
    row = {"b": rk.b, "predicted": mu_abs * pred, "mc": mu_abs * t.value, "se": mu_abs * t.std_error,
           "residual": mu_abs * (t.value - pred), "band_lo": mu_abs * pred - tol, "band_hi": mu_abs * pred + tol}
    flags = {"within_tolerance": abs(row["residual"]) <= tol}
    meta = {"mu": mu, "reflect": reflect, "c_eta": ce, "h_integral": h, "xi_mean_limit": xi_lim,
            "predicted_xi_mean_limit": None if pred_full is None else mu_abs * pred_full,
            "constants": rc.to_dict(),
            "p_lower": float(batch.hit_lower[batch.ok].mean()), "mean_T": t.value}
    return ReplicationSummary(cfg.experiment, EXPANSION_COLUMNS, [row], flags, batch.n_censored, meta)


def _run_xi(cfg: ExperimentConfig) -> ReplicationSummary:
    Delta = float(cfg.rank.Delta if cfg.rank else cfg.options.get("Delta", 2.0))
    n_grid = [int(n) for n in cfg.options.get("n_grid", [100, 1000, 10000])]
    rep = xi_scaling_check(Delta, n_grid, cfg.reps, cfg.master_seed)
    rows = [{c: r[c] for c in XI_COLUMNS} for r in rep.rows]
    tol = float(cfg.options.get("ratio_tolerance", 0.15))
    last = rep.rows[-1]
    flags = {"var_ratio": abs(last["var_ratio"] - rep.target) <= tol * rep.target} if rep.target else {}
    meta = {"target": rep.target, "fitted_limit": rep.fitted_limit, "eta": rep.eta, "detail": rep.rows}
    return ReplicationSummary(cfg.experiment, XI_COLUMNS, rows, flags, 0, meta)


def _run_diagnostics(cfg: ExperimentConfig) -> ReplicationSummary:
    grid = [int(n) for n in cfg.options.get("grid", [100, 1000, 10000])]
    rep = regularity_diagnostics(cfg.increments, cfg.perturbation, grid, cfg.reps, cfg.master_seed, cfg.truncation)
    rows = rep.to_json()
    flags = {c: rep.passed(c) for c in rep.conditions()}
    return ReplicationSummary(cfg.experiment, DIAGNOSTICS_COLUMNS, rows, flags, 0, rep.meta)


def constants_report(Delta: float, A: float, eta: float | None = None, n_max: int = 3200) -> dict:
    """``{mu, h_integral, xi_mean_limit, c_eta, err_estimates}`` for one parameter point."""
    mu, mu_err = const.drift_mu_with_error(Delta, A)
    h, h_err = (None, None) if A == 1.0 else const.h_integral_with_error(Delta, A)
    xl, xl_err = (None, None) if A == 1.0 else const.xi_mean_limit_with_error(Delta, A)
    eta = const.eta_of(Delta) if eta is None else eta
    ce = const.c_eta(eta, n_max)
    return {
        "Delta": Delta, "A": A, "eta": eta, "mu": mu, "h_integral": h, "xi_mean_limit": xl,
        "c_eta": ce.extrapolated,
        "err_estimates": {"mu": mu_err, "h_integral": h_err, "xi_mean_limit": xl_err, "c_eta": ce.err_estimate},
        "c_eta_warning": ce.warning,
    }


def _run_constants(cfg: ExperimentConfig) -> ReplicationSummary:
    o = cfg.options
    Delta = float(cfg.rank.Delta if cfg.rank else o.get("Delta", 2.0))
    A = float(cfg.rank.A if cfg.rank else o.get("A", 1.0))
    eta = o.get("eta")
    rep = constants_report(Delta, A, None if eta is None else float(eta), int(o.get("n_max", 3200)))
    names = ("mu", "h_integral", "xi_mean_limit", "c_eta")
    rows = [{"name": k, "value": rep[k], "err_estimate": rep["err_estimates"][k]} for k in names]
    return ReplicationSummary(cfg.experiment, CONSTANTS_COLUMNS, rows, {}, 0, rep)


RUNNERS: dict[str, Callable[[ExperimentConfig], ReplicationSummary]] = {
    "linear-renewal": _run_linear,
    "perturbed-expansion": _run_expansion,
    "intermediate": _run_expansion,
    "variance": _run_variance,
    "rank-sprt-et": _run_rank_et,
    "xi-scaling": _run_xi,
    "diagnostics": _run_diagnostics,
    "constants": _run_constants,
}


def run(config: ExperimentConfig, n_threads: int | None = None) -> ReplicationSummary:
    """Run one experiment. Output does not depend on ``n_threads``."""
    with threads(n_threads):
        summary = RUNNERS[config.experiment](config)
    summary.meta = {**summary.meta, "config": config.to_dict()}
    return summary


def run_sprt_rows(config: ExperimentConfig, n_threads: int | None = None) -> ReplicationSummary:
    """Per-run rows of the rank SPRT described by ``config``."""
    if config.rank is None:
        raise ConfigError("sprt needs a [rank_sprt] table")
    max_pairs = int(config.options.get("max_pairs", 100_000))
    with threads(n_threads):
        batch = run_sprt_batch(config.rank, config.reps, config.master_seed, max_pairs)
    return ReplicationSummary("sprt", SPRT_RUN_COLUMNS, sprt_rows(batch), {}, batch.n_censored,
                              {"config": config.to_dict()})


# ---------------------------------------------------------------------------
# output


def json_safe(x: Any) -> Any:
    """JSON-safe scalars: numpy types unwrapped, non-finite floats as strings."""
    if isinstance(x, dict):
        return {str(k): json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def _cell(x: Any) -> str:
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    if x is None:
        return ""
    return str(x)


def render(summary: ReplicationSummary, fmt: str = "csv") -> str:
    if fmt == "json":
        return json.dumps(json_safe(summary.to_json()), sort_keys=True, indent=2) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(summary.columns)
        for r in summary.rows:
            w.writerow([_cell(r.get(c)) for c in summary.columns])
        return buf.getvalue()
    raise ConfigError(f"unknown output format {fmt!r}")


def emit(summary: ReplicationSummary, path: str | Path | None, fmt: str = "csv") -> str:
    """Write ``summary`` to ``path`` (stdout when None); returns the text."""
    text = render(summary, fmt)
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
