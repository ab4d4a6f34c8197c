"""The perturbed walk Z_n = S_n + xi_n and the stopping rules built on it.

Besides the first passage ``T_b`` this module provides the comparison rule
``tau*_b`` (a linear crossing started at ``n_* = floor(b/mu - eta_* b^alpha)``
with the truncated perturbation frozen at ``n_*``), the renewal count
``U_b`` with the last exit time ``N*_b``, and Monte Carlo diagnostics of the
tail and uniform-integrability conditions that make the expansions valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._crossing import FrozenRule, run_block
from .errors import BoundaryError, ConfigError, DriftError
from .parallel import BLOCK_SIZE, SeedLike, as_seed_sequence, child, concat, map_blocks
from .renewal_core import DEFAULT_MAX_STEPS, CrossingBatch, CrossingRecord, Estimate, mean_se
from .rng_models import (
    IncrementModel,
    PathStream,
    PerturbationModel,
    PerturbedPath,
    TruncationParams,
    zeta,
)

__all__ = [
    "PerturbedPath", "PairedCrossing", "PairedBatch", "LastExit", "LastExitBatch", "DiagnosticsReport",
    "zeta", "n_star", "simulate_T_b", "simulate_T_b_batch", "simulate_tau_star", "simulate_paired",
    "simulate_paired_batch", "simulate_U_and_N", "simulate_U_and_N_batch", "truncated_tail",
    "regularity_diagnostics", "early_stop_trend",
]


def _positive_mu(increments: IncrementModel) -> float:
    mu = increments.declared_mu
    if not mu > 0:
        raise DriftError(f"this rule needs a positive drift, got mu={mu}")
    return mu


def simulate_T_b(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    seed: SeedLike,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> CrossingRecord:
    """``T_b = inf{n >= 1: Z_n > b}`` on the path generated by ``seed``."""
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    raw = run_block(increments, perturbation, 1, as_seed_sequence(seed), b, max_steps)
    return CrossingBatch.from_block(raw, b).record(0)


def simulate_T_b_batch(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    reps: int,
    seed: SeedLike,
    max_steps: int = DEFAULT_MAX_STEPS,
    xi_at: int | None = None,
    block_size: int = BLOCK_SIZE,
) -> tuple[CrossingBatch, np.ndarray | None]:
    """``reps`` independent first passages; optionally xi at a fixed step."""
    parts = map_blocks(
        lambda ss, rows: run_block(increments, perturbation, rows, ss, b, max_steps, xi_at=xi_at),
        reps, seed, block_size,
    )
    raw = concat(parts)
    return CrossingBatch.from_block(raw, b), raw.get("xi_at")


# ---------------------------------------------------------------------------
# the frozen-perturbation comparison rule


def n_star(b: float, mu: float, eta_star: float, alpha: float) -> int:
    return math.floor(b / mu - eta_star * b**alpha)


def _frozen_rule(increments: IncrementModel, tp: TruncationParams, b: float, eta_star: float | None) -> FrozenRule:
    mu = _positive_mu(increments)
    if eta_star is None:
        eta_star = tp.default_eta_star(mu)
    lower = tp.theta / mu ** (1.0 + tp.alpha)
    if not eta_star > lower:
        raise ConfigError(f"eta_star must exceed theta/mu^(1+alpha) = {lower}")
    if tp.alpha == 1.0 and not eta_star < 1.0 / mu:
        raise ConfigError("eta_star must be < 1/mu when alpha == 1")
    ns = n_star(b, mu, eta_star, tp.alpha)
    if ns < 1:
        raise BoundaryError(f"n_* = {ns} < 1: b={b} is too small for eta_star={eta_star}")
    return FrozenRule(ns, tp)


def _tau_batch(raw: dict[str, np.ndarray], b: float) -> CrossingBatch:
    return CrossingBatch.from_arrays(raw["tau_stop"], raw["tau_value"], raw["tau_sum"], raw["tau_censored"], b)


def simulate_tau_star(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    tp: TruncationParams | None = None,
    eta_star: float | None = None,
    seed: SeedLike = 0,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> CrossingRecord:
    """``tau*_b = inf{n >= n_*: S_n + zeta_{n_*} > b}``.

    ``stopped_value`` holds ``S + zeta_{n_*}`` at the stop. ``eta_star``
    defaults to ``2 theta / mu^(1+alpha)``.
    """
    return simulate_paired(increments, perturbation, b, tp, eta_star, seed, max_steps).tau_star


@dataclass(frozen=True)
class PairedCrossing:
    """``T_b`` and ``tau*_b`` evaluated on one and the same path."""

    t_b: CrossingRecord
    tau_star: CrossingRecord
    n_star: int
    zeta_at_n_star: float
    diff_scaled: float


@dataclass
class PairedBatch:
    t_b: CrossingBatch
    tau_star: CrossingBatch
    n_star: int
    zeta_at_n_star: np.ndarray
    diff_scaled: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return ~(self.t_b.censored | self.tau_star.censored)


def simulate_paired(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    tp: TruncationParams | None = None,
    eta_star: float | None = None,
    seed: SeedLike = 0,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> PairedCrossing:
    tp = tp or perturbation.trunc
    rule = _frozen_rule(increments, tp, b, eta_star)
    raw = run_block(increments, perturbation, 1, as_seed_sequence(seed), b, max_steps, frozen=rule)
    t = CrossingBatch.from_block(raw, b).record(0)
    tau = _tau_batch(raw, b).record(0)
    diff = abs(t.stop_index - tau.stop_index) / tp.rho(b)
    return PairedCrossing(t, tau, rule.n_star, float(raw["zeta_star"][0]), float(diff))


def simulate_paired_batch(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    reps: int,
    seed: SeedLike,
    tp: TruncationParams | None = None,
    eta_star: float | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    block_size: int = BLOCK_SIZE,
) -> PairedBatch:
    tp = tp or perturbation.trunc
    rule = _frozen_rule(increments, tp, b, eta_star)
    parts = map_blocks(
        lambda ss, rows: run_block(increments, perturbation, rows, ss, b, max_steps, frozen=rule),
        reps, seed, block_size,
    )
    raw = concat(parts)
    t = CrossingBatch.from_block(raw, b)
    tau = _tau_batch(raw, b)
    diff = np.abs(t.stop_index - tau.stop_index) / tp.rho(b)
    return PairedBatch(t, tau, rule.n_star, raw["zeta_star"], diff.astype(float))


def truncated_tail(values: np.ndarray, cutoff: float, p: float = 1.0) -> Estimate:
    """``E[((V - C)^+)^p]`` with its standard error."""
    v = np.maximum(np.asarray(values, dtype=float) - cutoff, 0.0) ** p
    return mean_se(v)


# ---------------------------------------------------------------------------
# renewal count and last exit


class LastExit(NamedTuple):
    U: int
    N: int
    censored: bool


@dataclass
class LastExitBatch:
    U: np.ndarray
    N: np.ndarray
    censored: np.ndarray
    t_b: CrossingBatch


def simulate_U_and_N(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    seed: SeedLike,
    max_steps: int | None = None,
) -> LastExit:
    """``U_b = #{n <= max_steps: Z_n <= b}`` and ``N*_b = 1 + last such n``.

    ``max_steps`` defaults to ``ceil(10 b / mu) + 100``. When Z is still at or
    below b at the budget the path is flagged censored and both counts are
    lower bounds.
    """
    batch = simulate_U_and_N_batch(increments, perturbation, b, 1, as_seed_sequence(seed), max_steps, single=True)
    return LastExit(int(batch.U[0]), int(batch.N[0]), bool(batch.censored[0]))


def default_last_exit_budget(increments: IncrementModel, b: float) -> int:
    return math.ceil(10.0 * max(b, 1.0) / _positive_mu(increments)) + 100


def simulate_U_and_N_batch(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    reps: int,
    seed: SeedLike,
    max_steps: int | None = None,
    block_size: int = BLOCK_SIZE,
    single: bool = False,
) -> LastExitBatch:
    if max_steps is None:
        max_steps = default_last_exit_budget(increments, b)
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")

    def block(ss, rows):
        return run_block(increments, perturbation, rows, ss, b, max_steps, last_exit=True)

    raw = block(seed, 1) if single else concat(map_blocks(block, reps, seed, block_size))
    return LastExitBatch(raw["U"], 1 + raw["last"], raw["last_censored"], CrossingBatch.from_block(raw, b))


# ---------------------------------------------------------------------------
# regularity diagnostics


@dataclass
class DiagnosticRecord:
    condition: str
    n: int
    estimate: float
    std_error: float
    passed: bool

    def to_json(self) -> dict:
        return {"condition": self.condition, "n": self.n, "estimate": self.estimate,
                "std_error": self.std_error, "pass": self.passed}


@dataclass
class DiagnosticsReport:
    records: list[DiagnosticRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def conditions(self) -> list[str]:
        return list(dict.fromkeys(r.condition for r in self.records))

    def series(self, condition: str) -> list[DiagnosticRecord]:
        return [r for r in self.records if r.condition == condition]

    def passed(self, condition: str) -> bool:
        return all(r.passed for r in self.series(condition))

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.records)

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.records]


def trend_passes(estimates, std_errors, k: float = 2.0) -> bool:
    """Non-increasing over the upper half of the grid, up to ``k`` joint SEs."""
    est = np.asarray(estimates, float)
    se = np.asarray(std_errors, float)
    for i in range((len(est) - 1) // 2, len(est) - 1):
        if est[i + 1] > est[i] + k * math.hypot(se[i], se[i + 1]) + 1e-12 * abs(est[i]):
            return False
    return True


DIAGNOSTIC_CUTOFFS = (1.0, 2.0, 4.0, 8.0)
SLOW_CHANGE_EPS = (0.1, 0.01)
DIAGNOSTIC_BLOCK = 256


def _window(n: int, width: float, horizon: int) -> slice:
    """Columns of steps n .. n + floor(width) (1-based), clipped to the horizon."""
    return slice(n - 1, min(n + int(math.floor(width)), horizon))


def _row_stats(xi: np.ndarray, n: int, tp: TruncationParams, mu: float, M: float) -> dict[str, np.ndarray]:
    """Per-path values whose means are the diagnostic estimates at step n."""
    horizon = xi.shape[1]
    p, alpha = tp.p, tp.alpha
    na = n**alpha
    rho_n = tp.rho(n)
    out: dict[str, np.ndarray] = {}

    # upper tail of the running maximum over (delta0 n, n]
    lo = int(math.floor(tp.delta0 * n))
    peak = xi[:, lo:n].max(axis=1)
    out["upper_tail"] = (n / rho_n) ** p * (peak > tp.theta * na)

    # lower-tail sum over k >= n + K n^alpha, up to the horizon
    k0 = int(math.ceil(n + tp.K * na))
    ks = np.arange(k0, horizon + 1)
    if ks.size:
        xk = xi[:, k0 - 1:horizon]
        thr = -(ks - n) * mu + tp.w0 * ks**alpha
        out["lower_tail_sum"] = ((xk <= thr) * ks ** (p - 1)).sum(axis=1).astype(float)
        # sup and inf over j >= k of j^-alpha (xi_j + (j - n) mu)
        g = (xk + (ks - n) * mu) / ks**alpha
        sup_tail = np.maximum.accumulate(g[:, ::-1], axis=1)[:, ::-1]
        inf_tail = np.minimum.accumulate(g[:, ::-1], axis=1)[:, ::-1]
        out["last_exit_tail_sum_sup"] = ((sup_tail <= tp.w0) * ks ** (p - 1)).sum(axis=1).astype(float)
        out["last_exit_tail_sum_inf"] = ((inf_tail <= tp.w0) * ks ** (p - 1)).sum(axis=1).astype(float)
    else:
        zero = np.zeros(xi.shape[0])
        out["lower_tail_sum"] = out["last_exit_tail_sum_sup"] = out["last_exit_tail_sum_inf"] = zero

    # windowed deviation from the truncated value
    z_n = tp.zeta(xi[:, n - 1], n)
    win = xi[:, _window(n, M * na, horizon)]
    dev = np.minimum(np.abs(z_n[:, None] - win), na).max(axis=1) / rho_n
    moment = dev**p
    out["window_moment"] = moment
    for c in DIAGNOSTIC_CUTOFFS:
        out[f"window_tail_C{c:g}"] = moment * (moment > c)

    # slowly changing: deviation over the next n^alpha steps
    nxt = xi[:, n:min(n + int(math.floor(na)), horizon)]
    if nxt.shape[1]:
        jump = np.abs(nxt - z_n[:, None]).max(axis=1)
    else:
        jump = np.zeros(xi.shape[0])
    for eps in SLOW_CHANGE_EPS:
        out[f"slow_change_eps{eps:g}"] = (jump > eps).astype(float)
    return out


def diagnostics_horizon(n_max: int, tp: TruncationParams, M: float) -> int:
    return int(2 * n_max + math.ceil(M * n_max**tp.alpha))


def regularity_diagnostics(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    grid,
    reps: int,
    seed: SeedLike,
    tp: TruncationParams | None = None,
    M: float | None = None,
    horizon: int | None = None,
    block_size: int = DIAGNOSTIC_BLOCK,
) -> DiagnosticsReport:
    """Monte Carlo checks of the tail, window and slow-change conditions.

    For every n in ``grid`` the report holds one record per condition:

    * ``upper_tail``: ``(n/rho(n))^p P{max_{delta0 n < j <= n} xi_j > theta n^alpha}``
    * ``lower_tail_sum``: ``sum_{k >= n + K n^alpha} k^(p-1) P{xi_k <= -(k-n) mu + w0 k^alpha}``
      with k running to the simulation horizon
    * ``window_moment`` and ``window_tail_C*``: p-th moment of
      ``max_{0<=j<=M n^alpha} (|zeta_n - xi_{n+j}| ∧ n^alpha)/rho(n)`` and its
      mass above the cutoffs 1, 2, 4, 8
    * ``slow_change_eps*``: ``P{max_{1<=j<=n^alpha} |xi_{n+j} - zeta_n| > eps}``
    * ``last_exit_tail_sum_sup`` / ``_inf``: the tail sum with the event
      ``{sup (resp. inf)_{j>=k} j^-alpha (xi_j + (j-n) mu) <= w0}``

    A condition passes when its estimates do not increase over the upper
    half of the grid by more than two joint standard errors.
    """
    tp = tp or perturbation.trunc
    grid = [int(n) for n in grid]
    if not grid or any(n < 1 for n in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("grid must be a non-empty increasing sequence of positive integers")
    if reps < 1000:
        raise ConfigError("reps must be >= 1000")
    mu = _positive_mu(increments)
    if M is None:
        M = tp.window_M(mu)
    if horizon is None:
        horizon = diagnostics_horizon(grid[-1], tp, M)

    def block(ss, rows):
        _, xi = PathStream(increments, perturbation, rows, ss).take(horizon)
        return {f"{n}": _row_stats(xi, n, tp, mu, M) for n in grid}

    parts = map_blocks(block, reps, seed, block_size)
    report = DiagnosticsReport(meta={"M": M, "horizon": horizon, "reps": reps, "mu": mu, "trunc": tp.to_dict()})
    names = list(parts[0][str(grid[0])].keys())
    table: dict[str, list[Estimate]] = {c: [] for c in names}
    for n in grid:
        for c in names:
            table[c].append(mean_se(np.concatenate([part[str(n)][c] for part in parts])))
    for c in names:
        ok = trend_passes([e.value for e in table[c]], [e.std_error for e in table[c]])
        for n, e in zip(grid, table[c]):
            report.records.append(DiagnosticRecord(c, n, e.value, e.std_error, ok))
    return report


def early_stop_trend(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b_grid,
    reps: int,
    seed: SeedLike,
    delta0: float | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
) -> list[dict]:
    """``b P{T_b <= delta0 b / mu}`` along a boundary grid, with SEs."""
    mu = _positive_mu(increments)
    delta0 = perturbation.trunc.delta0 if delta0 is None else delta0
    rows = []
    for i, b in enumerate(b_grid):
        batch, _ = simulate_T_b_batch(increments, perturbation, b, reps, child(seed, i), max_steps)
        est = mean_se(b * (batch.stop_index <= delta0 * b / mu))
        rows.append({"b": float(b), "estimate": est.value, "std_error": est.std_error})
    ok = trend_passes([r["estimate"] for r in rows], [r["std_error"] for r in rows])
    for r in rows:
        r["pass"] = ok
    return rows
