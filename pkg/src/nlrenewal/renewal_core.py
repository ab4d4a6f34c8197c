"""Linear renewal machinery: the walk S_n, its first passage, and the
renewal constants that enter every expected-stopping-time expansion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._crossing import run_block
from .errors import ConfigError, DriftError
from .parallel import BLOCK_SIZE, SeedLike, as_seed_sequence, child, concat, generator, map_blocks
from .rng_models import IncrementModel, PerturbationModel

DEFAULT_MAX_STEPS = 10**7


@dataclass(frozen=True)
class CrossingRecord:
    """Outcome of one stopped path.

    ``overshoot`` is measured from the boundary that was hit (upward from b,
    or downward from -a on the lower side) and is NaN for censored paths.
    """

    stop_index: int
    overshoot: float
    stopped_sum: float
    stopped_value: float
    hit_lower: bool = False
    censored: bool = False


@dataclass
class CrossingBatch:
    """Column-oriented collection of crossing records."""

    stop_index: np.ndarray
    overshoot: np.ndarray
    stopped_sum: np.ndarray
    stopped_value: np.ndarray
    hit_lower: np.ndarray
    censored: np.ndarray

    def __len__(self) -> int:
        return len(self.stop_index)

    def record(self, i: int) -> CrossingRecord:
        return CrossingRecord(
            int(self.stop_index[i]), float(self.overshoot[i]), float(self.stopped_sum[i]),
            float(self.stopped_value[i]), bool(self.hit_lower[i]), bool(self.censored[i]),
        )

    @property
    def n_censored(self) -> int:
        return int(self.censored.sum())

    @property
    def ok(self) -> np.ndarray:
        return ~self.censored

    @classmethod
    def from_arrays(cls, stop, value, ssum, censored, b: float, hit_lower=None, lower: float | None = None) -> "CrossingBatch":
        hit_lower = np.zeros(len(stop), bool) if hit_lower is None else hit_lower
        over = np.where(hit_lower, -(lower or 0.0) - value, value - b)
        over = np.where(censored, np.nan, over)
        return cls(stop.copy(), over, ssum.copy(), value.copy(), hit_lower.copy(), censored.copy())

    @classmethod
    def from_block(cls, raw: dict[str, np.ndarray], b: float, lower: float | None = None) -> "CrossingBatch":
        return cls.from_arrays(
            raw["stop"], raw["stopped_value"], raw["stopped_sum"], raw["censored"], b, raw["hit_lower"], lower
        )


def _check_budget(max_steps: int) -> None:
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")


def simulate_linear_crossing(model: IncrementModel, b: float, seed: SeedLike, max_steps: int = DEFAULT_MAX_STEPS) -> CrossingRecord:
    """``tau_b = inf{n >= 1: S_n > b}`` on the path generated by ``seed``."""
    _check_budget(max_steps)
    raw = run_block(model, PerturbationModel.zero(), 1, as_seed_sequence(seed), b, max_steps)
    return CrossingBatch.from_block(raw, b).record(0)


def simulate_linear_crossings(
    model: IncrementModel,
    b: float,
    reps: int,
    seed: SeedLike,
    max_steps: int = DEFAULT_MAX_STEPS,
    block_size: int = BLOCK_SIZE,
) -> CrossingBatch:
    _check_budget(max_steps)
    zero = PerturbationModel.zero()
    parts = map_blocks(lambda ss, rows: run_block(model, zero, rows, ss, b, max_steps), reps, seed, block_size)
    return CrossingBatch.from_block(concat(parts), b)


class Estimate(NamedTuple):
    value: float
    std_error: float


def mean_se(x: np.ndarray) -> Estimate:
    """Sample mean and its standard error (0 for fewer than two values)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return Estimate(math.nan, math.nan)
    if x.size == 1:
        return Estimate(float(x[0]), 0.0)
    return Estimate(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)))


def variance_se(x: np.ndarray) -> Estimate:
    """Sample variance and its standard error from the fourth central moment."""
    x = np.asarray(x, dtype=float)
    m = x.size
    if m < 4:
        return Estimate(float(x.var(ddof=1)) if m > 1 else 0.0, math.nan)
    v = float(x.var(ddof=1))
    m4 = float(np.mean((x - x.mean()) ** 4))
    se2 = (m4 - v * v * (m - 3) / (m - 1)) / m
    return Estimate(v, math.sqrt(max(se2, 0.0)))


@dataclass
class RenewalConstants:
    """Constants of the linear walk; ``overshoot_correction`` is derived."""

    mu: float
    sigma2: float | None
    e_s_tau0: float
    e_s_tau0_sq: float
    std_errors: dict[str, float] = field(default_factory=dict)
    n_censored: int = 0

    def __post_init__(self):
        if not self.e_s_tau0 > 0:
            raise ConfigError("E S_tau0 must be positive")

    @property
    def overshoot_correction(self) -> float:
        return self.e_s_tau0_sq / (2.0 * self.e_s_tau0)

    @classmethod
    def exact(cls, mu: float, sigma2: float | None, e_s_tau0: float, e_s_tau0_sq: float) -> "RenewalConstants":
        """Constants supplied analytically, with zero standard errors."""
        se = {k: 0.0 for k in ("mu", "sigma2", "e_s_tau0", "e_s_tau0_sq", "overshoot_correction")}
        return cls(mu, sigma2, e_s_tau0, e_s_tau0_sq, se)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu, "sigma2": self.sigma2, "e_s_tau0": self.e_s_tau0,
            "e_s_tau0_sq": self.e_s_tau0_sq, "overshoot_correction": self.overshoot_correction,
            "std_errors": dict(self.std_errors), "n_censored": self.n_censored,
        }


def estimate_renewal_constants(
    model: IncrementModel,
    reps: int,
    seed: SeedLike,
    max_steps: int = DEFAULT_MAX_STEPS,
    use_declared: bool = True,
) -> RenewalConstants:
    """Monte Carlo ``E S_tau0`` and ``E S_tau0^2`` from ``reps`` ladder epochs.

    ``mu`` and ``sigma2`` come from the model when it declares them (and
    ``use_declared``), otherwise from ``reps`` fresh increments. The
    standard error of the overshoot correction uses the delta method with
    the sample covariance of ``(S, S^2)``.
    """
    if reps < 1000:
        raise ConfigError("reps must be >= 1000")
    mu, sigma2 = (model.declared_mu, model.declared_sigma2) if use_declared else (None, None)
    se: dict[str, float] = {}
    if mu is None or sigma2 is None:
        draws = model.sample(generator(child(seed, 1)), reps)
        if mu is None:
            mu, se["mu"] = mean_se(draws)
        if sigma2 is None:
            sigma2 = float(draws.var(ddof=1))
            se["sigma2"] = float(np.sqrt(max(np.var((draws - draws.mean()) ** 2, ddof=1), 0.0) / reps))
    se.setdefault("mu", 0.0)
    se.setdefault("sigma2", 0.0)
    if not mu > 0:
        raise DriftError(f"renewal constants need a positive drift, got mu={mu}")

    batch = simulate_linear_crossings(model, 0.0, reps, child(seed, 0), max_steps)
    s = batch.stopped_sum[batch.ok]
    m1, se["e_s_tau0"] = mean_se(s)
    m2, se["e_s_tau0_sq"] = mean_se(s * s)
    if s.size > 1:
        cov = np.cov(np.vstack([s, s * s]), ddof=1) / s.size
        grad = np.array([-m2 / (2 * m1 * m1), 1.0 / (2 * m1)])
        se["overshoot_correction"] = float(np.sqrt(max(grad @ cov @ grad, 0.0)))
    else:
        se["overshoot_correction"] = 0.0
    return RenewalConstants(float(mu), None if sigma2 is None else float(sigma2), m1, m2, se, batch.n_censored)


class WaldReport(NamedTuple):
    estimate: float
    std_error: float
    n_censored: int

    @property
    def passed(self) -> bool:
        return abs(self.estimate) <= 4.0 * self.std_error


def wald_check(
    model: IncrementModel,
    b: float,
    reps: int,
    seed: SeedLike,
    perturbation: PerturbationModel | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    mu: float | None = None,
) -> WaldReport:
    """``E S_T - mu E T`` at the first passage of Z over b, with its SE.

    The estimate is the mean of the per-path values ``S_T - mu T``, so its
    standard error comes from the same sample. Censored paths are dropped
    and counted.
    """
    if reps < 1000:
        raise ConfigError("reps must be >= 1000")
    mu = model.declared_mu if mu is None else mu
    pert = perturbation or PerturbationModel.zero()
    parts = map_blocks(lambda ss, rows: run_block(model, pert, rows, ss, b, max_steps), reps, seed)
    raw = concat(parts)
    ok = ~raw["censored"]
    d = raw["stopped_sum"][ok] - mu * raw["stop"][ok]
    est, se = mean_se(d)
    return WaldReport(est, se, int((~ok).sum()))
