"""Expansions of the expected stopping time and their Monte Carlo checks.

All predictors work in units of steps. ``ExpansionEstimate`` reports the
comparison in units of ``mu * E T`` because that is the scale on which the
second-order expansion has an ``o(1)`` remainder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import _lehmann
from .errors import ConfigError, DriftError
from .parallel import SeedLike, child, concat, generator, map_blocks
from .perturbed_walk import simulate_T_b_batch
from .renewal_core import DEFAULT_MAX_STEPS, Estimate, RenewalConstants, mean_se
from .rng_models import IncrementModel, PathStream, PerturbationModel, TruncationParams

DEFAULT_BAND_MULTIPLIER = 10.0


class Interval(NamedTuple):
    center: float
    lo: float
    hi: float

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    @property
    def half_width(self) -> float:
        return 0.5 * (self.hi - self.lo)


def _check_mu(constants: RenewalConstants) -> float:
    if not constants.mu > 0:
        raise DriftError(f"expansion needs a positive drift, got mu={constants.mu}")
    return constants.mu


def n_b(b: float, mu: float) -> int:
    """``floor(b / |mu|)``, the step at which the perturbation is read."""
    return math.floor(b / abs(mu))


def predict_ET_second_order(constants: RenewalConstants, b: float, e_zeta_nb: float) -> float:
    """``(b - E zeta_{n_b} + E S_tau0^2 / (2 E S_tau0)) / mu``."""
    mu = _check_mu(constants)
    return (b - e_zeta_nb + constants.overshoot_correction) / mu


def predict_ET_intermediate(
    constants: RenewalConstants,
    b: float,
    e_zeta_nb: float,
    rho_value: float,
    multiplier: float = DEFAULT_BAND_MULTIPLIER,
) -> Interval:
    """Band ``(b - E zeta_{n_b})/mu ± multiplier * rho(b)/mu`` for E T."""
    mu = _check_mu(constants)
    center = (b - e_zeta_nb) / mu
    half = multiplier * rho_value / mu
    return Interval(center, center - half, center + half)


def predict_var(
    constants: RenewalConstants,
    b: float,
    rho_value: float,
    multiplier: float = DEFAULT_BAND_MULTIPLIER,
) -> Interval:
    """Band ``sigma^2 b / mu^3 ± multiplier (sqrt(b) rho(b) + rho(b)^2)`` for Var T."""
    mu = _check_mu(constants)
    if constants.sigma2 is None or not math.isfinite(constants.sigma2):
        raise ConfigError("variance prediction needs a known, finite sigma^2")
    center = constants.sigma2 * b / mu**3
    half = multiplier * (math.sqrt(b) * rho_value + rho_value**2)
    return Interval(center, center - half, center + half)


# ---------------------------------------------------------------------------
# the perturbation at n_b


def _rank_xi_block(increments: IncrementModel, n: int, rows: int, ss) -> np.ndarray:
    p = increments.p
    x, y = _lehmann.draw_pairs(generator(ss), (rows, n), p["A"])
    z, s = _lehmann.z_and_s(x, y, p["Delta"], p["A"])
    return z - s


def sample_xi_at(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    n: int,
    reps: int,
    seed: SeedLike,
    block_size: int = 1024,
) -> np.ndarray:
    """``reps`` independent draws of xi_n."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if perturbation.kind == "rank_residual":
        if increments.kind != "rank_sprt":
            raise ConfigError("rank_residual needs rank_sprt increments")
        parts = map_blocks(lambda ss, rows: {"xi": _rank_xi_block(increments, n, rows, ss)}, reps, seed, block_size)
    else:
        parts = map_blocks(
            lambda ss, rows: {"xi": PathStream(increments, perturbation, rows, ss).take(n)[1][:, n - 1]},
            reps, seed, block_size,
        )
    return concat(parts)["xi"]


def _exact_perturbation(perturbation: PerturbationModel) -> float | None:
    if perturbation.kind == "zero":
        return 0.0
    if perturbation.kind == "constant":
        return perturbation.c
    return None


def estimate_E_zeta_nb(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    tp: TruncationParams | None,
    b: float,
    reps: int,
    seed: SeedLike,
) -> Estimate:
    """Monte Carlo ``E zeta_{n_b}`` with ``n_b = floor(b/|mu|)``, and its SE.

    Zero and constant perturbations are handled exactly (SE 0).
    """
    if reps < 1000:
        raise ConfigError("reps must be >= 1000")
    tp = tp or perturbation.trunc
    nb = max(n_b(b, increments.declared_mu), 1)
    c = _exact_perturbation(perturbation)
    if c is not None:
        return Estimate(float(tp.zeta(c, nb)), 0.0)
    xi = sample_xi_at(increments, perturbation, nb, reps, seed)
    return mean_se(tp.zeta(xi, nb))


def estimate_E_xi_nb(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b: float,
    reps: int,
    seed: SeedLike,
) -> Estimate:
    """Monte Carlo ``E xi_{n_b}`` (untruncated), and its SE."""
    if reps < 1000:
        raise ConfigError("reps must be >= 1000")
    nb = max(n_b(b, increments.declared_mu), 1)
    c = _exact_perturbation(perturbation)
    if c is not None:
        return Estimate(float(c), 0.0)
    return mean_se(sample_xi_at(increments, perturbation, nb, reps, seed))


# ---------------------------------------------------------------------------
# Monte Carlo comparison along a boundary grid


@dataclass
class ExpansionEstimate:
    b: float
    predicted_mu_ET: float
    mc_mu_ET: float
    mc_se: float
    residual: float
    residual_se: float
    e_zeta_nb: float
    e_xi_nb: float
    correction: float
    n_b: int
    mc_var_T: float = math.nan
    band_lo: float = math.nan
    band_hi: float = math.nan
    n_censored: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExpansionComparison:
    rows: list[ExpansionEstimate]
    residual_decay: bool
    final_within: bool
    meta: dict = field(default_factory=dict)


def residual_decays(rows: list[ExpansionEstimate], k: float = 2.0) -> bool:
    """``|residual|`` non-increasing along the grid within ``k`` joint SEs."""
    for a, c in zip(rows, rows[1:]):
        if abs(c.residual) > abs(a.residual) + k * math.hypot(a.residual_se, c.residual_se):
            return False
    return True


def compare_expansion(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    b_grid,
    reps: int,
    seed: SeedLike,
    constants: RenewalConstants,
    tp: TruncationParams | None = None,
    multiplier: float = DEFAULT_BAND_MULTIPLIER,
    max_steps: int = DEFAULT_MAX_STEPS,
    final_tolerance: float = 0.5,
) -> ExpansionComparison:
    """Second-order prediction against Monte Carlo ``mu E T_b`` on a b-grid.

    Each boundary uses an independent seed derived from ``seed``. The
    perturbation at ``n_b`` is read off the same paths that give ``T_b``,
    so the residual ``mu T - b + zeta_{n_b} - correction`` is a per-path
    quantity and its SE includes the path-level correlation. The SE of the
    Monte Carlo correction is added in quadrature. The band is the
    intermediate-order interval, scaled by ``mu``.
    """
    tp = tp or perturbation.trunc
    mu = _check_mu(constants)
    b_grid = [float(b) for b in b_grid]
    if not b_grid or any(c <= a for a, c in zip(b_grid, b_grid[1:])):
        raise ConfigError("b_grid must be non-empty and strictly increasing")
    corr = constants.overshoot_correction
    corr_se = constants.std_errors.get("overshoot_correction", 0.0)
    rows = []
    for i, b in enumerate(b_grid):
        nb = max(n_b(b, mu), 1)
        batch, xi_nb = simulate_T_b_batch(increments, perturbation, b, reps, child(seed, i), max_steps, xi_at=nb)
        ok = batch.ok & np.isfinite(xi_nb)
        t = batch.stop_index[ok].astype(float)
        zeta_nb = tp.zeta(xi_nb[ok], nb)
        mc = mean_se(mu * t)
        ez = mean_se(zeta_nb)
        ex = mean_se(xi_nb[ok])
        res = mean_se(mu * t - b + zeta_nb - corr)
        band = predict_ET_intermediate(constants, b, ez.value, tp.rho(b), multiplier)
        rows.append(ExpansionEstimate(
            b=b,
            predicted_mu_ET=b - ez.value + corr,
            mc_mu_ET=mc.value,
            mc_se=mc.std_error,
            residual=res.value,
            residual_se=math.hypot(res.std_error, corr_se),
            e_zeta_nb=ez.value,
            e_xi_nb=ex.value,
            correction=corr,
            n_b=nb,
            mc_var_T=float(t.var(ddof=1)) if t.size > 1 else math.nan,
            band_lo=mu * band.lo,
            band_hi=mu * band.hi,
            n_censored=int((~ok).sum()),
        ))
    last = rows[-1]
    final_within = abs(last.residual) <= max(4.0 * last.residual_se, final_tolerance)
    return ExpansionComparison(rows, residual_decays(rows), final_within, {"mu": mu, "reps": reps})


def rank_null_mean(n: int, eta: float, c_eta_value: float) -> float:
    """Large-n mean of the rank perturbation under F = G."""
    return 0.5 * eta**2 * math.log(2 * n) - c_eta_value


__all__ = [
    "Interval", "ExpansionEstimate", "ExpansionComparison", "predict_ET_second_order",
    "predict_ET_intermediate", "predict_var", "estimate_E_zeta_nb", "estimate_E_xi_nb",
    "sample_xi_at", "compare_expansion", "residual_decays", "n_b", "rank_null_mean",
]
