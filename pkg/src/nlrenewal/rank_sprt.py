"""Two-sample rank sequential probability ratio test against a Lehmann alternative.

Pairs ``(x, y)`` arrive one at a time, x from F and y from G. The test of
``G = F`` against ``G = F^Delta`` uses the rank log-likelihood ratio, which
by Savage's formula is

    Z_n = n log Delta - sum_{k=1}^{2n} log(1 + (Delta - 1) y_k / k)

where ``y_k`` counts G-observations among the k smallest of the combined
sample. The data are generated with F uniform and ``G = F^A``.

Z_n splits into a random walk S_n with i.i.d. per-pair increments and a
perturbation xi_n = Z_n - S_n whose centred size grows like sqrt(log n)
under F = G.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _lehmann
from .constants import DEFAULT_QUADRATURE, QuadratureSpec, eta_of, quad
from .errors import ConfigError, DriftError, ShapeError, TieError
from .parallel import BLOCK_SIZE, SeedLike, as_seed_sequence, child, concat, generator, map_blocks
from .renewal_core import CrossingBatch, CrossingRecord, Estimate, RenewalConstants, mean_se, variance_se
from .rng_models import CHUNK

DEFAULT_MAX_PAIRS = 100_000


@dataclass(frozen=True)
class RankSprtConfig:
    """Test of G = F against G = F^Delta on data with G = F^A.

    The test stops when Z_n < -a or Z_n > b.
    """

    Delta: float
    A: float
    a: float
    b: float

    def __post_init__(self):
        if not (self.Delta > 0 and self.A > 0):
            raise ConfigError("Delta and A must be positive")
        if not (self.a > 0 and self.b > 0):
            raise ConfigError("boundaries a and b must be positive")

    @property
    def eta(self) -> float:
        return eta_of(self.Delta)

    @classmethod
    def from_dict(cls, d: dict) -> "RankSprtConfig":
        try:
            return cls(**{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# the rank log-likelihood


def rank_loglik(g_flags, Delta: float) -> float:
    """Z_n from G-flags listed in increasing order of the combined sample."""
    flags = np.asarray(g_flags, dtype=np.int8)
    if flags.ndim != 1 or flags.size == 0 or flags.size % 2 or int(flags.sum()) * 2 != flags.size:
        raise ShapeError("need equally many F- and G-observations")
    if not Delta > 0:
        raise ConfigError("Delta must be positive")
    if Delta == 1.0:
        return 0.0
    return float(_lehmann.savage_z(flags, Delta))


def swap_samples(g_flags) -> np.ndarray:
    """Flags after exchanging the roles of the two samples."""
    return 1 - np.asarray(g_flags, dtype=np.int8)


def likelihood_total(n: int, Delta: float) -> float:
    """``sum_config exp(Z_n) P_0(config)`` over all rank configurations.

    Under G = F every placement of the n G-observations among the 2n
    positions is equally likely, so this equals 1 for every n and Delta.
    """
    m = 2 * n
    total = []
    for pos in itertools.combinations(range(m), n):
        flags = np.zeros(m, np.int8)
        flags[list(pos)] = 1
        total.append(math.exp(rank_loglik(flags, Delta)))
    return math.fsum(total) / math.comb(m, n)


class RankState:
    """Ordered combined sample with its G-flags and prefix counts y_k."""

    def __init__(self, Delta: float):
        if not Delta > 0:
            raise ConfigError("Delta must be positive")
        self.Delta = float(Delta)
        self.values: list[float] = []
        self.g_flags: list[int] = []
        self.y = np.zeros(0, dtype=np.int64)
        self.z = 0.0

    @property
    def n(self) -> int:
        return len(self.values) // 2

    def copy(self) -> "RankState":
        new = RankState(self.Delta)
        new.values = list(self.values)
        new.g_flags = list(self.g_flags)
        new.y = self.y.copy()
        new.z = self.z
        return new

    def push(self, x: float, y: float) -> "RankState":
        """Insert the pair in place; raises TieError on a repeated value."""
        if x == y:
            raise TieError("x and y coincide")
        for v in (x, y):
            i = bisect.bisect_left(self.values, v)
            if i < len(self.values) and self.values[i] == v:
                raise TieError(f"value {v!r} already in the combined sample")
        lo, hi = (x, y) if x < y else (y, x)
        lo_g = int(y < x)
        p_lo = bisect.bisect_left(self.values, lo)
        p_hi = bisect.bisect_left(self.values, hi) + 1
        self.values.insert(p_lo, lo)
        self.g_flags.insert(p_lo, lo_g)
        self.values.insert(p_hi, hi)
        self.g_flags.insert(p_hi, 1 - lo_g)
        # shift the old prefix counts past each insertion point
        old = self.y
        y_new = np.empty(old.size + 2, dtype=np.int64)
        y_new[:p_lo] = old[:p_lo]
        y_new[p_lo] = (old[p_lo - 1] if p_lo else 0) + lo_g
        y_new[p_lo + 1:p_hi] = old[p_lo:p_hi - 1] + lo_g
        y_new[p_hi] = y_new[p_hi - 1] + (1 - lo_g)
        y_new[p_hi + 1:] = old[p_hi - 1:] + 1
        self.y = y_new
        self.z = self._z_from_prefix()
        return self

    def _z_from_prefix(self) -> float:
        if self.Delta == 1.0:
            return 0.0
        k = np.arange(1, self.y.size + 1, dtype=np.float64)
        return self.n * math.log(self.Delta) - float(np.log1p((self.Delta - 1.0) * self.y / k).sum())


def step(state: RankState, x_from_F: float, y_from_G: float) -> RankState:
    """New state with one more pair; the input state is left unchanged."""
    return state.copy().push(x_from_F, y_from_G)


# ---------------------------------------------------------------------------
# running the test


def _boundary_record(n: int, z: float, s: float, cfg: RankSprtConfig) -> CrossingRecord:
    if z > cfg.b:
        return CrossingRecord(n, z - cfg.b, s, z, False, False)
    return CrossingRecord(n, -cfg.a - z, s, z, True, False)


def _check_pairs(max_pairs: int) -> None:
    if max_pairs < 1:
        raise ConfigError("max_pairs must be >= 1")


def run_sprt(config: RankSprtConfig, seed: SeedLike, max_pairs: int = DEFAULT_MAX_PAIRS) -> CrossingRecord:
    """One run of the test. ``stopped_sum`` is the linear part S at the stop.

    Pairs come in chunks from one stream; a pair that ties with the stored
    sample is replaced by a draw from a separate stream.
    """
    _check_pairs(max_pairs)
    ss = as_seed_sequence(seed)
    rng = generator(child(ss, 0))
    tie_rng = generator(child(ss, 2))
    state = RankState(config.Delta)
    s = 0.0
    n = 0
    while n < max_pairs:
        xs, ys = _lehmann.draw_pairs(rng, (CHUNK,), config.A)
        for x, y in zip(xs.tolist(), ys.tolist()):
            while True:
                try:
                    state.push(x, y)
                    break
                except TieError:
                    x, y = (float(v[0]) for v in _lehmann.draw_pairs(tie_rng, (1,), config.A))
            n += 1
            s += float(_lehmann.walk_increment(x, y, config.Delta, config.A))
            if state.z > config.b or state.z < -config.a:
                return _boundary_record(n, state.z, s, config)
            if n == max_pairs:
                break
    return CrossingRecord(max_pairs, math.nan, s, state.z, False, True)


def _sprt_block(config: RankSprtConfig, rows: int, ss, max_pairs: int) -> dict[str, np.ndarray]:
    rng = generator(child(ss, 0))
    tie_rng = generator(child(ss, 2))
    out = {
        "stop": np.full(rows, max_pairs, np.int64),
        "stopped_value": np.full(rows, np.nan),
        "stopped_sum": np.full(rows, np.nan),
        "hit_lower": np.zeros(rows, bool),
        "censored": np.ones(rows, bool),
    }
    batch = _lehmann.RankBatch(rows, config.Delta)
    active = np.arange(rows)
    s = np.zeros(rows)
    n = 0
    while n < max_pairs and active.size:
        xs, ys = _lehmann.draw_pairs(rng, (rows, CHUNK), config.A)
        for j in range(min(CHUNK, max_pairs - n)):
            x, y = xs[active, j], ys[active, j]
            tied = batch.ties(x, y)
            while tied.any():
                rx, ry = _lehmann.draw_pairs(tie_rng, (int(tied.sum()),), config.A)
                x[tied], y[tied] = rx, ry
                tied = batch.ties(x, y)
            z = batch.push(x, y)
            s[active] += _lehmann.walk_increment(x, y, config.Delta, config.A)
            n += 1
            stop = (z > config.b) | (z < -config.a)
            if stop.any():
                r = active[stop]
                out["stop"][r] = n
                out["stopped_value"][r] = z[stop]
                out["stopped_sum"][r] = s[r]
                out["hit_lower"][r] = z[stop] < -config.a
                out["censored"][r] = False
                batch.keep(~stop)
                active = active[~stop]
                if not active.size:
                    break
        # censored rows keep the value reached at the budget
    if active.size:
        out["stopped_value"][active] = _lehmann.savage_z(batch.flags, config.Delta)
        out["stopped_sum"][active] = s[active]
    return out


def run_sprt_batch(
    config: RankSprtConfig,
    reps: int,
    seed: SeedLike,
    max_pairs: int = DEFAULT_MAX_PAIRS,
    block_size: int = BLOCK_SIZE,
) -> CrossingBatch:
    """``reps`` independent runs, vectorised across the rows of each block."""
    _check_pairs(max_pairs)
    parts = map_blocks(lambda ss, rows: _sprt_block(config, rows, ss, max_pairs), reps, seed, block_size)
    raw = concat(parts)
    return CrossingBatch.from_arrays(
        raw["stop"], raw["stopped_value"], raw["stopped_sum"], raw["censored"], config.b, raw["hit_lower"], config.a
    )


def sprt_rows(batch: CrossingBatch) -> list[dict]:
    """Per-run rows ``{rep, stop_n, boundary, overshoot}``."""
    rows = []
    for i in range(len(batch)):
        boundary = "censored" if batch.censored[i] else ("lower" if batch.hit_lower[i] else "upper")
        rows.append({"rep": i, "stop_n": int(batch.stop_index[i]), "boundary": boundary,
                     "overshoot": float(batch.overshoot[i])})
    return rows


# ---------------------------------------------------------------------------
# expected sample size


def predict_ET_rank(
    config: RankSprtConfig,
    constants: RenewalConstants,
    c_eta: float | None = None,
    h_int: float | None = None,
    reflect: bool = False,
    xi_mean: float | None = None,
) -> float:
    """Predicted expected number of pairs until the test stops.

    With ``mu > 0`` the upper boundary b is the relevant one:

    * ``A != 1``: ``(b - h_int + correction) / mu``
    * ``A == 1``: ``(b - (eta^2/2) log(2b/mu) + C(eta) + correction) / mu``

    With ``reflect=True`` the walk is mirrored (``-Z`` against the lower
    boundary a), as is needed when the drift is negative. ``constants``
    must then describe the mirrored walk, so its ``mu`` is positive, and
    the perturbation terms change sign.

    ``xi_mean`` replaces the limiting perturbation mean of the ``A != 1``
    branch (``h_int`` by default), e.g. with ``constants.xi_mean_limit``.
    """
    mu = constants.mu
    if not mu > 0:
        raise DriftError(
            f"prediction needs a positive drift (got mu={mu}); mirror the walk and pass reflect=True"
        )
    sign = -1.0 if reflect else 1.0
    bound = config.a if reflect else config.b
    corr = constants.overshoot_correction
    if config.A == 1.0:
        if c_eta is None:
            raise ConfigError("the A == 1 prediction needs C(eta)")
        eta = config.eta
        mean_xi = 0.5 * eta**2 * math.log(2.0 * bound / mu) - c_eta
    elif xi_mean is not None:
        mean_xi = xi_mean
    else:
        if h_int is None:
            raise ConfigError("the A != 1 prediction needs the h integral")
        mean_xi = h_int
    return (bound - sign * mean_xi + corr) / mu


# ---------------------------------------------------------------------------
# the perturbation under F = G


def null_xi_samples(n: int, Delta: float, reps: int, seed: SeedLike, block_size: int = 128) -> np.ndarray:
    """``reps`` draws of xi_n under F = G via the sorted-sample closed form."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    eta = eta_of(Delta)

    def block(ss, rows):
        u = generator(ss).random((rows, n, 2))
        vals, flags = _lehmann.sort_combined(u[..., 0], u[..., 1])
        return {"xi": _lehmann.null_xi(vals, flags, eta)}

    return concat(map_blocks(block, reps, seed, block_size))["xi"]


@dataclass
class XiScalingReport:
    Delta: float
    eta: float
    target: float
    rows: list[dict] = field(default_factory=list)
    fitted_limit: float = math.nan

    @property
    def headline(self) -> float:
        return self.fitted_limit


def xi_scaling_check(
    Delta: float,
    n_grid,
    reps: int,
    seed: SeedLike,
    c_eta_value: float | None = None,
) -> XiScalingReport:
    """``Var(xi_n)/log n`` and the centred mean of xi_n under F = G.

    Each n uses an independent derived seed. ``mean_residual`` is
    ``mean(xi_n) - ((eta^2/2) log(2n) - C(eta))``; ``C(eta)`` is computed
    if not supplied. The fitted limit comes from a least-squares fit of
    ``ratio = L + c / log n`` over the grid (a single grid point reports its
    own ratio).
    """
    from .constants import c_eta

    eta = eta_of(Delta)
    n_grid = [int(n) for n in n_grid]
    if not n_grid or any(n < 2 for n in n_grid):
        raise ConfigError("n_grid needs values >= 2")
    if reps < 10:
        raise ConfigError("reps must be >= 10")
    if c_eta_value is None:
        c_eta_value = 0.0 if eta == 0 else c_eta(eta).extrapolated
    report = XiScalingReport(Delta, eta, eta**4 + eta**2)
    for i, n in enumerate(n_grid):
        xi = null_xi_samples(n, Delta, reps, child(seed, i))
        v, v_se = variance_se(xi)
        ln = math.log(n)
        res = mean_se(xi - (0.5 * eta**2 * math.log(2 * n) - c_eta_value))
        report.rows.append({
            "n": n, "var_ratio": v / ln, "var_ratio_se": v_se / ln,
            "mean_residual": res.value, "se": res.std_error,
        })
    ratios = np.array([r["var_ratio"] for r in report.rows])
    if len(n_grid) >= 2:
        design = np.column_stack([np.ones(len(n_grid)), 1.0 / np.log(n_grid)])
        report.fitted_limit = float(np.linalg.lstsq(design, ratios, rcond=None)[0][0])
    else:
        report.fitted_limit = float(ratios[0])
    return report


# ---------------------------------------------------------------------------
# decomposition by quadrature


@dataclass(frozen=True)
class DecompositionSample:
    n: int
    z: float
    s: float
    xi: float
    x: np.ndarray = field(repr=False, default=None)
    y: np.ndarray = field(repr=False, default=None)


def _integral_dH_over(t: float, A: float, weight_denominator: float, q: QuadratureSpec) -> float:
    """``int_t^1 dH / (F + D G)`` in the variable v = log s (bounded integrand)."""
    if t >= 1.0:
        return 0.0

    def f(v):
        r = math.exp((A - 1.0) * v)
        return (1.0 + A * r) / (1.0 + weight_denominator * r)

    return quad(f, math.log(t), 0.0, q)[0]


def increment_by_quadrature(x: float, y: float, Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """Per-pair walk increment with the two integrals done numerically."""
    total = math.log(Delta)
    for t, w in ((x, 1.0), (y, Delta)):
        r = t ** (A - 1.0)
        total += math.log1p(r) - math.log1p(Delta * r)
        total += _integral_dH_over(t, A, 1.0, q) - w * _integral_dH_over(t, A, Delta, q)
    return total


def decompose(n: int, Delta: float, A: float, seed: SeedLike, q: QuadratureSpec = DEFAULT_QUADRATURE) -> DecompositionSample:
    """Z_n, its linear part S_n (by quadrature) and xi_n = Z_n - S_n."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if not (Delta > 0 and A > 0):
        raise ConfigError("Delta and A must be positive")
    x, y = _lehmann.draw_pairs(generator(seed), (n,), A)
    _, flags = _lehmann.sort_combined(x, y)
    z = rank_loglik(flags, Delta)
    if Delta == 1.0:
        s = 0.0
    else:
        s = math.fsum(increment_by_quadrature(float(a), float(b), Delta, A, q) for a, b in zip(x, y))
    return DecompositionSample(n, z, s, z - s, x, y)


def mc_drift_slope(Delta: float, A: float, n1: int, n2: int, reps: int, seed: SeedLike, block_size: int = 64) -> Estimate:
    """Monte Carlo ``(E Z_{n2} - E Z_{n1}) / (n2 - n1)`` along common paths.

    The difference of two points on the same path cancels the bounded
    part of the perturbation mean, leaving the drift up to ``O(1/n1)``.
    """
    if not 1 <= n1 < n2:
        raise ConfigError("need 1 <= n1 < n2")

    def block(ss, rows):
        x, y = _lehmann.draw_pairs(generator(ss), (rows, n2), A)
        _, f1 = _lehmann.sort_combined(x[:, :n1], y[:, :n1])
        _, f2 = _lehmann.sort_combined(x, y)
        return {"d": (_lehmann.savage_z(f2, Delta) - _lehmann.savage_z(f1, Delta)) / (n2 - n1)}

    return mean_se(concat(map_blocks(block, reps, seed, block_size))["d"])
