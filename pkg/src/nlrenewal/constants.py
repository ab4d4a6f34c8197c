"""Deterministic ingredients of the rank-SPRT sample-size expansion.

All integrals are over (0, 1) against ``d(x + x**A)`` with F uniform and
``G(x) = x**A``. They are evaluated with adaptive Gauss-Kronrod quadrature
(``scipy.integrate.quad``) after a change of variables that removes the
endpoint singularity at 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from .errors import BranchError, ConfigError, DomainError, NumericsError


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-11
    rel_tol: float = 1e-11
    max_subdivisions: int = 200

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ConfigError("quadrature tolerances must be positive")
        if self.max_subdivisions < 1:
            raise ConfigError("max_subdivisions must be >= 1")


DEFAULT_QUADRATURE = QuadratureSpec()


def quad(fn, lo, hi, q: QuadratureSpec = DEFAULT_QUADRATURE) -> tuple[float, float]:
    """``scipy.integrate.quad`` that raises instead of warning."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        out = integrate.quad(
            fn, lo, hi, epsabs=q.abs_tol, epsrel=q.rel_tol, limit=q.max_subdivisions, full_output=1
        )
    value, err = out[0], out[1]
    # ier > 0 appends a message; tolerate it only when the error bar is still small
    if len(out) > 3 and err > 1e3 * max(q.abs_tol, q.rel_tol * abs(value)):
        raise NumericsError(f"quadrature did not converge on ({lo}, {hi}): {out[3]}")
    if not math.isfinite(value):
        raise NumericsError(f"non-finite quadrature result on ({lo}, {hi})")
    return float(value), float(err)


def _check_lehmann(Delta: float, A: float) -> None:
    if not (Delta > 0 and A > 0):
        raise ConfigError(f"Delta and A must be positive, got Delta={Delta}, A={A}")


def _against_dH(g, A: float):
    """Integrand in a variable on (0, 1) equal to ``g(x) d(x + x**A)``.

    For A >= 1 the weight ``1 + A x**(A-1)`` is bounded and x itself is used.
    For A < 1 the substitution u = x**A turns the weight into
    ``1 + u**(1/A - 1)/A``, which is bounded as well.
    """
    if A >= 1.0:
        return lambda x: g(x) * (1.0 + A * x ** (A - 1.0))
    inv = 1.0 / A
    return lambda u: g(u**inv) * (1.0 + u ** (inv - 1.0) / A)


def drift_mu(Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """Drift of the rank log-likelihood when G = F**A.

    ``log Delta + int log((x + x^A)/(x + Delta x^A)) d(x + x^A)``.
    """
    return drift_mu_with_error(Delta, A, q)[0]


def drift_mu_with_error(Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE):
    _check_lehmann(Delta, A)
    if Delta == 1.0:
        return 0.0, 0.0

    def log_psi(x):
        r = x ** (A - 1.0)
        return math.log1p(r) - math.log1p(Delta * r)

    value, err = quad(_against_dH(log_psi, A), 0.0, 1.0, q)
    return math.log(Delta) + value, err


def h_function(x, Delta: float, A: float):
    """``(1-Delta)^2 x^(1+A) / (2 (x + Delta x^A)^2 (x + x^A))``."""
    x = np.asarray(x, dtype=float)
    return (1.0 - Delta) ** 2 * x ** (1.0 + A) / (2.0 * (x + Delta * x**A) ** 2 * (x + x**A))


def h_integral(Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """``int_0^1 h(x) d(x + x^A)``, the limiting mean perturbation for A != 1."""
    return h_integral_with_error(Delta, A, q)[0]


def h_integral_with_error(Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE):
    _check_lehmann(Delta, A)
    if A == 1.0:
        raise BranchError("h_integral applies to A != 1; use c_eta for A == 1")
    if Delta == 1.0:
        return 0.0, 0.0
    # In s = log x the integrand is (1-D)^2 r (1 + A r) / (2 (1 + D r)^2 (1 + r)),
    # r = exp((A-1) s); bounded and exponentially decaying as s -> -inf.
    c = (1.0 - Delta) ** 2 / 2.0

    def integrand(s):
        e = (A - 1.0) * s
        if e <= 0.0:
            r = math.exp(e)
            return c * r * (1.0 + A * r) / ((1.0 + Delta * r) ** 2 * (1.0 + r))
        w = math.exp(-e)  # 1/r, avoids overflow when A < 1
        return c * w * (w + A) / ((w + Delta) ** 2 * (w + 1.0))

    return quad(integrand, -math.inf, 0.0, q)


def xi_mean_limit(Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE) -> float:
    """Limit of ``E xi_n`` for ``A != 1`` from the second-order expansion of Z_n.

    Writing Z_n = n log Delta + n int log(H_n/W_n) dH_n and expanding to
    second order in the empirical processes gives three terms: the quadratic
    term with the exact variances F(1-F), G(1-G), and the diagonal term that
    comes from integrating against dH_n. ``h_integral`` keeps only part of
    this; the two differ in sign and size (see the tests for a Monte Carlo
    check).
    """
    return xi_mean_limit_with_error(Delta, A, q)[0]


def xi_mean_limit_with_error(Delta: float, A: float, q: QuadratureSpec = DEFAULT_QUADRATURE):
    _check_lehmann(Delta, A)
    if A == 1.0:
        raise BranchError("the limiting mean diverges like log n when A == 1; use c_eta")
    if Delta == 1.0:
        return 0.0, 0.0

    # In s = log x with r = x^(A-1): H = x(1+r), W = x(1+Delta r), G = x^A,
    # and the integrand is multiplied by dx/ds = x, which keeps it bounded.
    # For r > 1 the same expression is written in w = 1/r to avoid overflow.
    D = Delta

    def integrand(s):
        e = (A - 1.0) * s
        x = math.exp(s)
        g = math.exp(A * s)
        if e <= 0.0:
            r = math.exp(e)
            quadratic = (1.0 + A * r) * (
                -(1.0 - x + r * (1.0 - g)) / (2.0 * (1.0 + r) ** 2)
                + (1.0 - x + D * D * r * (1.0 - g)) / (2.0 * (1.0 + D * r) ** 2)
            )
            diag_f = (1.0 - x) * (1.0 / (1.0 + r) - 1.0 / (1.0 + D * r))
            diag_g = A * r * (1.0 - g) * (1.0 / (1.0 + r) - D / (1.0 + D * r))
        else:
            w = math.exp(-e)
            quadratic = (w + A) * (
                (1.0 - x) * w * (1.0 / (2.0 * (w + D) ** 2) - 1.0 / (2.0 * (1.0 + w) ** 2))
                + (1.0 - g) * (D * D / (2.0 * (w + D) ** 2) - 1.0 / (2.0 * (1.0 + w) ** 2))
            )
            diag_f = (1.0 - x) * (w / (w + 1.0) - w / (w + D))
            diag_g = A * (1.0 - g) * (1.0 / (w + 1.0) - D / (w + D))
        return quadratic + diag_f + diag_g

    return quad(integrand, -math.inf, 0.0, q)


# ---------------------------------------------------------------------------
# hypergeometric expectations and C(eta)


def _log_factorials(m: int) -> np.ndarray:
    return gammaln(np.arange(m + 1, dtype=np.float64) + 1.0)


def _safe_exp(x: np.ndarray, floor: float = -80.0) -> np.ndarray:
    # terms below e^-80 are dropped; avoids slow subnormal arithmetic
    return np.exp(np.maximum(x, floor)) * (x >= floor)


def hypergeom_log_pmf(n: int, k: int, lf: np.ndarray | None = None):
    """Support and log-pmf of the number of G-items among k drawn from n + n.

    Log-factorials keep every term finite for n in the tens of thousands.
    The terms are grouped so that y and k - y give bitwise-identical values.
    The result is renormalised, which removes the y-independent rounding
    error of the large constant terms.
    """
    if not (1 <= k <= 2 * n):
        raise ConfigError(f"need 1 <= k <= 2n, got n={n}, k={k}")
    if lf is None:
        lf = _log_factorials(2 * n)
    y = np.arange(max(0, k - n), min(k, n) + 1)
    log_pmf = (
        2.0 * lf[n] - (lf[2 * n] - lf[k] - lf[2 * n - k])
        - ((lf[y] + lf[k - y]) + (lf[n - y] + lf[n - k + y]))
    )
    shift = log_pmf.max()
    total = _safe_exp(log_pmf - shift).sum()
    return y, log_pmf - (shift + math.log(total))


def hypergeom_e_log(n: int, k: int, eta: float, lf: np.ndarray | None = None) -> float:
    """Exact ``E log(1 + eta (2 y/k - 1))`` for y ~ hypergeometric(n, n, k).

    Terms for y and k - y are added pairwise (the pmf is symmetric), which
    makes the result an exactly even function of eta in floating point.
    """
    y, log_pmf = hypergeom_log_pmf(n, k, lf)
    lp = np.log(_log_arg(y, k, eta, n))
    p = _safe_exp(log_pmf)
    m = len(y)
    half = m // 2
    # y_i pairs with y_{m-1-i} = k - y_i
    total = float(np.dot(p[:half], lp[:half] + lp[::-1][:half]))
    if m % 2:
        total += float(p[half] * lp[half])
    return total


def _log_arg(y: np.ndarray, k: int, eta: float, n: int) -> np.ndarray:
    arg = 1.0 + eta * ((2 * y - k) / k)
    if arg.min() <= 0.0:
        raise DomainError(f"log argument <= 0 for eta={eta} at n={n}, k={k}")
    return arg


def e_log_sum(n: int, eta: float) -> float:
    """``sum_{k=1}^{2n} E log(1 + eta (2 y_k / k - 1))``."""
    if eta == 0.0:
        return 0.0
    lf = _log_factorials(2 * n)
    return math.fsum(hypergeom_e_log(n, k, eta, lf) for k in range(1, 2 * n + 1))


def c_eta_partial(n: int, eta: float) -> float:
    return e_log_sum(n, eta) + 0.5 * eta**2 * math.log(2 * n)


@dataclass
class CEtaResult:
    eta: float
    partial: dict[int, float]
    extrapolated: float
    err_estimate: float
    warning: str | None = None
    fit: dict[str, float] = field(default_factory=dict)


def doubling_grid(n_max: int, start: int = 50) -> list[int]:
    grid = []
    n = start
    while n <= n_max:
        grid.append(n)
        n *= 2
    return grid


def c_eta(eta: float, n_max: int = 3200) -> CEtaResult:
    """Limit of ``sum_k E log(1 + eta(2y_k/k - 1)) + (eta^2/2) log(2n)``.

    Partial sums are computed exactly on the doubling grid 50, 100, ...,
    n_max. The dominant finite-n error of the sum behaves like
    ``(a + b log n)/n`` (from ``Var y_k = k(2n-k)/(4(2n-1))``), so the three
    largest grid points are fitted by ``C + (a + b log n)/n``. The error
    estimate is the distance to the two-point ``C + a/n`` fit.
    """
    if not abs(eta) < 1.0:
        raise DomainError(f"|eta| must be < 1, got {eta}")
    if n_max < 50:
        raise ConfigError("n_max must be >= 50")
    grid = doubling_grid(n_max)
    if eta == 0.0:
        return CEtaResult(eta, {n: 0.0 for n in grid}, 0.0, 0.0)
    partial = {n: c_eta_partial(n, eta) for n in grid}
    vals = np.array([partial[n] for n in grid])
    ns = np.array(grid, dtype=float)

    warning = None
    diffs = np.abs(np.diff(vals))
    if len(diffs) >= 2 and np.any(diffs[1:] > diffs[:-1] * (1 + 1e-9) + 1e-15):
        warning = "partial sums are not Cauchy on the doubling grid"

    if len(grid) == 1:
        return CEtaResult(eta, partial, float(vals[-1]), float("inf"), "single grid point")

    two = np.linalg.solve(np.column_stack([np.ones(2), 1.0 / ns[-2:]]), vals[-2:])
    fit = {"C_1/n": float(two[0]), "a_1/n": float(two[1])}
    if len(grid) >= 3:
        x = ns[-3:]
        three = np.linalg.solve(np.column_stack([np.ones(3), 1.0 / x, np.log(x) / x]), vals[-3:])
        extrapolated = float(three[0])
        fit.update({"C": extrapolated, "a": float(three[1]), "b": float(three[2])})
        err = abs(extrapolated - float(two[0]))
    else:
        extrapolated = float(two[0])
        err = abs(vals[-1] - extrapolated)
    # the last partial sum always lies inside the error bar
    err = max(err, abs(vals[-1] - extrapolated))
    return CEtaResult(eta, partial, extrapolated, err, warning, fit)


def eta_of(Delta: float) -> float:
    """``(Delta - 1)/(Delta + 1)``; only even functions of it are sign-free."""
    return (Delta - 1.0) / (Delta + 1.0)
