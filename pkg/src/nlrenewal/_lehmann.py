"""Closed forms for the two-sample Lehmann model with F uniform on (0, 1).

With ``F(t) = t`` and ``G(t) = t**A`` the combined measures are
``H = F + G`` and ``W = F + Delta*G``. Writing ``r = t**(A - 1)``::

    psi(t)            = H/W = (1 + r) / (1 + Delta*r)
    int_t^1 dH / H    = log 2 - log t - log1p(r)
    int_t^1 dH / W    = -log t + c*(log1p(Delta) - log1p(Delta*r)),
                        c = (A - Delta) / (Delta*(A - 1))       (A != 1)
                      = -2/(1 + Delta) * log t                  (A == 1)

The last identity comes from ``dH/W = (1 + A r)/(1 + Delta r) d(log t)`` and
a partial-fraction split in ``r``. These are used for fast vectorised
sampling; ``rank_sprt.decompose`` evaluates the same integrals by quadrature.

The module also holds ``RankBatch``, the vectorised incremental evaluator of
the rank log-likelihood used by every Monte Carlo loop over rank statistics.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import TieError


def _r(t, A):
    return np.power(t, A - 1.0)


def log_psi(t, Delta, A):
    r = _r(t, A)
    return np.log1p(r) - np.log1p(Delta * r)


def int_dH_over_H(t, A):
    return math.log(2.0) - np.log(t) - np.log1p(_r(t, A))


def int_dH_over_W(t, Delta, A):
    if A == 1.0:
        return -2.0 / (1.0 + Delta) * np.log(t)
    c = (A - Delta) / (Delta * (A - 1.0))
    return -np.log(t) + c * (math.log1p(Delta) - np.log1p(Delta * _r(t, A)))


def walk_increment(x, y, Delta, A):
    """Per-pair increment of the linear part of the rank log-likelihood.

    ``x`` is the observation from F and ``y`` the one from G. Summing over
    the first ``n`` pairs gives the random walk whose drift is the rank-SPRT
    drift; the rank statistic minus this sum is the perturbation.
    """
    return (
        math.log(Delta)
        + log_psi(x, Delta, A)
        + log_psi(y, Delta, A)
        + int_dH_over_H(x, A)
        - int_dH_over_W(x, Delta, A)
        + int_dH_over_H(y, A)
        - Delta * int_dH_over_W(y, Delta, A)
    )


def draw_pairs(rng: np.random.Generator, shape, A: float):
    """``(x, y)`` with x ~ Uniform(0,1) and y ~ x**A-distributed.

    Draws one ``shape + (2,)`` uniform array so the pair stream is fixed by
    the generator state alone.
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    u = rng.random(shape + (2,))
    x = u[..., 0]
    y = u[..., 1] if A == 1.0 else u[..., 1] ** (1.0 / A)
    return x, y


def savage_z(flags_sorted: np.ndarray, Delta: float) -> np.ndarray:
    """Rank log-likelihood from G-flags in increasing order of value.

    Works along the last axis: ``n log Delta - sum_k log1p((Delta-1) y_k/k)``
    where ``y_k`` counts G-observations among the ``k`` smallest.
    """
    m = flags_sorted.shape[-1]
    n = m // 2
    y = np.cumsum(flags_sorted, axis=-1, dtype=np.float64)
    k = np.arange(1, m + 1, dtype=np.float64)
    return n * math.log(Delta) - np.log1p((Delta - 1.0) * y / k).sum(axis=-1)


class RankBatch:
    """Combined ordered samples for many independent rank paths at once.

    Each row keeps its ``2n`` observations sorted along with a G-flag per
    position. ``push`` inserts one pair per row in O(n) and returns the new
    rank log-likelihood of every row.
    """

    def __init__(self, n_rows: int, Delta: float):
        self.Delta = float(Delta)
        self.values = np.empty((n_rows, 0))
        self.flags = np.empty((n_rows, 0), dtype=np.int8)
        self.n = 0

    def __len__(self) -> int:
        return self.values.shape[0]

    def ties(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        tied = x == y
        if self.n:
            tied |= (self.values == x[:, None]).any(axis=1)
            tied |= (self.values == y[:, None]).any(axis=1)
        return tied

    def keep(self, mask: np.ndarray) -> None:
        self.values = self.values[mask]
        self.flags = self.flags[mask]

    def push(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.ties(x, y).any():
            raise TieError("tied observation in combined sample")
        rows = len(self)
        lo = np.minimum(x, y)
        hi = np.maximum(x, y)
        lo_is_g = (y < x).astype(np.int8)
        m = 2 * self.n
        if m == 0:
            self.values = np.stack([lo, hi], axis=1)
            self.flags = np.stack([lo_is_g, 1 - lo_is_g], axis=1)
        else:
            p_lo = (self.values < lo[:, None]).sum(axis=1)
            p_hi = (self.values < hi[:, None]).sum(axis=1) + 1
            j = np.arange(m + 2)[None, :]
            src = j - (j > p_lo[:, None]) - (j > p_hi[:, None])
            np.clip(src, 0, m - 1, out=src)
            vals = np.take_along_axis(self.values, src, axis=1)
            flg = np.take_along_axis(self.flags, src, axis=1)
            at_lo = j == p_lo[:, None]
            at_hi = j == p_hi[:, None]
            vals = np.where(at_lo, lo[:, None], np.where(at_hi, hi[:, None], vals))
            flg = np.where(at_lo, lo_is_g[:, None], np.where(at_hi, (1 - lo_is_g)[:, None], flg))
            self.values = vals
            self.flags = flg.astype(np.int8, copy=False)
        self.n += 1
        assert self.values.shape == (rows, 2 * self.n)
        return savage_z(self.flags, self.Delta)


def sort_combined(x: np.ndarray, y: np.ndarray):
    """Sorted combined sample and G-flags, row-wise along the last axis."""
    values = np.concatenate([x, y], axis=-1)
    flags = np.concatenate([np.zeros(x.shape, np.int8), np.ones(y.shape, np.int8)], axis=-1)
    order = np.argsort(values, axis=-1, kind="stable")
    return np.take_along_axis(values, order, -1), np.take_along_axis(flags, order, -1)


def z_and_s(x: np.ndarray, y: np.ndarray, Delta: float, A: float):
    """From-scratch rank log-likelihood and its linear part for pairs (x, y).

    Rows are independent samples; the pairs of each row run along the last
    axis. Returns ``(Z_n, S_n)`` per row.
    """
    _, flags = sort_combined(x, y)
    z = savage_z(flags, Delta)
    s = walk_increment(x, y, Delta, A).sum(axis=-1)
    return z, s


def null_xi(u_sorted: np.ndarray, flags_sorted: np.ndarray, eta: float) -> np.ndarray:
    """Perturbation ``Z_n - S_n`` when F = G, from the sorted combined sample.

    ``-sum_k log(1 + eta(2y_k/k - 1)) + eta sum_k (2y_k - k) log(u_{k+1}/u_k)``
    with ``u_{2n+1} = 1`` and ``eta = (Delta - 1)/(Delta + 1)``.
    """
    m = u_sorted.shape[-1]
    k = np.arange(1, m + 1, dtype=np.float64)
    y = np.cumsum(flags_sorted, axis=-1, dtype=np.float64)
    upper = np.concatenate([u_sorted[..., 1:], np.ones(u_sorted.shape[:-1] + (1,))], axis=-1)
    centred = 2.0 * y - k
    return -np.log1p(eta * centred / k).sum(axis=-1) + eta * (centred * np.log(upper / u_sorted)).sum(axis=-1)
