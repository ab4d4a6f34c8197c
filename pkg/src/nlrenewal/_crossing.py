"""Vectorised first-passage engine shared by the crossing simulators.

One call processes a block of independent paths drawn from a ``PathStream``.
Column chunks are consumed until every requested quantity is known for
every row (or the step budget is spent), so the value of a path at step n
never depends on the boundary or on which statistics were requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng_models import CHUNK, IncrementModel, PathStream, PerturbationModel, TruncationParams
from .parallel import SeedLike


@dataclass(frozen=True)
class FrozenRule:
    """Linear rule started at ``n_star`` with the truncated perturbation frozen there."""

    n_star: int
    trunc: TruncationParams


def _first_true(mask: np.ndarray):
    """Index of the first True per row and whether there is one."""
    found = mask.any(axis=1)
    return np.argmax(mask, axis=1), found


def _last_true(mask: np.ndarray):
    found = mask.any(axis=1)
    return mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1), found


def run_block(
    increments: IncrementModel,
    perturbation: PerturbationModel,
    n_rows: int,
    seed: SeedLike,
    b: float,
    max_steps: int,
    *,
    lower: float | None = None,
    frozen: FrozenRule | None = None,
    last_exit: bool = False,
    xi_at: int | None = None,
) -> dict[str, np.ndarray]:
    """Simulate ``n_rows`` paths of Z = S + xi.

    Always returns the first exit ``T`` from ``(-lower, b]`` (only the upper
    side when ``lower`` is None) with its stopped values. Optional extras:
    the frozen-perturbation rule (``tau_*`` fields), the renewal count and
    last exit over ``1..max_steps`` (``U``, ``last``), and ``xi`` at a fixed
    step (``xi_at``).
    """
    stream = PathStream(increments, perturbation, n_rows, seed)
    rows = np.arange(n_rows)
    out = {
        "stop": np.zeros(n_rows, np.int64),
        "stopped_value": np.full(n_rows, np.nan),
        "stopped_sum": np.full(n_rows, np.nan),
        "hit_lower": np.zeros(n_rows, bool),
    }
    if frozen is not None:
        out.update(
            tau_stop=np.zeros(n_rows, np.int64),
            tau_value=np.full(n_rows, np.nan),
            tau_sum=np.full(n_rows, np.nan),
            zeta_star=np.full(n_rows, np.nan),
        )
    if last_exit:
        out.update(U=np.zeros(n_rows, np.int64), last=np.zeros(n_rows, np.int64))
    if xi_at is not None:
        out["xi_at"] = np.full(n_rows, np.nan)

    s_prev = np.zeros(n_rows)
    n0 = 0
    while n0 < max_steps:
        steps, xi = stream.next()
        m = min(CHUNK, max_steps - n0)
        steps, xi = steps[:, :m], xi[:, :m]
        s = s_prev[:, None] + np.cumsum(steps, axis=1)
        z = s + xi

        pending = out["stop"] == 0
        if pending.any():
            up = z > b
            hit = up if lower is None else up | (z < -lower)
            j, found = _first_true(hit)
            new = pending & found
            if new.any():
                r, c = rows[new], j[new]
                out["stop"][r] = n0 + c + 1
                out["stopped_value"][r] = z[r, c]
                out["stopped_sum"][r] = s[r, c]
                out["hit_lower"][r] = ~up[r, c]

        if frozen is not None:
            ns = frozen.n_star
            if n0 < ns <= n0 + m:
                out["zeta_star"] = np.asarray(frozen.trunc.zeta(xi[:, ns - n0 - 1], ns), dtype=float)
            if ns <= n0 + m:
                tpend = out["tau_stop"] == 0
                if tpend.any():
                    cols = np.arange(n0 + 1, n0 + m + 1)
                    w = s + out["zeta_star"][:, None]
                    j, found = _first_true((w > b) & (cols >= ns)[None, :])
                    new = tpend & found
                    r, c = rows[new], j[new]
                    out["tau_stop"][r] = n0 + c + 1
                    out["tau_value"][r] = w[r, c]
                    out["tau_sum"][r] = s[r, c]

        if last_exit:
            below = z <= b
            out["U"] += below.sum(axis=1)
            j, found = _last_true(below)
            out["last"][found] = n0 + j[found] + 1

        if xi_at is not None and n0 < xi_at <= n0 + m:
            out["xi_at"] = xi[:, xi_at - n0 - 1].copy()

        s_prev = s[:, -1].copy()
        n0 += m
        if last_exit:
            continue
        if (out["stop"] == 0).any():
            continue
        if frozen is not None and (out["tau_stop"] == 0).any():
            continue
        if xi_at is not None and n0 < xi_at:
            continue
        break

    out["censored"] = out["stop"] == 0
    out["stop"][out["censored"]] = max_steps
    if frozen is not None:
        out["tau_censored"] = out["tau_stop"] == 0
        out["tau_stop"][out["tau_censored"]] = max_steps
    if last_exit:
        # a path still at or below b at the budget may come back later
        out["last_censored"] = out["last"] == max_steps
    return out
