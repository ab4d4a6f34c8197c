"""Increment laws, perturbation processes and truncation parameters.

Every random quantity is drawn from a ``numpy.random.Generator`` built from a
``SeedSequence``; the same configuration and seed always reproduce the same
numbers. Paths are produced column-chunk by column-chunk by ``PathStream``,
which is what the crossing simulators consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
import numpy as np

from . import _lehmann
from .errors import ConfigError
from .parallel import SeedLike, as_seed_sequence, child, generator

INCREMENT_KINDS = ("deterministic", "exponential", "uniform", "normal", "rank_sprt")
PERTURBATION_KINDS = ("zero", "constant", "scaled_partial_sum", "rank_residual")

# Columns are always drawn in chunks of this width, so the value at (row, n)
# does not depend on how far a particular experiment simulates.
CHUNK = 256


def _norm_kind(kind: str) -> str:
    return kind.strip().lower().replace("-", "_")


@dataclass(frozen=True)
class IncrementModel:
    """Law of the i.i.d. step X.

    ``params`` depends on ``kind``: ``value`` (deterministic), ``mean``
    (exponential), ``lo``/``hi`` (uniform), ``mu``/``sigma`` (normal),
    ``Delta``/``A``/``reflect`` (rank_sprt, the linear part of the rank
    log-likelihood per pair of observations; ``reflect`` negates it).
    """

    kind: str
    params: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        kind = _norm_kind(self.kind)
        if kind not in INCREMENT_KINDS:
            raise ConfigError(f"unknown increment kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", tuple(sorted(self.params)))
        p = self.p
        required = {
            "deterministic": ("value",),
            "exponential": ("mean",),
            "uniform": ("lo", "hi"),
            "normal": ("mu", "sigma"),
            "rank_sprt": ("Delta", "A"),
        }[kind]
        missing = [k for k in required if k not in p]
        if missing:
            raise ConfigError(f"{kind} increments need {missing}")
        if kind == "exponential" and p["mean"] <= 0:
            raise ConfigError("exponential mean must be positive")
        if kind == "uniform" and not p["lo"] < p["hi"]:
            raise ConfigError("uniform needs lo < hi")
        if kind == "normal" and p["sigma"] < 0:
            raise ConfigError("normal sigma must be >= 0")
        if kind == "rank_sprt" and not (p["Delta"] > 0 and p["A"] > 0):
            raise ConfigError("rank_sprt needs Delta > 0 and A > 0")

    # constructors ---------------------------------------------------------
    @classmethod
    def deterministic(cls, value: float) -> "IncrementModel":
        return cls("deterministic", (("value", float(value)),))

    @classmethod
    def exponential(cls, mean: float = 1.0) -> "IncrementModel":
        return cls("exponential", (("mean", float(mean)),))

    @classmethod
    def uniform(cls, lo: float = 0.0, hi: float = 1.0) -> "IncrementModel":
        return cls("uniform", (("lo", float(lo)), ("hi", float(hi))))

    @classmethod
    def normal(cls, mu: float, sigma: float) -> "IncrementModel":
        return cls("normal", (("mu", float(mu)), ("sigma", float(sigma))))

    @classmethod
    def rank_sprt(cls, Delta: float, A: float, reflect: bool = False) -> "IncrementModel":
        return cls("rank_sprt", (("Delta", float(Delta)), ("A", float(A)), ("reflect", float(bool(reflect)))))

    @classmethod
    def from_dict(cls, d: dict) -> "IncrementModel":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind is None:
            raise ConfigError("increment model needs a 'kind'")
        return cls(kind, tuple((k, float(v)) for k, v in d.items()))

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.p}

    @property
    def p(self) -> dict[str, float]:
        return dict(self.params)

    @property
    def sign(self) -> float:
        return -1.0 if self.p.get("reflect", 0.0) else 1.0

    # moments -------------------------------------------------------------
    @cached_property
    def declared_mu(self) -> float:
        p = self.p
        if self.kind == "deterministic":
            return p["value"]
        if self.kind == "exponential":
            return p["mean"]
        if self.kind == "uniform":
            return 0.5 * (p["lo"] + p["hi"])
        if self.kind == "normal":
            return p["mu"]
        from .constants import drift_mu

        return self.sign * drift_mu(p["Delta"], p["A"])

    @property
    def declared_sigma2(self) -> float | None:
        p = self.p
        if self.kind == "deterministic":
            return 0.0
        if self.kind == "exponential":
            return p["mean"] ** 2
        if self.kind == "uniform":
            return (p["hi"] - p["lo"]) ** 2 / 12.0
        if self.kind == "normal":
            return p["sigma"] ** 2
        return None

    @property
    def is_lattice(self) -> bool:
        return self.kind == "deterministic"

    # sampling ------------------------------------------------------------
    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        p = self.p
        if self.kind == "deterministic":
            return np.full(shape, p["value"])
        if self.kind == "exponential":
            return rng.exponential(p["mean"], shape)
        if self.kind == "uniform":
            return rng.uniform(p["lo"], p["hi"], shape)
        if self.kind == "normal":
            return rng.normal(p["mu"], p["sigma"], shape)
        x, y = _lehmann.draw_pairs(rng, shape, p["A"])
        return self.sign * _lehmann.walk_increment(x, y, p["Delta"], p["A"])


def sample_increments(model: IncrementModel, n: int, seed: SeedLike) -> np.ndarray:
    if n < 1:
        raise ConfigError("n must be >= 1")
    return model.sample(generator(seed), n)


# ---------------------------------------------------------------------------
# truncation and the growth function rho


def truncate(xi, n, theta: float, theta_star: float, alpha: float):
    """``min(xi, theta n^alpha)`` capped below at ``-theta_star n^alpha``.

    Plain arithmetic with no range checks on the parameters.
    """
    na = np.power(n, alpha)
    return np.maximum(np.minimum(xi, theta * na), -theta_star * na)


@dataclass(frozen=True)
class Rho:
    """``rho(x) = max(1, x**beta * log(e + x)**gamma)`` with 0 <= beta < 1."""

    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError("rho needs 0 <= beta < 1")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        val = np.maximum(1.0, np.power(np.maximum(x, 0.0), self.beta) * np.log(math.e + np.maximum(x, 0.0)) ** self.gamma)
        return float(val) if val.ndim == 0 else val

    @property
    def is_constant(self) -> bool:
        return self.beta == 0.0 and self.gamma == 0.0

    def check_growth(self, grid=None) -> dict[str, bool]:
        """Empirical check of ``1 <= rho(x) = o(x)`` and the doubling bound."""
        grid = np.geomspace(2.0, 1e8, 200) if grid is None else np.asarray(grid, float)
        vals = self(grid)
        ratio = vals / grid
        doubling = max(float(np.max(self(np.linspace(x, 3 * x, 9)) / self(2 * x))) for x in grid[::10])
        return {
            "at_least_one": bool(np.all(vals >= 1.0)),
            "ratio_decreasing": bool(np.all(np.diff(ratio) <= 1e-15)),
            "ratio_small_at_end": bool(ratio[-1] < 0.1 * ratio[0]),
            "doubling_bounded": bool(doubling < 10.0),
        }


@dataclass(frozen=True)
class TruncationParams:
    theta: float = 1.0
    theta_star: float = 1.0
    alpha: float = 0.6
    delta0: float = 0.5
    K: float = 2.0
    w0: float = 0.5
    p: float = 1.0
    rho: Rho = field(default_factory=Rho)

    def __post_init__(self):
        if not (self.theta > 0 and self.theta_star > 0 and self.K > 0 and self.w0 > 0):
            raise ConfigError("theta, theta_star, K, w0 must be positive")
        if not 0.5 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (1/2, 1]")
        if not 0.0 < self.delta0 < 1.0:
            raise ConfigError("delta0 must lie in (0, 1)")
        if self.p < 1.0:
            raise ConfigError("p must be >= 1")

    def validate_for(self, mu: float) -> None:
        """Constraints that involve the drift of the paired increment law."""
        if mu <= 0:
            raise ConfigError("truncation parameters need a positive drift")
        if not self.theta_star < self.K * mu:
            raise ConfigError(f"need theta_star < K*mu ({self.theta_star} >= {self.K * mu})")
        if self.alpha == 1.0 and not self.theta < mu:
            raise ConfigError("need theta < mu when alpha == 1")
        checks = self.rho.check_growth()
        if not all(checks.values()):
            raise ConfigError(f"rho fails growth checks: {checks}")

    def zeta(self, xi, n):
        """``(xi ∧ theta n^alpha) ∨ (-theta_star n^alpha)``."""
        return truncate(xi, n, self.theta, self.theta_star, self.alpha)

    def default_eta_star(self, mu: float) -> float:
        return 2.0 * self.theta / mu ** (1.0 + self.alpha)

    def eta_upper(self, mu: float) -> float:
        """``K / mu^alpha``: the upper window constant used for the tail sums."""
        return self.K / mu**self.alpha

    def eta_tau(self, mu: float) -> float:
        # midway between its lower bound theta_star/mu^(1+alpha) and K/mu^alpha
        return 0.5 * (self.theta_star / mu ** (1.0 + self.alpha) + self.eta_upper(mu))

    def window_M(self, mu: float, eta_star: float | None = None) -> float:
        eta_star = self.default_eta_star(mu) if eta_star is None else eta_star
        return self.eta_tau(mu) + self.eta_upper(mu) + 2.0 * eta_star

    @classmethod
    def from_dict(cls, d: dict) -> "TruncationParams":
        d = dict(d)
        rho = Rho(float(d.pop("rho_beta", 0.0)), float(d.pop("rho_gamma", 0.0)))
        try:
            return cls(rho=rho, **{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "theta": self.theta, "theta_star": self.theta_star, "alpha": self.alpha,
            "delta0": self.delta0, "K": self.K, "w0": self.w0, "p": self.p,
            "rho_beta": self.rho.beta, "rho_gamma": self.rho.gamma,
        }


def zeta(xi_n: float, n: int, tp: TruncationParams) -> float:
    if n < 1:
        raise ConfigError("n must be >= 1")
    return float(tp.zeta(xi_n, n))


# ---------------------------------------------------------------------------
# perturbations


@dataclass(frozen=True)
class PerturbationModel:
    """Generator of the perturbation sequence added to the walk.

    ``scaled_partial_sum`` is ``scale * sum_{k<=n} eps_k / sqrt(k)`` with
    Rademacher ``eps_k``: slowly changing, mean zero, variance ~ log n.
    ``rank_residual`` is the rank log-likelihood minus its linear part and
    must be paired with ``IncrementModel.rank_sprt`` of the same parameters.
    """

    kind: str = "zero"
    c: float = 0.0
    scale: float = 1.0
    trunc: TruncationParams = field(default_factory=TruncationParams)

    def __post_init__(self):
        kind = _norm_kind(self.kind)
        if kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    @classmethod
    def zero(cls, trunc: TruncationParams | None = None) -> "PerturbationModel":
        return cls("zero", trunc=trunc or TruncationParams())

    @classmethod
    def constant(cls, c: float, trunc: TruncationParams | None = None) -> "PerturbationModel":
        return cls("constant", c=float(c), trunc=trunc or TruncationParams())

    @classmethod
    def scaled_partial_sum(cls, scale: float = 1.0, trunc: TruncationParams | None = None) -> "PerturbationModel":
        return cls("scaled_partial_sum", scale=float(scale), trunc=trunc or TruncationParams())

    @classmethod
    def rank_residual(cls, trunc: TruncationParams | None = None) -> "PerturbationModel":
        return cls("rank_residual", trunc=trunc or TruncationParams())

    @classmethod
    def from_dict(cls, d: dict, trunc: TruncationParams | None = None) -> "PerturbationModel":
        d = dict(d)
        kind = d.pop("kind", "zero")
        try:
            return cls(kind, trunc=trunc or TruncationParams(), **{k: float(v) for k, v in d.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "constant":
            out["c"] = self.c
        if self.kind == "scaled_partial_sum":
            out["scale"] = self.scale
        return out


class PathStream:
    """Chunked draws of (steps, perturbation) columns for a block of paths.

    Steps and perturbation noise come from two independent child streams of
    ``seed``, so for a given seed the steps are the same whatever the
    perturbation model is. ``next`` always draws whole ``CHUNK``-wide
    chunks and hands them out in order.
    """

    def __init__(self, increments: IncrementModel, perturbation: PerturbationModel, n_paths: int, seed: SeedLike):
        self.inc = increments
        self.pert = perturbation
        self.n_paths = int(n_paths)
        ss = as_seed_sequence(seed)
        self._step_rng = generator(child(ss, 0))
        self._pert_rng = generator(child(ss, 1))
        self.n = 0  # columns handed out so far
        self._xi_last = np.zeros(self.n_paths)
        self._rank = None
        if self.pert.kind == "rank_residual":
            if self.inc.kind != "rank_sprt" or self.inc.sign < 0:
                raise ConfigError("rank_residual perturbation needs non-reflected rank_sprt increments")
            self._rank = _lehmann.RankBatch(self.n_paths, self.inc.p["Delta"])
            self._s_last = np.zeros(self.n_paths)

    def _chunk(self) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.n_paths, CHUNK)
        if self._rank is not None:
            return self._rank_chunk(shape)
        steps = self.inc.sample(self._step_rng, shape)
        kind = self.pert.kind
        if kind == "zero":
            xi = np.zeros(shape)
        elif kind == "constant":
            xi = np.full(shape, self.pert.c)
        else:
            eps = self._pert_rng.integers(0, 2, shape).astype(np.float64) * 2.0 - 1.0
            k = np.arange(self.n + 1, self.n + CHUNK + 1, dtype=np.float64)
            xi = self._xi_last[:, None] + self.pert.scale * np.cumsum(eps / np.sqrt(k), axis=1)
            self._xi_last = xi[:, -1].copy()
        return steps, xi

    def _rank_chunk(self, shape):
        p = self.inc.p
        x, y = _lehmann.draw_pairs(self._step_rng, shape, p["A"])
        steps = _lehmann.walk_increment(x, y, p["Delta"], p["A"])
        s = self._s_last[:, None] + np.cumsum(steps, axis=1)
        z = np.empty(shape)
        for j in range(shape[1]):
            z[:, j] = self._rank.push(x[:, j], y[:, j])
        self._s_last = s[:, -1].copy()
        return steps, z - s

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        """Next ``CHUNK`` columns: steps X and perturbations xi."""
        steps, xi = self._chunk()
        self.n += CHUNK
        return steps, xi

    def take(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """First ``n`` columns of a fresh stream, as full arrays."""
        if self.n:
            raise RuntimeError("take() needs a fresh stream")
        parts = [self.next() for _ in range(-(-n // CHUNK))]
        steps = np.concatenate([p[0] for p in parts], axis=1)[:, :n]
        xi = np.concatenate([p[1] for p in parts], axis=1)[:, :n]
        return steps, xi


def generate_perturbation(
    model: PerturbationModel,
    seed: SeedLike,
    n: int,
    increments: IncrementModel | None = None,
) -> np.ndarray:
    """``(xi_1, ..., xi_n)`` for one path driven by ``seed``.

    The perturbation stream is adapted to the path: xi_k uses only the
    randomness of the first k steps.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if increments is None:
        if model.kind == "rank_residual":
            raise ConfigError("rank_residual needs the paired rank_sprt increment model")
        increments = IncrementModel.deterministic(0.0)
    stream = PathStream(increments, model, 1, seed)
    return stream.take(n)[1][0]


@dataclass
class PerturbedPath:
    steps: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)
        if self.steps.shape != self.xi.shape or self.steps.ndim != 1:
            raise ConfigError("steps and xi must be 1-d arrays of equal length")

    @property
    def s(self) -> np.ndarray:
        return np.cumsum(self.steps)

    @property
    def z(self) -> np.ndarray:
        return self.s + self.xi

    def first_passage(self, b: float):
        """First n with Z_n > b on this fixed path (censored if none)."""
        from .renewal_core import CrossingRecord

        z, s = self.z, self.s
        hit = np.flatnonzero(z > b)
        if hit.size == 0:
            return CrossingRecord(len(z), float("nan"), float(s[-1]), float(z[-1]), False, True)
        j = int(hit[0])
        return CrossingRecord(j + 1, float(z[j] - b), float(s[j]), float(z[j]))

    @classmethod
    def draw(cls, increments: IncrementModel, perturbation: PerturbationModel, n: int, seed: SeedLike) -> "PerturbedPath":
        steps, xi = PathStream(increments, perturbation, 1, seed).take(n)
        return cls(steps[0], xi[0])

