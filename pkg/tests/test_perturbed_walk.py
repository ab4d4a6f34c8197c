import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlrenewal.errors import BoundaryError, ConfigError, DriftError
from nlrenewal.parallel import child
from nlrenewal.perturbed_walk import (
    n_star,
    regularity_diagnostics,
    simulate_paired,
    simulate_paired_batch,
    simulate_T_b,
    simulate_T_b_batch,
    simulate_tau_star,
    simulate_U_and_N,
    simulate_U_and_N_batch,
    trend_passes,
    truncated_tail,
    early_stop_trend,
)
from nlrenewal.renewal_core import mean_se, simulate_linear_crossing
from nlrenewal.rng_models import IncrementModel, PerturbationModel, Rho, TruncationParams

EXP = IncrementModel.exponential()
ZERO = PerturbationModel.zero()
SPS = PerturbationModel.scaled_partial_sum()


class TestTb:
    @settings(max_examples=20, deadline=None)
    @given(b=st.floats(0, 50), seed=st.integers(0, 10**6))
    def test_zero_perturbation_is_linear(self, b, seed):
        assert simulate_T_b(EXP, ZERO, b, seed) == simulate_linear_crossing(EXP, b, seed)

    @settings(max_examples=20, deadline=None)
    @given(b=st.floats(0, 50), c=st.floats(-5, 5), seed=st.integers(0, 10**6))
    def test_constant_shifts_level(self, b, c, seed):
        t = simulate_T_b(EXP, PerturbationModel.constant(c), b, seed)
        lin = simulate_linear_crossing(EXP, b - c, seed)
        assert t.stop_index == lin.stop_index

    @settings(max_examples=15, deadline=None)
    @given(b1=st.floats(0, 40), b2=st.floats(0, 40), seed=st.integers(0, 10**6))
    def test_monotone_in_b(self, b1, b2, seed):
        lo, hi = sorted((b1, b2))
        assert simulate_T_b(EXP, SPS, lo, seed).stop_index <= simulate_T_b(EXP, SPS, hi, seed).stop_index

    def test_stopped_value_exceeds_b(self):
        batch, xi = simulate_T_b_batch(EXP, SPS, 30.0, 2000, 1, xi_at=5)
        assert np.all(batch.stopped_value[batch.ok] > 30.0)
        assert xi.shape == (2000,)

    def test_xi_at_matches_stream(self):
        from nlrenewal.rng_models import PathStream

        _, xi = simulate_T_b_batch(EXP, SPS, 10.0, 8, 3, xi_at=40, block_size=8)
        _, full = PathStream(EXP, SPS, 8, child(3, 0)).take(40)
        assert np.array_equal(xi, full[:, 39])


class TestTauStar:
    def test_n_star_formula(self):
        assert n_star(10.0, 2.0, 0.4, 0.6) == math.floor(5 - 0.4 * 10**0.6)

    def test_deterministic_frozen_start(self):
        inc = IncrementModel.deterministic(2.0)
        rec = simulate_tau_star(inc, ZERO, 10.0, TruncationParams(), eta_star=0.4, seed=0)
        assert n_star(10.0, 2.0, 0.4, 0.6) == 3
        assert rec.stop_index == 6

    def test_frozen_constant(self):
        inc = IncrementModel.deterministic(2.0)
        p = simulate_paired(inc, PerturbationModel.constant(0.5), 10.0, TruncationParams(), eta_star=0.4, seed=0)
        assert p.zeta_at_n_star == 0.5
        assert p.tau_star.stop_index == 5  # first n >= 3 with 2n > 9.5

    def test_default_eta_star(self):
        inc = IncrementModel.deterministic(2.0)
        p = simulate_paired(inc, ZERO, 10.0, TruncationParams(), seed=0)
        assert p.n_star == n_star(10.0, 2.0, 2 / 2**1.6, 0.6)

    def test_eta_star_lower_bound(self):
        with pytest.raises(ConfigError):
            simulate_tau_star(EXP, ZERO, 10.0, TruncationParams(theta=1.0), eta_star=0.5, seed=0)

    def test_n_star_below_one(self):
        with pytest.raises(BoundaryError):
            simulate_tau_star(EXP, ZERO, 1.0, TruncationParams(), eta_star=3.0, seed=0)

    def test_needs_positive_drift(self):
        with pytest.raises(DriftError):
            simulate_tau_star(IncrementModel.normal(-1, 1), ZERO, 10.0, seed=0)

    def test_coupled_diff_percentile_bounded(self):
        q = []
        for i, b in enumerate((50.0, 100.0, 200.0)):
            batch = simulate_paired_batch(EXP, ZERO, b, 4000, child(9, i))
            assert batch.ok.all()
            q.append(np.percentile(batch.diff_scaled, 99))
        assert max(q) < 20 and q[-1] <= q[0] + 5

    def test_zero_perturbation_tau_star_stops_no_earlier_than_linear(self):
        batch = simulate_paired_batch(EXP, ZERO, 60.0, 500, 2)
        assert np.all(batch.tau_star.stop_index >= batch.t_b.stop_index)
        assert np.all(batch.tau_star.stop_index >= batch.n_star)

    def test_truncated_tail(self):
        est = truncated_tail(np.array([0.0, 9.0, 12.0]), 8.0)
        assert est.value == pytest.approx(5 / 3)


class TestLastExit:
    def test_deterministic_examples(self):
        assert tuple(simulate_U_and_N(IncrementModel.deterministic(2.0), ZERO, 5.0, 0))[:2] == (2, 3)
        assert tuple(simulate_U_and_N(IncrementModel.deterministic(1.0), ZERO, 3.5, 0))[:2] == (3, 4)

    def test_censored_flag(self):
        r = simulate_U_and_N(IncrementModel.deterministic(1.0), ZERO, 3.5, 0, max_steps=2)
        assert r.censored and r.U == 2

    def test_exponential_joint(self):
        batch = simulate_U_and_N_batch(EXP, ZERO, 10.0, 20_000, 4)
        assert not batch.censored.any()
        u, n = mean_se(batch.U), mean_se(batch.N)
        assert u.value <= n.value
        # positive steps: U = tau - 1 and N = tau path by path
        assert np.array_equal(batch.U, batch.t_b.stop_index - 1)
        assert np.array_equal(batch.N, batch.t_b.stop_index)
        assert abs(u.value - 10.0) <= 3 * u.std_error

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_u_at_most_n_minus_one(self, seed):
        r = simulate_U_and_N(IncrementModel.uniform(-1, 2), SPS, 15.0, seed)
        assert 0 <= r.U <= r.N - 1


class TestDiagnostics:
    def test_trend_rule(self):
        assert trend_passes([5, 4, 3, 2], [0.1] * 4)
        assert not trend_passes([5, 4, 3, 4], [0.1] * 4)
        assert trend_passes([5, 4, 3, 3.2], [0.1] * 4)  # within 2 joint SEs
        assert trend_passes([1, 9, 3, 2], [0.1] * 4)  # lower half ignored

    def test_zero_perturbation_all_zero(self):
        rep = regularity_diagnostics(EXP, ZERO, [10, 20, 40], 1000, 0)
        assert all(r.estimate == 0.0 and r.std_error == 0.0 for r in rep.records)
        assert rep.all_passed

    def test_constant_below_theta(self):
        tp = TruncationParams(theta=1.0)
        rep = regularity_diagnostics(EXP, PerturbationModel.constant(0.5, tp), [10, 20, 40], 1000, 1)
        assert all(r.estimate == 0.0 for r in rep.series("upper_tail"))

    def test_scaled_partial_sum_window_tail(self):
        tp = TruncationParams(alpha=0.6, p=1.0, rho=Rho())
        rep = regularity_diagnostics(EXP, PerturbationModel.scaled_partial_sum(1.0, tp), [100, 1000, 4000], 1000, 2)
        for n in (100, 1000, 4000):
            tails = [next(r for r in rep.series(f"window_tail_C{c:g}") if r.n == n).estimate for c in (1, 2, 4, 8)]
            assert all(b <= a for a, b in zip(tails, tails[1:]))
        c8 = [r.estimate for r in rep.series("window_tail_C8")]
        assert max(c8) < 0.05
        assert rep.passed("slow_change_eps0.1")
        assert rep.to_json()[0].keys() == {"condition", "n", "estimate", "std_error", "pass"}

    def test_bad_grid(self):
        with pytest.raises(ConfigError):
            regularity_diagnostics(EXP, ZERO, [20, 10], 1000, 0)
        with pytest.raises(ConfigError):
            regularity_diagnostics(EXP, ZERO, [10], 10, 0)

    def test_early_stop_trend(self):
        rows = early_stop_trend(EXP, SPS, [20.0, 40.0, 80.0], 2000, 3)
        assert all(r["pass"] for r in rows)
