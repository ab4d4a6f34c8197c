import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlrenewal import constants
from nlrenewal.errors import ConfigError
from nlrenewal.rng_models import (
    IncrementModel,
    PathStream,
    PerturbationModel,
    PerturbedPath,
    Rho,
    TruncationParams,
    generate_perturbation,
    sample_increments,
    truncate,
    zeta,
)


class TestIncrementModel:
    def test_deterministic_sample(self):
        assert sample_increments(IncrementModel.deterministic(2.0), 3, 0).tolist() == [2.0, 2.0, 2.0]

    def test_exponential_law_of_large_numbers(self):
        x = sample_increments(IncrementModel.exponential(1.0), 10**6, 1)
        assert abs(x.mean() - 1.0) < 0.005

    def test_same_seed_same_sequence(self):
        m = IncrementModel.uniform(0, 1)
        assert np.array_equal(sample_increments(m, 50, 4), sample_increments(m, 50, 4))
        assert not np.array_equal(sample_increments(m, 50, 4), sample_increments(m, 50, 5))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            IncrementModel("cauchy", (("scale", 1.0),))

    def test_missing_parameter(self):
        with pytest.raises(ConfigError):
            IncrementModel("uniform", (("lo", 0.0),))

    @pytest.mark.parametrize("kwargs", [{"kind": "exponential", "mean": -1}, {"kind": "uniform", "lo": 1, "hi": 0}])
    def test_bad_parameters(self, kwargs):
        with pytest.raises(ConfigError):
            IncrementModel.from_dict(kwargs)

    def test_dict_round_trip(self):
        m = IncrementModel.normal(0.5, 2.0)
        assert IncrementModel.from_dict(m.to_dict()) == m

    def test_kind_normalised(self):
        assert IncrementModel.from_dict({"kind": "Rank-SPRT", "Delta": 2, "A": 2}).kind == "rank_sprt"

    def test_declared_moments(self):
        assert IncrementModel.uniform(0, 1).declared_mu == 0.5
        assert IncrementModel.uniform(0, 1).declared_sigma2 == pytest.approx(1 / 12)
        assert IncrementModel.exponential(2.0).declared_sigma2 == 4.0
        assert IncrementModel.rank_sprt(2, 2).declared_sigma2 is None

    def test_rank_drift_and_reflection(self):
        mu = constants.drift_mu(2.0, 2.0)
        assert IncrementModel.rank_sprt(2, 2).declared_mu == pytest.approx(mu)
        assert IncrementModel.rank_sprt(2, 2, reflect=True).declared_mu == pytest.approx(-mu)

    def test_rank_increment_mean(self):
        x = sample_increments(IncrementModel.rank_sprt(2, 2), 200_000, 3)
        mu = constants.drift_mu(2.0, 2.0)
        assert abs(x.mean() - mu) < 4 * x.std() / math.sqrt(x.size)

    def test_lattice_flag(self):
        assert IncrementModel.deterministic(1).is_lattice
        assert not IncrementModel.exponential().is_lattice


class TestTruncation:
    def test_upper_cap(self):
        assert truncate(5.0, 4, 1.0, 1.0, 0.5) == 2.0

    def test_lower_cap(self):
        assert truncate(-5.0, 4, 1.0, 1.0, 0.5) == -2.0

    def test_zero(self):
        assert zeta(0.0, 7, TruncationParams()) == 0.0

    @settings(max_examples=60)
    @given(xi=st.floats(-1e6, 1e6), n=st.integers(1, 10**6))
    def test_zeta_in_caps(self, xi, n):
        tp = TruncationParams(theta=1.5, theta_star=0.5, alpha=0.7)
        z = zeta(xi, n, tp)
        na = n**0.7
        assert -0.5 * na - 1e-9 <= z <= 1.5 * na + 1e-9
        if -0.5 * na <= xi <= 1.5 * na:
            assert z == xi

    def test_zeta_needs_positive_n(self):
        with pytest.raises(ConfigError):
            zeta(1.0, 0, TruncationParams())

    @pytest.mark.parametrize("kwargs", [{"alpha": 0.5}, {"alpha": 1.2}, {"theta": 0}, {"delta0": 1.0}, {"p": 0.5}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TruncationParams(**kwargs)

    def test_validate_for_drift(self):
        TruncationParams(theta_star=1.0, K=2.0).validate_for(1.0)
        with pytest.raises(ConfigError):
            TruncationParams(theta_star=3.0, K=2.0).validate_for(1.0)
        with pytest.raises(ConfigError):
            TruncationParams(theta=1.0, alpha=1.0).validate_for(1.0)
        with pytest.raises(ConfigError):
            TruncationParams().validate_for(-1.0)

    def test_dict_round_trip(self):
        tp = TruncationParams(theta=2.0, rho=Rho(0.3, 1.0))
        assert TruncationParams.from_dict(tp.to_dict()) == tp

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError):
            TruncationParams.from_dict({"thetta": 1.0})

    def test_default_eta_star(self):
        assert TruncationParams(theta=1.0, alpha=0.6).default_eta_star(2.0) == pytest.approx(2 / 2**1.6)


class TestRho:
    def test_constant(self):
        assert Rho()(123.0) == 1.0 and Rho().is_constant

    def test_power(self):
        assert Rho(0.3)(1000.0) == pytest.approx(1000**0.3)

    def test_growth_checks_pass(self):
        for r in (Rho(), Rho(0.3), Rho(0.5, 1.0)):
            assert all(r.check_growth().values())

    def test_growth_check_flags_non_monotone_ratio(self):
        # x^0.5 log(e+x)^2 / x rises on roughly (1, 50) before decaying
        assert not Rho(0.5, 2.0).check_growth()["ratio_decreasing"]

    def test_beta_range(self):
        with pytest.raises(ConfigError):
            Rho(1.0)

    @given(x=st.floats(0, 1e9))
    def test_at_least_one(self, x):
        assert Rho(0.4, 1.0)(x) >= 1.0


class TestPerturbation:
    def test_zero(self):
        assert generate_perturbation(PerturbationModel.zero(), 0, 5).tolist() == [0.0] * 5

    def test_constant(self):
        assert generate_perturbation(PerturbationModel.constant(3.0), 0, 2).tolist() == [3.0, 3.0]

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            PerturbationModel("stationary")

    def test_rank_residual_needs_increments(self):
        with pytest.raises(ConfigError):
            generate_perturbation(PerturbationModel.rank_residual(), 0, 5)
        with pytest.raises(ConfigError):
            PathStream(IncrementModel.exponential(), PerturbationModel.rank_residual(), 2, 0)

    def test_scaled_partial_sum_increments_are_coin_over_root_k(self):
        xi = generate_perturbation(PerturbationModel.scaled_partial_sum(), 5, 600)
        d = np.diff(np.concatenate([[0.0], xi]))
        k = np.arange(1, 601)
        assert np.allclose(np.abs(d) * np.sqrt(k), 1.0)

    def test_scaled_partial_sum_variance(self):
        n, reps = 300, 100_000
        _, xi = PathStream(IncrementModel.deterministic(0.0), PerturbationModel.scaled_partial_sum(), reps, 11).take(n)
        v = xi[:, -1]
        target = np.sum(1.0 / np.arange(1, n + 1))
        var = v.var(ddof=1)
        se = math.sqrt((np.mean((v - v.mean()) ** 4) - var**2) / reps)
        assert abs(var / target - 1) < 3 * se / target

    def test_rank_residual_is_z_minus_s(self):
        from nlrenewal.rank_sprt import RankState

        inc = IncrementModel.rank_sprt(2.0, 2.0)
        stream = PathStream(inc, PerturbationModel.rank_residual(), 1, 8)
        steps, xi = stream.take(20)
        # replay the same uniforms through the scalar rank state
        from nlrenewal import _lehmann
        from nlrenewal.parallel import child, generator

        x, y = _lehmann.draw_pairs(generator(child(8, 0)), (1, 256), 2.0)
        st_ = RankState(2.0)
        s = 0.0
        for j in range(20):
            st_.push(x[0, j], y[0, j])
            s += steps[0, j]
            assert st_.z - s == pytest.approx(xi[0, j], abs=1e-10)

    def test_steps_do_not_depend_on_perturbation(self):
        inc = IncrementModel.exponential()
        a, _ = PathStream(inc, PerturbationModel.zero(), 4, 3).take(300)
        b, _ = PathStream(inc, PerturbationModel.scaled_partial_sum(), 4, 3).take(300)
        assert np.array_equal(a, b)

    def test_take_needs_fresh_stream(self):
        s = PathStream(IncrementModel.exponential(), PerturbationModel.zero(), 1, 0)
        s.next()
        with pytest.raises(RuntimeError):
            s.take(3)

    def test_adapted_prefix(self):
        # the first n values do not depend on how far the path is drawn
        m = PerturbationModel.scaled_partial_sum()
        assert np.array_equal(generate_perturbation(m, 2, 100), generate_perturbation(m, 2, 700)[:100])

    def test_dict_round_trip(self):
        m = PerturbationModel.scaled_partial_sum(0.5)
        assert PerturbationModel.from_dict(m.to_dict()) == m


class TestPerturbedPath:
    def test_alternating_perturbation_example(self):
        n = np.arange(1, 11)
        path = PerturbedPath(np.full(10, 2.0), (-1.0) ** n)
        assert path.z[:4].tolist() == [1.0, 5.0, 5.0, 9.0]
        assert path.first_passage(5.0).stop_index == 4

    def test_censored(self):
        rec = PerturbedPath(np.ones(3), np.zeros(3)).first_passage(10.0)
        assert rec.censored and rec.stop_index == 3

    def test_shape_check(self):
        with pytest.raises(ConfigError):
            PerturbedPath(np.ones(3), np.zeros(4))

    def test_draw_deterministic(self):
        a = PerturbedPath.draw(IncrementModel.exponential(), PerturbationModel.scaled_partial_sum(), 50, 1)
        b = PerturbedPath.draw(IncrementModel.exponential(), PerturbationModel.scaled_partial_sum(), 50, 1)
        assert np.array_equal(a.z, b.z)
