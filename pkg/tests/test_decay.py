"""Decay fits, the dyadic pigeonhole set, and the weight-trading identity."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conewave.decay import (
    DecayFit,
    InsufficientPointsError,
    NonpositiveValuesError,
    QuadratureError,
    check_lweight_identity,
    default_window,
    fit_exponent,
    pigeonhole_report,
)

TAUS = np.linspace(0.0, 40.0, 81)


class TestFitExponent:
    def test_pure_power_recovered(self):
        fit = fit_exponent(TAUS, (1.0 + TAUS) ** -1.1)
        assert abs(fit.exponent + 1.1) < 1e-6
        assert fit.r_squared > 1.0 - 1e-12
        assert fit.ci < 1e-6

    def test_amplitude_lands_in_intercept(self):
        fit = fit_exponent(TAUS, 3.0 * (1.0 + TAUS) ** -2.0)
        assert abs(fit.exponent + 2.0) < 1e-6
        assert abs(fit.intercept - math.log(3.0)) < 1e-9

    def test_mixed_powers_fit_between(self):
        taus = np.linspace(0.0, 45.0, 91)
        y = (1.0 + taus) ** -1.0 + (1.0 + taus) ** -2.0
        fit = fit_exponent(taus, y, window=(10.0, 40.0))
        assert -1.3 < fit.exponent < -1.0
        assert fit.window == (10.0, 40.0)

    def test_default_window_clips_start_and_tail(self):
        assert default_window(TAUS) == (5.0, 36.0)
        fit = fit_exponent(TAUS, (1.0 + TAUS) ** -1.5)
        assert fit.taus.min() >= 5.0
        assert fit.taus.max() <= 36.0

    def test_scaling_moves_only_the_intercept(self):
        y = (1.0 + TAUS) ** -1.7
        base = fit_exponent(TAUS, y)
        scaled = fit_exponent(TAUS, 12.5 * y)
        assert abs(scaled.exponent - base.exponent) < 1e-12
        assert abs(scaled.intercept - base.intercept - math.log(12.5)) < 1e-10
        assert abs(scaled.r_squared - base.r_squared) < 1e-12

    def test_zero_samples_excluded_with_record(self):
        y = (1.0 + TAUS) ** -1.1
        y[12] = 0.0
        y[30] = 0.0
        fit = fit_exponent(TAUS, y)
        assert fit.excluded == (TAUS[12], TAUS[30])
        assert abs(fit.exponent + 1.1) < 1e-6

    def test_negative_sample_refused(self):
        y = (1.0 + TAUS) ** -1.0
        y[40] = -1e-12
        with pytest.raises(NonpositiveValuesError):
            fit_exponent(TAUS, y)

    def test_all_zero_window_is_insufficient(self):
        with pytest.raises(InsufficientPointsError):
            fit_exponent(TAUS, np.zeros_like(TAUS))

    def test_too_few_points(self):
        with pytest.raises(InsufficientPointsError, match="need 5"):
            fit_exponent(TAUS, (1.0 + TAUS) ** -1.0, window=(10.0, 11.6))

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            fit_exponent(TAUS, (1.0 + TAUS) ** -1.0, window=(8.0, 8.0))

    def test_noisy_fit_has_honest_interval(self):
        rng = np.random.default_rng(7)
        y = (1.0 + TAUS) ** -1.5 * np.exp(rng.normal(0.0, 0.02, TAUS.shape))
        fit = fit_exponent(TAUS, y)
        assert fit.ci > 0.0
        assert abs(fit.exponent + 1.5) < 3.0 * fit.ci
        assert fit.r_squared < 1.0

    @given(
        p=st.floats(min_value=-3.0, max_value=-0.2),
        amp=st.floats(min_value=0.1, max_value=10.0),
    )
    @settings(max_examples=40, deadline=None)
    def test_power_laws_are_fixed_points(self, p, amp):
        fit = fit_exponent(TAUS, amp * (1.0 + TAUS) ** p)
        assert abs(fit.exponent - p) < 1e-8
        assert abs(fit.intercept - math.log(amp)) < 1e-7

    def test_csv_is_plot_ready(self):
        fit = fit_exponent(TAUS, (1.0 + TAUS) ** -1.1)
        lines = fit.to_csv().strip().split("\n")
        assert lines[0] == "log1p_tau,log_value"
        assert len(lines) == 1 + fit.taus.size
        first = [float(v) for v in lines[1].split(",")]
        assert first == [math.log1p(fit.taus[0]), math.log(fit.values[0])]

    def test_as_dict_round_trips_scalars(self):
        fit = fit_exponent(TAUS, (1.0 + TAUS) ** -1.1)
        d = fit.as_dict()
        assert d["exponent"] == fit.exponent
        assert d["n_points"] == fit.taus.size
        assert d["n_excluded"] == 0


def threshold_curve(taus, beta, constant):
    return constant * (1.0 + taus) ** (-1.0 - beta)


class TestPigeonhole:
    def test_half_threshold_fills_every_block(self):
        rep = pigeonhole_report(TAUS, 0.5 * threshold_curve(TAUS, 1.0, 2.0), 1.0, 2.0)
        assert bool(np.all(rep.in_set))
        assert rep.min_density == 1.0
        assert rep.companion_ok
        assert rep.companion_failures == ()

    def test_double_threshold_is_empty(self):
        rep = pigeonhole_report(TAUS, 2.0 * threshold_curve(TAUS, 1.0, 2.0), 1.0, 2.0)
        assert not np.any(rep.in_set)
        assert rep.min_density == 0.0
        assert rep.companion_ok

    def test_alternating_series_has_half_density(self):
        y = threshold_curve(TAUS, 1.0, 2.0)
        y[::2] *= 0.5
        y[1::2] *= 2.0
        rep = pigeonhole_report(TAUS, y, 1.0, 2.0)
        for block in rep.blocks:
            assert 0.3 <= block.density <= 0.7
        assert rep.companion_ok

    def test_blocks_are_dyadic_and_cover_the_run(self):
        rep = pigeonhole_report(TAUS, threshold_curve(TAUS, 0.0, 1.0), 0.0, 1.0)
        js = [b.j for b in rep.blocks]
        assert js == [0, 1, 2, 3, 4, 5]
        for b in rep.blocks:
            assert b.tau_lo == 2.0**b.j
            assert b.tau_hi == 2.0 ** (b.j + 1)
            assert b.n_points > 0

    def test_companion_failure_detected(self):
        taus = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        y = np.full(8, 10.0)
        y[0] = 0.0
        rep = pigeonhole_report(taus, y, 1.0, 1.0)
        assert not rep.companion_ok
        assert rep.companion_failures == (1.0,)

    def test_late_points_need_no_companion(self):
        taus = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        y = np.full(8, 10.0)
        y[-1] = 0.0
        rep = pigeonhole_report(taus, y, 1.0, 1.0)
        assert rep.companion_ok

    def test_membership_is_threshold_only(self):
        y = threshold_curve(TAUS, 1.0, 2.0)
        rep = pigeonhole_report(TAUS, y, 1.0, 2.0)
        assert bool(np.all(rep.in_set))
        rep = pigeonhole_report(TAUS, np.nextafter(y, np.inf), 1.0, 2.0)
        assert not np.any(rep.in_set)

    @given(c=st.floats(min_value=0.25, max_value=1.0))
    @settings(max_examples=25, deadline=None)
    def test_threshold_set_grows_with_the_constant(self, c):
        rng = np.random.default_rng(11)
        y = threshold_curve(TAUS, 1.0, 1.0) * rng.uniform(0.2, 3.0, TAUS.shape)
        small = pigeonhole_report(TAUS, y, 1.0, c)
        big = pigeonhole_report(TAUS, y, 1.0, 2.0 * c)
        assert bool(np.all(big.in_set[small.in_set]))
        assert big.min_density >= small.min_density

    def test_unsorted_series_rejected(self):
        with pytest.raises(ValueError, match="increasing"):
            pigeonhole_report(np.array([1.0, 0.5]), np.ones(2), 1.0, 1.0)

    def test_nonpositive_constant_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            pigeonhole_report(TAUS, np.ones_like(TAUS), 1.0, 0.0)


class TestLweightIdentity:
    def test_unit_function_by_hand(self):
        check = check_lweight_identity(lambda s: 1.0, 1.0, (0.0, 1.0))
        assert abs(check.lhs - 1.5) < 1e-13
        assert abs(check.rhs - 1.5) < 1e-13
        assert check.residual < 1e-12

    def test_sine_worked_example(self):
        check = check_lweight_identity(math.sin, -1.1, (1.0, 5.0))
        assert check.residual <= 1e-8

    @pytest.mark.parametrize("beta", [-2.0, -1.1, 0.0, 1.0, 2.5])
    def test_exponent_battery(self, beta):
        check = check_lweight_identity(
            lambda s: math.exp(-s / 3.0) * math.cos(2.0 * s), beta, (0.5, 9.0)
        )
        assert check.residual <= 1e-8

    def test_zero_integrand_has_zero_residual(self):
        check = check_lweight_identity(lambda s: 0.0, 1.3, (0.0, 4.0))
        assert check.lhs == 0.0
        assert check.residual == 0.0

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            check_lweight_identity(math.sin, 1.0, (2.0, 2.0))

    def test_divergent_integrand_raises(self):
        def spike(s):
            return 1.0 / (s - 2.0) ** 2 if s != 2.0 else 0.0

        with pytest.raises(QuadratureError):
            check_lweight_identity(spike, 0.0, (1.0, 5.0))
