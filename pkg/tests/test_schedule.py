from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gompertz_kd.errors import ConfigurationError, InputError
from gompertz_kd.schedule import ConstantSchedule, GompertzSchedule


def closed_form(beta_min, beta_max, b, t0, t):
    return beta_min + (beta_max - beta_min) * math.exp(-math.exp(-b * (t - t0)))


class TestBetaAt:
    def test_saturates_to_beta_max(self):
        s = GompertzSchedule(growth_rate_b=0.5)
        assert s.beta_at(50.0) == pytest.approx(1.0, abs=1e-6)

    def test_approaches_beta_min_for_early_times(self):
        s = GompertzSchedule(growth_rate_b=0.5)
        assert s.beta_at(-200.0) == pytest.approx(0.1, abs=1e-9)

    @pytest.mark.parametrize("b", [0.01, 0.5, 3.0, 40.0])
    def test_value_at_inflection_is_independent_of_growth_rate(self, b):
        s = GompertzSchedule(growth_rate_b=b)
        # closed form at t = t0: beta_min + (beta_max - beta_min) / e
        assert s.beta_at(0.0) == pytest.approx(0.1 + 0.9 / math.e, abs=1e-12)
        assert s.beta_at(0.0) == pytest.approx(0.4310914970542981, abs=1e-12)

    def test_matches_closed_form_on_a_grid(self):
        s = GompertzSchedule(
            growth_rate_b=5.0, time_shift_t0=0.2, time_unit="normalized_fraction"
        )
        for k in range(21):
            t = k / 20.0
            assert s.beta_at(t) == pytest.approx(
                closed_form(0.1, 1.0, 5.0, 0.2, t), abs=1e-15
            )

    def test_rejects_non_finite_time(self):
        s = GompertzSchedule(growth_rate_b=1.0)
        with pytest.raises(InputError):
            s.beta_at(float("nan"))
        with pytest.raises(InputError):
            s.beta_at(float("inf"))

    def test_rejects_invalid_schedule(self):
        s = GompertzSchedule(growth_rate_b=-1.0)
        with pytest.raises(ConfigurationError):
            s.beta_at(0.0)


class TestValidate:
    def test_paper_defaults_are_valid(self):
        assert GompertzSchedule(growth_rate_b=0.5).validate() == []

    def test_inverted_bounds(self):
        s = GompertzSchedule(growth_rate_b=0.5, beta_min=1.0, beta_max=0.1)
        assert s.validate() == ["beta_min < beta_max"]

    def test_flat_curve_rejected(self):
        s = GompertzSchedule(growth_rate_b=0.0)
        assert s.validate() == ["growth_rate_b > 0"]

    def test_bad_time_unit(self):
        s = GompertzSchedule(growth_rate_b=1.0, time_unit="steps")
        assert any("time_unit" in v for v in s.validate())


# strict bounds/monotonicity are only representable in IEEE double inside a
# band of the dimensionless time s = b*(t - t0): below s ~ -3.7 the curve's
# offset from beta_min falls under beta_min's ulp, above s ~ +37 exp(-exp(-s))
# rounds to 1. Sample well inside that band.
@given(
    beta_min=st.floats(0.01, 0.5),
    span=st.floats(0.1, 2.0),
    b=st.floats(0.05, 20.0),
    t0=st.floats(-50.0, 50.0),
    s1=st.floats(-3.0, 24.5),
    ds=st.floats(0.5, 10.0),
)
@settings(max_examples=200, deadline=None)
def test_strictly_increasing_and_bounded(beta_min, span, b, t0, s1, ds):
    sched = GompertzSchedule(
        growth_rate_b=b, beta_min=beta_min, beta_max=beta_min + span, time_shift_t0=t0
    )
    t1 = t0 + s1 / b
    t2 = t0 + min(s1 + ds, 25.0) / b
    b1, b2 = sched.beta_at(t1), sched.beta_at(t2)
    assert beta_min < b1 < beta_min + span
    assert beta_min < b2 < beta_min + span
    assert b2 > b1


@given(b=st.floats(0.05, 20.0), t0=st.floats(-10.0, 10.0))
@settings(max_examples=100, deadline=None)
def test_limits_at_thirty_growth_lengths(b, t0):
    sched = GompertzSchedule(growth_rate_b=b, time_shift_t0=t0)
    assert abs(sched.beta_at(t0 + 30.0 / b) - sched.beta_max) < 1e-9
    assert abs(sched.beta_at(t0 - 30.0 / b) - sched.beta_min) < 1e-9


def test_second_difference_changes_sign_exactly_once():
    sched = GompertzSchedule(growth_rate_b=1.0)
    # uniform grid spanning the inflection at t0 = 0
    ts = [(-8.0 + 16.0 * k / 80.0) for k in range(81)]
    vals = [sched.beta_at(t) for t in ts]
    second = [vals[i + 1] - 2 * vals[i] + vals[i - 1] for i in range(1, len(vals) - 1)]
    signs = [1 if d > 0 else -1 for d in second if abs(d) > 1e-15]
    flips = sum(1 for a, b in zip(signs, signs[1:]) if a != b)
    assert flips == 1
    assert signs[0] == 1 and signs[-1] == -1  # convex then concave


class TestEpochMapping:
    def test_normalized_fraction_final_epoch_is_unit_time(self):
        s = GompertzSchedule(growth_rate_b=5.0, time_unit="normalized_fraction")
        assert s.beta_for_epoch(20, 20) == s.beta_at(1.0)
        assert s.beta_for_epoch(1, 20) == s.beta_at(0.05)

    def test_raw_epoch_uses_index_directly(self):
        s = GompertzSchedule(growth_rate_b=0.5)
        assert s.beta_for_epoch(7, 100) == s.beta_at(7.0)

    def test_rejects_bad_epoch(self):
        s = GompertzSchedule(growth_rate_b=0.5)
        with pytest.raises(InputError):
            s.beta_for_epoch(0, 10)

    def test_curve_length_and_monotone(self):
        s = GompertzSchedule(growth_rate_b=5.0, time_unit="normalized_fraction")
        pts = s.curve(30)
        assert len(pts) == 30
        betas = [b for _, b in pts]
        assert betas == sorted(betas)


class TestConstantSchedule:
    def test_flat(self):
        s = ConstantSchedule(0.7)
        assert s.beta_at(0.0) == 0.7
        assert s.beta_for_epoch(3, 10) == 0.7
        assert s.validate() == []

    def test_negative_rejected(self):
        assert ConstantSchedule(-0.1).validate() == ["beta >= 0"]
