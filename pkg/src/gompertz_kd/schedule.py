"""Time-varying distillation-weight schedules.

The dynamic schedule follows a Gompertz growth curve

    beta(t) = beta_min + (beta_max - beta_min) * exp(-exp(-b * (t - t0)))

which rises from beta_min (t -> -inf) to beta_max (t -> +inf) through an
inflection at t = t0, where beta(t0) = beta_min + (beta_max - beta_min)/e.
A constant schedule is provided for the fixed-weight baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from gompertz_kd.errors import ConfigurationError, InputError

TIME_UNITS = ("raw_epoch", "normalized_fraction")


@dataclass(frozen=True)
class GompertzSchedule:
    """Gompertz-curve schedule for the distillation weight.

    `time_unit` decides what `t` means when evaluating per epoch:
    ``raw_epoch`` feeds the 1-based epoch index directly, so the growth
    rate `b` is per-epoch; ``normalized_fraction`` feeds epoch/total so
    `b` transfers across run lengths.

    Floating-point note: the mathematically strict bounds
    beta_min < beta(t) < beta_max saturate to equality in IEEE double at
    extreme arguments. With s = b*(t - t0): exp(-exp(-s)) rounds to 1.0
    for s >~ 37, and for s <~ -3.7 the offset above beta_min falls below
    beta_min's last representable digit. Strictness is numerically
    meaningful roughly for s in (-3.7, 37).
    """

    growth_rate_b: float
    beta_min: float = 0.1
    beta_max: float = 1.0
    time_shift_t0: float = 0.0
    time_unit: str = "raw_epoch"

    def validate(self) -> list[str]:
        """Return the list of violated constraints; empty means ok."""
        violations = []
        fields = {
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "growth_rate_b": self.growth_rate_b,
            "time_shift_t0": self.time_shift_t0,
        }
        for name, value in fields.items():
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                violations.append(f"{name} must be a finite number")
        if not violations:
            if not self.beta_min < self.beta_max:
                violations.append("beta_min < beta_max")
            if not self.growth_rate_b > 0:
                violations.append("growth_rate_b > 0")
        if self.time_unit not in TIME_UNITS:
            violations.append(f"time_unit must be one of {TIME_UNITS}")
        return violations

    def beta_at(self, t: float) -> float:
        """Evaluate the schedule at time `t` (in this schedule's unit)."""
        violations = self.validate()
        if violations:
            raise ConfigurationError(
                "invalid schedule: " + "; ".join(violations)
            )
        if not isinstance(t, (int, float)) or not math.isfinite(t):
            raise InputError(f"schedule time must be finite, got {t!r}")
        s = self.growth_rate_b * (t - self.time_shift_t0)
        # exp(-s) overflows for very negative s; the curve is beta_min there.
        if s < -700.0:
            return self.beta_min
        return self.beta_min + (self.beta_max - self.beta_min) * math.exp(
            -math.exp(-s)
        )

    def beta_for_epoch(self, epoch: int, total_epochs: int) -> float:
        """Evaluate at a 1-based epoch index of a `total_epochs`-long run."""
        if epoch < 1 or total_epochs < 1:
            raise InputError(
                f"epoch and total_epochs must be >= 1, got {epoch}/{total_epochs}"
            )
        if self.time_unit == "normalized_fraction":
            return self.beta_at(epoch / total_epochs)
        return self.beta_at(float(epoch))

    def curve(self, total_epochs: int) -> list[tuple[float, float]]:
        """(t, beta) samples at every epoch of a run, for plotting."""
        rows = []
        for epoch in range(1, total_epochs + 1):
            t = (
                epoch / total_epochs
                if self.time_unit == "normalized_fraction"
                else float(epoch)
            )
            rows.append((t, self.beta_at(t)))
        return rows


@dataclass(frozen=True)
class ConstantSchedule:
    """Fixed distillation weight used by the baseline modes."""

    beta: float

    def validate(self) -> list[str]:
        if not isinstance(self.beta, (int, float)) or not math.isfinite(self.beta):
            return ["beta must be a finite number"]
        if self.beta < 0:
            return ["beta >= 0"]
        return []

    def beta_at(self, t: float) -> float:
        violations = self.validate()
        if violations:
            raise ConfigurationError("invalid schedule: " + "; ".join(violations))
        return self.beta

    def beta_for_epoch(self, epoch: int, total_epochs: int) -> float:
        return self.beta_at(float(epoch))

    def curve(self, total_epochs: int) -> list[tuple[float, float]]:
        return [(float(e), self.beta) for e in range(1, total_epochs + 1)]
