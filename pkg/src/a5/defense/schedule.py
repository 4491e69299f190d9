"""Smoothed epsilon ramp for certified training."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EpsSchedule:
    """Zero until ``start``, quadratic ease-in over the first ``mid`` fraction of the ramp,
    then linear (slope-matched at the knot) up to ``target`` at ``start + length``.

    Epochs may be fractional so the value can advance per batch.
    """

    start: float
    length: float
    mid: float
    target: float

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("schedule length must be > 0")
        if not 0 < self.mid < 1:
            raise ValueError("mid must lie in (0, 1)")
        if self.target < 0 or self.start < 0:
            raise ValueError("start and target must be >= 0")

    @property
    def knot(self) -> float:
        return self.start + self.mid * self.length

    @property
    def curvature(self) -> float:
        # a * (mid L)^2 + 2 a mid L * (1 - mid) L = target
        return self.target / (self.length ** 2 * self.mid * (2 - self.mid))

    def __call__(self, epoch: float) -> float:
        if epoch <= self.start:
            return 0.0
        if epoch >= self.start + self.length:
            return self.target
        a = self.curvature
        if epoch <= self.knot:
            return a * (epoch - self.start) ** 2
        ramp = self.mid * self.length
        return a * ramp ** 2 + 2 * a * ramp * (epoch - self.knot)

    def progress(self, epoch: float) -> float:
        """Fraction of the ramp elapsed, clipped to [0, 1]."""
        return min(1.0, max(0.0, (epoch - self.start) / self.length))


def eps_schedule_value(schedule: EpsSchedule, epoch: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule(epoch)
