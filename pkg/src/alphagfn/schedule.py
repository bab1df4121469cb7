"""Two-stage alpha schedule: constant alpha0 in stage 1, exponential decay
toward 0.5 in stage 2."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleSpec:
    total_steps: int
    stage1_steps: int
    alpha0: float = 0.5
    decay_rate: float = 4.0

    def __post_init__(self):
        if not 0 < self.stage1_steps <= self.total_steps:
            raise ValueError(f"need 0 < stage1_steps <= total_steps, got "
                             f"{self.stage1_steps} and {self.total_steps}")
        if not 0.0 < self.alpha0 < 1.0:
            raise ValueError(f"alpha0 must lie in (0, 1), got {self.alpha0}")

    @classmethod
    def from_fraction(cls, total_steps: int, alpha0: float = 0.5, stage1_fraction: float = 0.9,
                      decay_rate: float = 4.0) -> "ScheduleSpec":
        if not 0.0 < stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must lie in (0, 1]")
        n1 = max(1, min(total_steps, int(round(stage1_fraction * total_steps))))
        return cls(total_steps, n1, alpha0, decay_rate)

    @classmethod
    def constant(cls, total_steps: int, alpha: float) -> "ScheduleSpec":
        return cls(total_steps, total_steps, alpha)


def alpha_at(spec: ScheduleSpec, n: int) -> float:
    """alpha used at training step n (1-based)."""
    if not 1 <= n <= spec.total_steps:
        raise ValueError(f"step {n} outside 1..{spec.total_steps}")
    if n <= spec.stage1_steps:
        return spec.alpha0
    frac = (n - spec.stage1_steps) / (spec.total_steps - spec.stage1_steps)
    return 0.5 + (spec.alpha0 - 0.5) * math.exp(-spec.decay_rate * frac)
