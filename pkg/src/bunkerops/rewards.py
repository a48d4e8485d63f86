"""Three-regime reward for container emptying.

The reward an agent earns for emptying a container depends on a training
regime that is swapped in over the course of a curriculum:

* ``UNIMODAL``   - a single Gaussian bump centered on the higher ideal volume.
* ``MULTIMODAL`` - two Gaussian bumps, one per ideal volume, the higher one taller.
* ``STEP``       - 1.0 inside a narrow window around either ideal volume, else 0.

No-ops always earn 0 and invalid empties always earn the penalty, regardless
of regime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum


class Phase(IntEnum):
    UNIMODAL = 1
    MULTIMODAL = 2
    STEP = 3


@dataclass(frozen=True)
class RewardParams:
    """Parameters of one reward regime.

    ``h``/``w`` shape the single bump of the unimodal regime; ``h1``/``w1``
    and ``h2``/``w2`` shape the lower- and higher-peak bumps of the
    multimodal regime (the higher peak must dominate, ``h2 > h1``);
    ``window`` is the half-width of the step regime's acceptance band.
    ``penalty`` is the reward for an invalid empty and the far-field floor
    of both Gaussian regimes.

    The default widths are wide relative to the peaks (about 30% and 15% of
    a typical higher peak) so that empties well below a peak still see a
    graded signal; narrow bumps leave random exploration stuck on the
    penalty floor. Heights keep the maximum near 1 in every regime.
    """

    phase: Phase = Phase.MULTIMODAL
    h: float = 1.0
    w: float = 8.0
    h1: float = 0.5
    h2: float = 1.0
    w1: float = 4.0
    w2: float = 4.0
    window: float = 1.0
    penalty: float = -1.0

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if not 0 < self.h1 < self.h2:
            raise ValueError(f"need h2 > h1 > 0, got h1={self.h1}, h2={self.h2}")
        if min(self.w, self.w1, self.w2) <= 0:
            raise ValueError("Gaussian widths must be positive")
        if self.window <= 0:
            raise ValueError(f"window must be positive, got {self.window}")
        if self.penalty >= 0:
            raise ValueError(f"penalty must be negative, got {self.penalty}")


def reward_params_for_phase(phase: Phase, penalty: float = -1.0, **overrides) -> RewardParams:
    """Default parameters for a regime, with the shared invalid-empty penalty."""
    return RewardParams(phase=phase, penalty=penalty, **overrides)


def compute_reward(
    params: RewardParams,
    v: float,
    action: int,
    valid: bool,
    peaks: tuple[float, float],
) -> float:
    """Reward for taking ``action`` on a container holding volume ``v``.

    ``peaks`` is the container's (lower, higher) ideal-volume pair. A no-op
    (``action == 0``) earns 0 and an invalid empty earns the penalty; both
    short-circuit the regime formulas.
    """
    if action == 0:
        return 0.0
    if not valid:
        return params.penalty
    low, high = peaks
    pen = params.penalty
    if params.phase == Phase.UNIMODAL:
        return (params.h - pen) * math.exp(-((v - high) ** 2) / (2.0 * params.w**2)) + pen
    if params.phase == Phase.MULTIMODAL:
        r = pen
        r += (params.h1 - pen) * math.exp(-((v - low) ** 2) / (2.0 * params.w1**2))
        r += (params.h2 - pen) * math.exp(-((v - high) ** 2) / (2.0 * params.w2**2))
        return r
    if abs(v - low) <= params.window or abs(v - high) <= params.window:
        return 1.0
    return 0.0
