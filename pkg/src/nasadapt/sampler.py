"""Progressive-shrinking schedule for super-network sampling.

At epoch ``e`` the largest network is drawn with probability

    p = p_e + (p_i - p_e) * exp(-alpha * (e - e_s) / (e_m - e_s))

and a uniformly random sub-network otherwise.  Before ``e_s`` the probability
is held at ``p_i``; after ``e_m`` it is held at its ``e_m`` value.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .search_space import Architecture, Backbone, largest, sample_uniform


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ShrinkSchedule:
    p_i: float = 1.0
    p_e: float = 0.0
    alpha: float = 5.0
    e_s: float = 30
    e_m: float = 100

    def __post_init__(self):
        if not 0.0 <= self.p_e <= self.p_i <= 1.0:
            raise ScheduleError(f"need 0 <= p_e <= p_i <= 1, got p_e={self.p_e}, p_i={self.p_i}")
        if not self.e_s < self.e_m:
            raise ScheduleError(f"need e_s < e_m, got e_s={self.e_s}, e_m={self.e_m}")
        if not self.alpha > 0:
            raise ScheduleError(f"alpha must be > 0, got {self.alpha}")

    @classmethod
    def from_dict(cls, data: dict) -> "ShrinkSchedule":
        unknown = set(data) - {"p_i", "p_e", "alpha", "e_s", "e_m"}
        if unknown:
            raise ScheduleError(f"unknown schedule keys {sorted(unknown)}")
        return cls(**data)


def shrink_probability(sched: ShrinkSchedule, epoch: float) -> float:
    e = min(max(epoch, sched.e_s), sched.e_m)
    p = sched.p_e + (sched.p_i - sched.p_e) * math.exp(-sched.alpha * (e - sched.e_s) / (sched.e_m - sched.e_s))
    # rounding can push the last ulp outside [p_e, p_i]
    return min(max(p, sched.p_e), sched.p_i)


def sample_epoch_architecture(sched: ShrinkSchedule, backbone: Backbone, epoch: float, rng_seed) -> Architecture:
    rng = rng_seed if isinstance(rng_seed, random.Random) else random.Random(rng_seed)
    if rng.random() < shrink_probability(sched, epoch):
        return largest(backbone)
    return sample_uniform(backbone, rng)


def schedule_curve(sched: ShrinkSchedule, epochs=None) -> list[tuple[int, float]]:
    if epochs is None:
        epochs = range(0, int(math.ceil(sched.e_m)) + 1)
    return [(e, shrink_probability(sched, e)) for e in epochs]
