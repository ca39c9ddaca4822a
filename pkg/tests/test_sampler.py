import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nasadapt.sampler import (
    ScheduleError,
    ShrinkSchedule,
    sample_epoch_architecture,
    schedule_curve,
    shrink_probability,
)
from nasadapt.search_space import largest


def reference_p(p_i, p_e, alpha, e_s, e_m, e):
    """The decay law written out directly, clamped outside [e_s, e_m]."""
    if e < e_s:
        return p_i
    if e > e_m:
        e = e_m
    return p_e + (p_i - p_e) * math.exp(-alpha * (e - e_s) / (e_m - e_s))


def test_defaults():
    s = ShrinkSchedule()
    assert (s.p_i, s.p_e, s.alpha, s.e_s, s.e_m) == (1.0, 0.0, 5.0, 30, 100)


def test_boundaries():
    s = ShrinkSchedule()
    assert shrink_probability(s, s.e_s) == 1.0
    assert abs(shrink_probability(s, s.e_m) - math.exp(-5)) <= 1e-12
    assert abs(shrink_probability(s, s.e_m) - 0.006738) < 1e-6


def test_clamping():
    s = ShrinkSchedule(p_i=0.9, p_e=0.1)
    assert shrink_probability(s, -10) == shrink_probability(s, 0) == 0.9
    assert shrink_probability(s, 1000) == shrink_probability(s, s.e_m)


def test_equal_endpoints_give_a_constant():
    s = ShrinkSchedule(p_i=0.4, p_e=0.4, alpha=7)
    assert {shrink_probability(s, e) for e in range(0, 200)} == {0.4}


schedules = st.builds(
    lambda a, b, alpha, e_s, span: ShrinkSchedule(p_i=max(a, b), p_e=min(a, b), alpha=alpha, e_s=e_s, e_m=e_s + span),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(0.01, 100),
    st.floats(0, 500),
    st.floats(0.5, 500),
)


@settings(max_examples=300, deadline=None)
@given(schedules, st.floats(-100, 1200))
def test_matches_reference_equation(s, e):
    assert abs(shrink_probability(s, e) - reference_p(s.p_i, s.p_e, s.alpha, s.e_s, s.e_m, e)) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(schedules, st.lists(st.floats(-100, 1200), min_size=2, max_size=20))
def test_non_increasing_and_in_range(s, epochs):
    ps = [shrink_probability(s, e) for e in sorted(epochs)]
    assert all(a >= b for a, b in zip(ps, ps[1:]))
    assert all(s.p_e <= p <= s.p_i for p in ps)


def test_ten_thousand_random_schedules():
    rng = random.Random(2024)
    for _ in range(10_000):
        a, b = rng.random(), rng.random()
        e_s = rng.uniform(0, 200)
        s = ShrinkSchedule(p_i=max(a, b), p_e=min(a, b), alpha=rng.uniform(0.01, 60), e_s=e_s,
                           e_m=e_s + rng.uniform(1, 300))
        assert abs(shrink_probability(s, s.e_s) - s.p_i) <= 1e-12
        assert abs(shrink_probability(s, s.e_m) - (s.p_e + (s.p_i - s.p_e) * math.exp(-s.alpha))) <= 1e-12
        grid = [s.e_s - 5 + (s.e_m - s.e_s + 10) * i / 12 for i in range(13)]
        ps = [shrink_probability(s, e) for e in grid]
        assert all(x >= y for x, y in zip(ps, ps[1:]))
        assert all(s.p_e <= p <= s.p_i for p in ps)


@pytest.mark.parametrize("kw", [{"p_i": 0.2, "p_e": 0.5}, {"p_i": 1.5}, {"p_e": -0.1}, {"e_s": 100, "e_m": 100},
                                {"alpha": 0}, {"alpha": -1}])
def test_invalid_schedules(kw):
    with pytest.raises(ScheduleError):
        ShrinkSchedule(**kw)


def test_from_dict_is_strict():
    assert ShrinkSchedule.from_dict({"alpha": 0.5}) == ShrinkSchedule(alpha=0.5)
    with pytest.raises(ScheduleError):
        ShrinkSchedule.from_dict({"decay": 1})


def test_curve_covers_zero_to_e_m():
    curve = schedule_curve(ShrinkSchedule())
    assert curve[0] == (0, 1.0) and curve[-1][0] == 100 and len(curve) == 101


# -- sampling


def test_epoch_zero_always_largest(vgg9):
    big = largest(vgg9)
    rng = random.Random(0)
    assert all(sample_epoch_architecture(ShrinkSchedule(), vgg9, 0, rng) == big for _ in range(500))


def test_largest_drawn_at_rate_p(vgg9):
    # binomial oracle: n = 1e5, p = 0.5, allow 5 sigma.  A uniform draw equals
    # the largest network with probability 1 / 1e9, which is negligible.
    s = ShrinkSchedule(p_i=1.0, p_e=0.0, alpha=5.0, e_s=30, e_m=100)
    epoch = 30 + 70 * math.log(2) / 5
    assert abs(shrink_probability(s, epoch) - 0.5) < 1e-12
    big = largest(vgg9)
    rng = random.Random(99)
    n = 100_000
    hits = sum(sample_epoch_architecture(s, vgg9, epoch, rng) == big for _ in range(n))
    assert abs(hits - n / 2) <= 5 * math.sqrt(n * 0.25)


def test_sampling_is_reproducible(vgg9):
    s = ShrinkSchedule()
    first = [sample_epoch_architecture(s, vgg9, e, seed) for seed, e in enumerate(range(0, 100, 3))]
    again = [sample_epoch_architecture(s, vgg9, e, seed) for seed, e in enumerate(range(0, 100, 3))]
    assert first == again
