import math

import pytest
from hypothesis import given, strategies as st

from alphagfn.schedule import ScheduleSpec, alpha_at


def test_stage_one_is_constant():
    s = ScheduleSpec(100, 50, 0.9)
    assert {alpha_at(s, n) for n in range(1, 51)} == {0.9}


def test_decay_midpoint():
    s = ScheduleSpec(100, 50, 0.9, 4.0)
    assert alpha_at(s, 75) == pytest.approx(0.554134, abs=1e-6)
    assert alpha_at(s, 75) == pytest.approx(0.5 + 0.4 * math.exp(-2.0), abs=1e-15)


def test_alpha_half_stays_half():
    s = ScheduleSpec(100, 50, 0.5)
    assert all(alpha_at(s, n) == 0.5 for n in range(1, 101))


def test_rejects_out_of_range():
    s = ScheduleSpec(10, 5, 0.7)
    for n in (0, 11):
        with pytest.raises(ValueError):
            alpha_at(s, n)
    with pytest.raises(ValueError):
        ScheduleSpec(10, 0, 0.7)
    with pytest.raises(ValueError):
        ScheduleSpec(10, 5, 1.0)


def test_from_fraction():
    assert ScheduleSpec.from_fraction(5000, 0.9, 0.9).stage1_steps == 4500
    assert ScheduleSpec.constant(30, 0.2).stage1_steps == 30


@given(alpha0=st.floats(0.01, 0.99), total=st.integers(2, 400), frac=st.floats(0.05, 0.95),
       rate=st.floats(0.1, 10.0))
def test_monotone_toward_half(alpha0, total, frac, rate):
    s = ScheduleSpec.from_fraction(total, alpha0, frac, rate)
    vals = [alpha_at(s, n) for n in range(1, total + 1)]
    dist = [abs(v - 0.5) for v in vals]
    assert all(b <= a + 1e-15 for a, b in zip(dist, dist[1:]))
    assert all(min(alpha0, 0.5) - 1e-15 <= v <= max(alpha0, 0.5) + 1e-15 for v in vals)
