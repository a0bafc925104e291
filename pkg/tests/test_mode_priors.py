import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modefusion.mode_priors import MODES, OfficialStats, check_mode_split, naive_ratio, project_mode_split


def stats_for(p=1.0, permits=(100.0, 100.0), metro=(1.0, 1.0), index=("m1",)):
    table = pd.DataFrame(
        {"pop_base": 1000.0, "pop_new": 1000.0 * p,
         "permits_base": permits[0], "permits_new": permits[1]},
        index=list(index),
    )
    return OfficialStats(table, metro_base=metro[0], metro_new=metro[1])


def split(mt=0.0, c=0.0, a=0.0, t=0.0, index=("m1",)):
    return pd.DataFrame([[mt, c, a, t]] * len(index), index=list(index), columns=list(MODES))


def test_mass_transit_example():
    out = project_mode_split(split(mt=1000), stats_for(p=1.1, metro=(1.0, 0.563)))
    expected = 1000 * 1.1 * math.sqrt(0.563)
    assert out.loc["m1", "mass-transit"] == pytest.approx(expected, rel=1e-9)
    assert round(out.loc["m1", "mass-transit"], 2) == 825.37


def test_active_example():
    out = project_mode_split(split(a=200), stats_for(p=1.0))
    assert out.loc["m1", "active"] == pytest.approx(195.0, rel=1e-9)


def test_taxi_example():
    out = project_mode_split(split(t=0), stats_for(p=1.2))
    assert out.loc["m1", "taxi"] == pytest.approx(1.308, rel=1e-9)


def test_motorised_uses_municipal_permits():
    st_ = OfficialStats(
        pd.DataFrame({"pop_base": [10.0, 10.0], "pop_new": [10.0, 20.0],
                      "permits_base": [4.0, 0.0], "permits_new": [9.0, 0.0]}, index=["a", "b"]),
        metro_base=1, metro_new=1)
    out = project_mode_split(split(c=100, index=("a", "b")), st_)
    assert out.loc["a", "motorised"] == pytest.approx(150.0, rel=1e-12)
    assert out.loc["b", "motorised"] == pytest.approx(200.0, rel=1e-12)


@pytest.mark.parametrize("table,metro", [
    (dict(pop_base=0.0, pop_new=1.0, permits_base=1.0, permits_new=1.0), (1, 1)),
    (dict(pop_base=1.0, pop_new=1.0, permits_base=1.0, permits_new=1.0), (0, 1)),
])
def test_stats_errors(table, metro):
    with pytest.raises(ValueError):
        OfficialStats(pd.DataFrame(table, index=["m"]), *metro)


def test_zero_base_permits_with_new_permits():
    s = stats_for(permits=(0.0, 5.0))
    with pytest.raises(ValueError):
        project_mode_split(split(c=1), s)


def test_naive_ratio():
    s = stats_for(p=1.3)
    base = split(1, 2, 3, 4)
    naive = base * 1.3
    assert naive_ratio(base, naive, s) == 1.0
    # unit factors, no taxi: only the +1 taxi trip moves the ratio above one
    unit = OfficialStats(s.table, 1, 1, active_factor=1.0, taxi_factor=1.0)
    projected = project_mode_split(split(10, 10, 10, 0), unit)
    assert naive_ratio(split(10, 10, 10, 0), projected, unit) > 1.0


def random_case(rng, n=6):
    idx = [f"m{i}" for i in range(n)]
    base = pd.DataFrame(rng.uniform(0, 1000, (n, 4)), index=idx, columns=list(MODES))
    table = pd.DataFrame({
        "pop_base": rng.uniform(100, 1000, n), "pop_new": rng.uniform(100, 1000, n),
        "permits_base": rng.uniform(1, 100, n), "permits_new": rng.uniform(1, 100, n)},
        index=idx)
    return base, OfficialStats(table, rng.uniform(1, 10), rng.uniform(1, 10))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_homogeneity_positivity_monotonicity(seed):
    rng = np.random.default_rng(seed)
    base, s = random_case(rng)
    once = project_mode_split(base, s)
    twice = project_mode_split(base * 2, s)
    for mode in ("mass-transit", "motorised", "active"):
        assert np.array_equal(twice[mode].to_numpy(), 2 * once[mode].to_numpy())
    assert np.all(once["taxi"] > 0)
    more = OfficialStats(s.table, s.metro_base, s.metro_new * 1.5)
    bumped = project_mode_split(base, more)
    positive = base["mass-transit"] > 0
    assert np.all(bumped.loc[positive, "mass-transit"] > once.loc[positive, "mass-transit"])
    pd.testing.assert_frame_equal(bumped.drop(columns="mass-transit"),
                                  once.drop(columns="mass-transit"))


def test_check_mode_split():
    with pytest.raises(ValueError):
        check_mode_split(pd.DataFrame({"mass-transit": [1.0]}))
    with pytest.raises(ValueError):
        check_mode_split(split(mt=-1))
    assert check_mode_split(split(1, 2, 3, 4)).index.name == "municipality"
