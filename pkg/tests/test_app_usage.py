import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modefusion.app_usage import (
    EntropyFilter,
    LogOddsScorer,
    app_entropy,
    build_mode_association,
    entropy_filter,
    log_odds_dirichlet,
    read_associations,
    unify_domain,
    unify_domains,
    usage_matrix,
)
from modefusion.mode_priors import MODES


@pytest.mark.parametrize("raw,base", [
    ("maps.example.com", "example.com"),
    ("example.com", "example.com"),
    ("API.Example.COM.", "example.com"),
    ("a.b.c.example.com", "example.com"),
    ("localhost", "localhost"),
])
def test_unify_domain(raw, base):
    assert unify_domain(raw) == base


def test_unify_domain_suffixes_and_errors():
    assert unify_domain("maps.google.co.uk", ["co.uk"]) == "google.co.uk"
    assert unify_domain("api.example.com") == unify_domain("maps.example.com")
    with pytest.raises(ValueError):
        unify_domain("  ")


@given(st.lists(st.from_regex(r"[a-z]{1,5}(\.[a-z]{1,5}){0,4}", fullmatch=True), max_size=20))
def test_unify_idempotent(domains):
    once = unify_domains(domains, ["co.uk"])
    twice = unify_domains(once.values(), ["co.uk"])
    assert all(twice[v] == v for v in once.values())


def test_usage_matrix_unifies_and_excludes():
    usage = pd.DataFrame(
        [("t1", "api.uber.com", 3), ("t1", "www.uber.com", 2), ("t2", "uber.com", 1),
         ("t2", "ads.tracker.net", 9), ("t1", "cdn.other.org", 4)],
        columns=["tower", "domain", "count"],
    )
    m = usage_matrix(usage, ["t1", "t2", "t3"], exclusions=["tracker.net"])
    assert list(m.columns) == ["other.org", "uber.com"]
    assert m.loc["t1", "uber.com"] == 5 and m.loc["t2", "uber.com"] == 1
    assert m.loc["t3"].sum() == 0
    raw = usage_matrix(usage, ["t1", "t2"], exclusions=["ads.tracker.net"])
    assert "tracker.net" not in raw.columns
    with pytest.raises(KeyError):
        usage_matrix(usage, ["t1"])


def test_entropy_examples():
    X = np.array([[5.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    H = app_entropy(X)
    assert H[0] == 0.0
    assert H[1] == pytest.approx(math.log(4), rel=1e-12)
    assert np.isnan(H[2])


def test_entropy_filter_drops_lowest():
    counts = pd.DataFrame(
        {"flat": [1.0] * 4, "peaky": [9.0, 0, 0, 0], "mid": [2.0, 2, 0, 0], "none": [0.0] * 4}
    )
    assert entropy_filter(counts, 0.0) == ["flat", "peaky", "mid"]
    f = EntropyFilter(0.34).fit(counts)
    assert f.kept_ == ["flat", "mid"]
    assert list(f.transform(counts).columns) == ["flat", "mid"]
    with pytest.raises(ValueError):
        EntropyFilter(1.0).fit(counts)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1000))
def test_entropy_filter_scale_invariant(seed, factor):
    rng = np.random.default_rng(seed)
    counts = pd.DataFrame(rng.integers(0, 5, (6, 8)).astype(float),
                          columns=[f"a{i}" for i in range(8)])
    counts.iloc[0] += 1
    scaled = counts.copy()
    col = counts.columns[seed % 8]
    scaled[col] = scaled[col] * factor
    np.testing.assert_allclose(app_entropy(scaled.to_numpy()), app_entropy(counts.to_numpy()),
                               rtol=1e-9, atol=1e-12)
    # exact ties could in principle be reordered by round-off, so compare kept sets
    # only when the entropies are well separated
    H = np.sort(app_entropy(counts.to_numpy()))
    if np.all(np.diff(H) > 1e-9):
        assert EntropyFilter(0.25).fit(scaled).kept_ == EntropyFilter(0.25).fit(counts).kept_


def log_odds_oracle(X, a0=1.0):
    """Loop form of the informative-Dirichlet log-odds z-score."""
    T, A = X.shape
    n = X.sum()
    out = np.zeros((T, A))
    for a in range(A):
        ya = X[:, a].sum()
        if ya == 0 or ya == n:
            continue
        alpha = a0 * ya / n
        for t in range(T):
            nt = X[t].sum()
            if nt == 0:
                continue
            y = X[t, a]
            d = (math.log((y + alpha) / (nt + a0 - y - alpha))
                 - math.log((ya + alpha) / (n + a0 - ya - alpha)))
            out[t, a] = d / math.sqrt(1 / (y + alpha) + 1 / (ya + alpha))
    return out


def test_log_odds_two_by_two():
    X = np.array([[4.0, 1.0], [0.0, 5.0]])
    z = log_odds_dirichlet(X, clip=False)
    np.testing.assert_allclose(z, log_odds_oracle(X), rtol=1e-12)
    assert z[0, 0] > 0
    assert log_odds_dirichlet(X)[0, 0] == z[0, 0]
    assert log_odds_dirichlet(X)[1, 0] == 0.0 and z[1, 0] < 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_log_odds_matches_oracle(seed, a0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 20, (5, 4)).astype(float)
    np.testing.assert_allclose(log_odds_dirichlet(X, a0, clip=False), log_odds_oracle(X, a0),
                               rtol=1e-9, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=2, max_size=6), st.integers(1, 9),
       st.integers(0, 2**32 - 1))
def test_log_odds_zero_for_proportional_usage(tower_totals, k, seed):
    rng = np.random.default_rng(seed)
    totals = np.array(tower_totals, dtype=float)
    # two apps whose tower distributions both equal the tower-total distribution
    X = np.column_stack([totals * k, totals * (10 - k % 10 or 1)])
    X = np.column_stack([X, rng.integers(0, 3, len(totals)) * 0.0])
    z = log_odds_dirichlet(X, clip=False)
    assert np.all(z[:, :2] == 0.0)


def test_log_odds_zero_columns_and_errors():
    X = np.array([[3.0, 0.0], [1.0, 0.0]])
    assert np.all(log_odds_dirichlet(X) == 0)
    assert np.all(log_odds_dirichlet(np.zeros((2, 2))) == 0)
    with pytest.raises(ValueError):
        log_odds_dirichlet(np.array([[-1.0, 1.0]]))
    with pytest.raises(ValueError):
        log_odds_dirichlet(X, prior_strength=0)
    assert LogOddsScorer().fit_transform(X).shape == X.shape


def test_mode_association():
    assoc = {"waze.com": ["motorised", "taxi"], "metro.cl": ["mass-transit"]}
    r13 = build_mode_association(assoc, ["other.com", "waze.com", "metro.cl"])
    assert r13.loc["other.com"].tolist() == [0.25] * 4
    assert r13.loc["waze.com"].tolist() == [0.0, 0.5, 0.0, 0.5]
    assert r13.loc["metro.cl"].tolist() == [1.0, 0.0, 0.0, 0.0]
    assert list(r13.columns) == list(MODES)
    assert np.all(r13.sum(axis=1) == 1.0)
    with pytest.raises(ValueError):
        build_mode_association({"x.com": ["boat"]}, ["x.com"])


@given(st.dictionaries(st.sampled_from([f"a{i}" for i in range(8)]),
                       st.lists(st.sampled_from(MODES), min_size=1, max_size=4)))
def test_mode_association_rows_sum_to_one(assoc):
    r13 = build_mode_association(assoc, [f"a{i}" for i in range(8)])
    assert np.all(r13.sum(axis=1) == 1.0)


def test_read_associations(tmp_path):
    p = tmp_path / "assoc.csv"
    p.write_text("# app,modes\napi.waze.com,motorised,taxi\nmetro.cl,mass-transit\n\n")
    assert read_associations(p) == {"waze.com": ["motorised", "taxi"],
                                    "metro.cl": ["mass-transit"]}
