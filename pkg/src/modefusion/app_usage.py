"""App-usage relations: tower x app log-odds scores and app x mode associations."""
from __future__ import annotations

import logging
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_non_negative

from .mode_priors import MODES

__all__ = [
    "unify_domain",
    "unify_domains",
    "usage_matrix",
    "app_entropy",
    "entropy_filter",
    "EntropyFilter",
    "log_odds_dirichlet",
    "LogOddsScorer",
    "build_mode_association",
    "read_associations",
]

log = logging.getLogger(__name__)


def unify_domain(domain: str, suffixes: Iterable[str] = ()) -> str:
    """Reduce a hostname to its registrable base.

    Keeps the last two labels, or one more than a matching multi-label
    suffix from ``suffixes`` (e.g. ``"co.uk"``).
    """
    host = domain.strip().lower().rstrip(".")
    if not host:
        raise ValueError("empty domain name")
    labels = host.split(".")
    keep = 2
    for suffix in suffixes:
        n = suffix.count(".") + 1
        if host.endswith("." + suffix.lower()):
            keep = max(keep, n + 1)
    return ".".join(labels[-keep:])


def unify_domains(domains: Iterable[str], suffixes: Iterable[str] = ()) -> dict[str, str]:
    suffixes = tuple(suffixes)
    return {d: unify_domain(d, suffixes) for d in domains}


def usage_matrix(
    usage: pd.DataFrame,
    towers: Sequence[str],
    exclusions: Iterable[str] = (),
    suffixes: Iterable[str] = (),
) -> pd.DataFrame:
    """Pivot long ``tower,domain,count`` rows into a tower x app count matrix.

    Domains are unified before summing; a domain is dropped when either its
    raw or its unified name is in ``exclusions``.
    """
    excluded = {d.strip().lower() for d in exclusions if d.strip()}
    mapping = unify_domains(usage["domain"].astype(str).unique(), suffixes)
    frame = usage.assign(
        tower=usage["tower"].astype(str),
        app=usage["domain"].astype(str).map(mapping),
        count=usage["count"].astype(float),
    )
    raw = usage["domain"].astype(str).str.strip().str.lower()
    frame = frame[~(raw.isin(excluded) | frame["app"].isin(excluded))]
    unknown = sorted(set(frame["tower"]) - set(map(str, towers)))
    if unknown:
        raise KeyError(f"usage rows reference unknown towers {unknown[:5]}")
    if (frame["count"] < 0).any():
        raise ValueError("usage counts must be >= 0")
    table = frame.pivot_table(index="tower", columns="app", values="count",
                              aggfunc="sum", fill_value=0.0)
    table = table.reindex(index=list(map(str, towers)), fill_value=0.0)
    table = table.reindex(columns=sorted(table.columns))
    table.index.name = "waypoint"
    table.columns.name = None
    return table.astype(float)


def app_entropy(counts) -> np.ndarray:
    """Shannon entropy (nats) of each column's distribution over rows.

    Columns with zero total get ``nan``.
    """
    X = np.asarray(counts, dtype=float)
    totals = X.sum(axis=0)
    p = np.divide(X, totals, out=np.zeros_like(X), where=totals > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    H = -terms.sum(axis=0)
    return np.where(totals > 0, H, np.nan)


class EntropyFilter(BaseEstimator):
    """Drop apps whose usage is concentrated in few towers.

    The ``floor(drop_fraction * n)`` apps with the lowest entropy among the
    ``n`` apps with positive usage are removed (ties broken by name), as are
    apps with no usage at all.
    """

    def __init__(self, drop_fraction=0.10):
        self.drop_fraction = drop_fraction

    def fit(self, counts: pd.DataFrame, y=None):
        if not 0 <= self.drop_fraction < 1:
            raise ValueError("drop_fraction must be in [0, 1)")
        H = pd.Series(app_entropy(counts.to_numpy()), index=counts.columns)
        self.entropy_ = H
        used = H.dropna()
        if used.empty:
            raise ValueError("no app has positive usage")
        order = sorted(used.index, key=lambda a: (used[a], a))
        n_drop = int(np.floor(self.drop_fraction * len(order)))
        dropped = set(order[:n_drop])
        self.kept_ = [a for a in counts.columns if a in used.index and a not in dropped]
        return self

    def transform(self, counts: pd.DataFrame) -> pd.DataFrame:
        check_is_fitted(self, "kept_")
        return counts.loc[:, self.kept_]


def entropy_filter(counts: pd.DataFrame, drop_fraction: float = 0.10) -> list[str]:
    return EntropyFilter(drop_fraction).fit(counts).kept_


def log_odds_dirichlet(counts, prior_strength: float = 1.0, clip: bool = True) -> np.ndarray:
    """z-scored log-odds of each app at each tower against all towers pooled.

    ``counts`` is towers x apps.  For tower ``t`` and app ``a`` with
    ``y = counts[t, a]``, tower total ``n_t``, app total ``y_a`` and grand
    total ``n``, the prior pseudo-count of the app is
    ``alpha_a = prior_strength * y_a / n`` and

        delta = ln((y + alpha_a) / (n_t + prior_strength - y - alpha_a))
              - ln((y_a + alpha_a) / (n + prior_strength - y_a - alpha_a))
        var   = 1 / (y + alpha_a) + 1 / (y_a + alpha_a)

    The score is ``delta / sqrt(var)``.  It is zero wherever an app's share
    of a tower equals its citywide share.  Towers and apps without usage score
    zero.  With ``clip`` the negative scores are set to zero.
    """
    X = check_array(counts, dtype=float)
    check_non_negative(X, "log_odds_dirichlet")
    if not prior_strength > 0:
        raise ValueError("prior_strength must be > 0")
    a0 = float(prior_strength)
    n_t = X.sum(axis=1, keepdims=True)
    y_a = X.sum(axis=0, keepdims=True)
    n = X.sum()
    if n == 0:
        return np.zeros_like(X)
    alpha = a0 * y_a / n

    with np.errstate(divide="ignore", invalid="ignore"):
        local = np.log(X + alpha) - np.log(n_t + a0 - X - alpha)
        pooled = np.log(y_a + alpha) - np.log(n + a0 - y_a - alpha)
        delta = local - pooled
        # equal shares give equal odds; the logs above only agree to round-off
        delta = np.where(X * n == y_a * n_t, 0.0, delta)
        sigma = np.sqrt(1.0 / (X + alpha) + 1.0 / (y_a + alpha))
        z = delta / sigma
    # an app that is all of the usage has no odds to compare
    valid = (n_t > 0) & (y_a > 0) & (y_a < n)
    z = np.where(valid & np.isfinite(z), z, 0.0)
    return np.maximum(z, 0.0) if clip else z


class LogOddsScorer(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`log_odds_dirichlet`; stateless."""

    def __init__(self, prior_strength=1.0, clip=True):
        self.prior_strength = prior_strength
        self.clip = clip

    def fit(self, X, y=None):
        check_array(X, dtype=float)
        self.n_features_in_ = np.shape(X)[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return log_odds_dirichlet(X, self.prior_strength, self.clip)


def read_associations(path, suffixes: Iterable[str] = ()) -> dict[str, list[str]]:
    """Parse ``app,mode1[,mode2...]`` lines; app names are unified."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            app, *modes = [part.strip() for part in line.split(",")]
            out.setdefault(unify_domain(app, suffixes), []).extend(m for m in modes if m)
    return out


def build_mode_association(
    associations: Mapping[str, Sequence[str]],
    apps: Sequence[str],
    modes: Sequence[str] = MODES,
) -> pd.DataFrame:
    """App x mode association weights; every row sums to one.

    An associated app splits its weight evenly over its modes; an app with no
    association gets ``1 / len(modes)`` on every mode.
    """
    modes = list(modes)
    for app, assoc in associations.items():
        unknown = sorted(set(assoc) - set(modes))
        if unknown:
            raise ValueError(f"unknown mode(s) {unknown} for app {app!r}")
    values = np.full((len(apps), len(modes)), 1.0 / len(modes))
    for i, app in enumerate(apps):
        assoc = sorted(set(associations.get(app, ())), key=modes.index)
        if assoc:
            values[i] = 0.0
            values[i, [modes.index(m) for m in assoc]] = 1.0 / len(assoc)
    frame = pd.DataFrame(values, index=pd.Index(list(apps), name="app"), columns=modes)
    n_assoc = int(sum(1 for a in apps if associations.get(a)))
    log.info("mode association: %d of %d apps associated", n_assoc, len(apps))
    return frame
