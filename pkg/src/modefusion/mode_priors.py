"""Initial guess of the updated mode split from official statistics.

Each base-year trip count is scaled by the municipal population change and
then modulated per mode:

* mass-transit by the square root of the citywide smart-card ratio,
* motorised by the square root of the municipal car-permit ratio,
* active by a fixed reduction factor,
* taxi by a fixed increase factor, after adding one trip so no cell is zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

MODES = ("mass-transit", "motorised", "active", "taxi")
STATS_COLUMNS = ("pop_base", "pop_new", "permits_base", "permits_new")

__all__ = [
    "MODES",
    "OfficialStats",
    "check_mode_split",
    "project_mode_split",
    "naive_ratio",
]


def check_mode_split(split) -> pd.DataFrame:
    """Return ``split`` as a float DataFrame with the four mode columns."""
    split = pd.DataFrame(split).astype(float)
    missing = [m for m in MODES if m not in split.columns]
    if missing:
        raise ValueError(f"mode split lacks columns {missing}")
    split = split.loc[:, list(MODES)]
    values = split.to_numpy()
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("mode split entries must be finite and >= 0")
    if split.index.has_duplicates:
        raise ValueError("duplicate municipality labels in mode split")
    split.index = split.index.astype(str)
    split.index.name = "municipality"
    return split


@dataclass
class OfficialStats:
    """Per-municipality population and car permits plus citywide metro counts.

    ``table`` is indexed by municipality with columns ``pop_base``,
    ``pop_new``, ``permits_base`` and ``permits_new``.
    """

    table: pd.DataFrame
    metro_base: float
    metro_new: float
    active_factor: float = 0.975
    taxi_factor: float = 1.09

    def __post_init__(self):
        table = pd.DataFrame(self.table)
        missing = [c for c in STATS_COLUMNS if c not in table.columns]
        if missing:
            raise ValueError(f"stats table lacks columns {missing}")
        table = table.loc[:, list(STATS_COLUMNS)].astype(float)
        table.index = table.index.astype(str)
        table.index.name = "municipality"
        if (table[["pop_base", "pop_new"]] <= 0).any().any():
            raise ValueError("populations must be > 0")
        if (table[["permits_base", "permits_new"]] < 0).any().any():
            raise ValueError("car permits must be >= 0")
        if not (self.metro_base > 0 and self.metro_new > 0):
            raise ValueError("metro counts must be > 0")
        self.table = table

    @property
    def population_ratio(self) -> pd.Series:
        return self.table["pop_new"] / self.table["pop_base"]

    @property
    def permit_ratio(self) -> pd.Series:
        base, new = self.table["permits_base"], self.table["permits_new"]
        bad = (base == 0) & (new > 0)
        if bad.any():
            raise ValueError(
                f"zero base permits with new permits in {list(base.index[bad])}"
            )
        # no permits in either year carries no signal
        return (new / base.where(base > 0)).fillna(1.0)

    @property
    def metro_ratio(self) -> float:
        return self.metro_new / self.metro_base


def project_mode_split(base, stats: OfficialStats) -> pd.DataFrame:
    """Project the base-year split forward with population and mode factors."""
    base = check_mode_split(base)
    missing = sorted(set(stats.table.index) - set(base.index))
    if missing:
        raise ValueError(f"base split lacks municipalities {missing[:5]}")
    base = base.loc[stats.table.index]
    p = stats.population_ratio

    out = pd.DataFrame(index=base.index, columns=list(MODES), dtype=float)
    out["mass-transit"] = base["mass-transit"] * p * np.sqrt(stats.metro_ratio)
    out["motorised"] = base["motorised"] * p * np.sqrt(stats.permit_ratio)
    out["active"] = base["active"] * p * stats.active_factor
    out["taxi"] = (base["taxi"] + 1.0) * p * stats.taxi_factor
    return out


def naive_ratio(base, projected, stats: OfficialStats) -> float:
    """Total projected trips over the population-only projection of ``base``."""
    base = check_mode_split(base)
    projected = check_mode_split(projected)
    if set(base.index) != set(projected.index):
        raise ValueError("base and projected splits cover different municipalities")
    naive = base.loc[projected.index].mul(stats.population_ratio.loc[projected.index], axis=0)
    denominator = float(naive.to_numpy().sum())
    if denominator == 0:
        raise ValueError("population-only projection has zero trips")
    return float(projected.to_numpy().sum()) / denominator
