"""Trips from network events, and the mobility relations built from them.

Events are ``(device, tower, timestamp)`` records.  Consecutive events of a
device form a *part* of a trip when the straight-line speed between their
towers exceeds 0.5 km/h; maximal runs of adjacent parts are chained into one
trip with an origin, a destination and the towers in between as waypoints.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_non_negative

__all__ = [
    "Trip",
    "SpeedRangeScheme",
    "DEFAULT_SPEED_EDGES",
    "extract_trips",
    "filter_trips",
    "build_municipality_waypoint",
    "build_speed_matrices",
    "tfidf",
    "TfidfWeighter",
]

MIN_PART_SPEED = 0.5  # km/h
MORNING_WINDOW = (6 * 3600, 9 * 3600)  # seconds after local midnight
DEFAULT_SPEED_EDGES = (0.0, 5.0, 10.0, 20.0, 30.0, 60.0, 80.0, 100.0, 120.0)


@dataclass(frozen=True)
class Trip:
    device: str
    origin: str
    destination: str
    waypoints: tuple[str, ...]
    start: float
    end: float
    mean_speed: float  # km/h


@dataclass(frozen=True)
class SpeedRangeScheme:
    """Contiguous half-open speed bins ``(lo, hi]`` in km/h."""

    edges: tuple[float, ...] = DEFAULT_SPEED_EDGES
    n_bins: int = 8

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        if len(edges) != self.n_bins + 1:
            raise ValueError(f"need {self.n_bins + 1} edges, got {len(edges)}")
        if edges[0] < 0 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("speed edges must be non-negative and increasing")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_csv(cls, path) -> "SpeedRangeScheme":
        """Read ``lower,upper`` rows; consecutive rows must share a bound."""
        table = pd.read_csv(path)
        lower = table["lower"].astype(float).tolist()
        upper = table["upper"].astype(float).tolist()
        if lower[1:] != upper[:-1]:
            raise ValueError("speed ranges must be contiguous")
        return cls(tuple(lower) + (upper[-1],), n_bins=len(lower))

    @property
    def labels(self) -> list[str]:
        return [f"{lo:g}-{hi:g} km/h" for lo, hi in zip(self.edges, self.edges[1:])]

    def bin(self, speeds) -> np.ndarray:
        speeds = np.atleast_1d(np.asarray(speeds, dtype=float))
        idx = np.searchsorted(self.edges, speeds, side="left") - 1
        outside = (speeds <= self.edges[0]) | (speeds > self.edges[-1])
        if np.any(outside):
            raise ValueError(
                f"speeds outside ({self.edges[0]:g}, {self.edges[-1]:g}] km/h: "
                f"{speeds[outside][:5]}"
            )
        return idx


def _tower_positions(towers: pd.DataFrame) -> pd.DataFrame:
    towers = towers.copy()
    if "tower" in towers.columns:
        towers = towers.set_index("tower")
    towers.index = towers.index.astype(str)
    return towers


def extract_trips(events: pd.DataFrame, towers: pd.DataFrame) -> list[Trip]:
    """Chain fast consecutive event pairs into trips.

    ``events`` needs columns ``device``, ``tower``, ``timestamp`` (seconds),
    sorted by device then time.  ``towers`` maps tower id to ``x_m``/``y_m``.
    """
    if len(events) == 0:
        return []
    towers = _tower_positions(towers)
    device = events["device"].astype(str).to_numpy()
    tower = events["tower"].astype(str).to_numpy()
    t = events["timestamp"].to_numpy(dtype=float)

    unknown = ~pd.Index(tower).isin(towers.index)
    if unknown.any():
        raise KeyError(f"unknown tower id(s) in events: {sorted(set(tower[unknown]))[:5]}")
    xy = towers.loc[tower, ["x_m", "y_m"]].to_numpy(dtype=float)

    same = device[1:] == device[:-1]
    dt = t[1:] - t[:-1]
    if np.any(same & (dt < 0)):
        raise ValueError("events must be sorted by (device, timestamp)")
    dist = np.hypot(*(xy[1:] - xy[:-1]).T)
    with np.errstate(divide="ignore", invalid="ignore"):
        speed = np.where(dt > 0, dist / dt * 3.6, 0.0)
    moving = same & (dt > 0) & (speed > MIN_PART_SPEED)

    # runs of consecutive moving pairs; pair p joins events p and p + 1
    flags = np.concatenate(([False], moving, [False])).astype(np.int8)
    starts = np.flatnonzero(np.diff(flags) == 1)
    stops = np.flatnonzero(np.diff(flags) == -1)  # exclusive pair index

    trips = []
    for a, b in zip(starts, stops):
        total_dist = dist[a:b].sum()
        total_time = dt[a:b].sum()
        trips.append(
            Trip(
                device=device[a],
                origin=tower[a],
                destination=tower[b],
                waypoints=tuple(tower[a : b + 1]),
                start=float(t[a]),
                end=float(t[b]),
                mean_speed=float(total_dist / total_time * 3.6),
            )
        )
    return trips


def filter_trips(
    trips: Iterable[Trip],
    speed_min: float = 5.0,
    speed_max: float = 120.0,
    window: tuple[float, float] = MORNING_WINDOW,
) -> list[Trip]:
    """Keep trips with a plausible speed that start inside the daily window.

    ``window`` is ``[start, end)`` in seconds after midnight, applied to the
    trip start time.
    """
    lo, hi = window
    return [
        trip
        for trip in trips
        if speed_min <= trip.mean_speed <= speed_max and lo <= trip.start % 86400 < hi
    ]


def _municipality_of(towers: pd.DataFrame) -> dict[str, str]:
    return _tower_positions(towers)["municipality"].astype(str).to_dict()


def build_municipality_waypoint(
    trips: Sequence[Trip],
    towers: pd.DataFrame,
    municipalities: Sequence[str] | None = None,
) -> pd.DataFrame:
    """Count trips per (origin municipality, traversed tower).

    A trip adds one to each distinct tower on its path, in the row of the
    municipality of its origin tower.
    """
    towers = _tower_positions(towers)
    home = _municipality_of(towers)
    if municipalities is None:
        municipalities = sorted(set(home.values()))
    counts = pd.DataFrame(0.0, index=pd.Index(municipalities, name="municipality"),
                          columns=towers.index)
    rows = {m: i for i, m in enumerate(counts.index)}
    cols = {w: j for j, w in enumerate(counts.columns)}
    values = counts.to_numpy(copy=True)
    for trip in trips:
        i = rows[home[trip.origin]]
        for w in set(trip.waypoints):
            values[i, cols[w]] += 1.0
    return pd.DataFrame(values, index=counts.index, columns=counts.columns)


def build_speed_matrices(
    trips: Sequence[Trip],
    towers: pd.DataFrame,
    scheme: SpeedRangeScheme = SpeedRangeScheme(),
    municipalities: Sequence[str] | None = None,
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Trip counts per speed bin by origin municipality and by waypoint."""
    towers = _tower_positions(towers)
    home = _municipality_of(towers)
    if municipalities is None:
        municipalities = sorted(set(home.values()))
    muni = pd.DataFrame(0.0, index=pd.Index(municipalities, name="municipality"),
                        columns=scheme.labels)
    way = pd.DataFrame(0.0, index=towers.index, columns=scheme.labels)
    if not trips:
        return muni, way
    bins = scheme.bin([trip.mean_speed for trip in trips])
    rows = {m: i for i, m in enumerate(muni.index)}
    wrows = {w: i for i, w in enumerate(way.index)}
    mv, wv = muni.to_numpy(copy=True), way.to_numpy(copy=True)
    for trip, s in zip(trips, bins):
        mv[rows[home[trip.origin]], s] += 1.0
        for w in set(trip.waypoints):
            wv[wrows[w], s] += 1.0
    return (
        pd.DataFrame(mv, index=muni.index, columns=muni.columns),
        pd.DataFrame(wv, index=way.index, columns=way.columns),
    )


class TfidfWeighter(TransformerMixin, BaseEstimator):
    """Row-normalized term frequency times smoothed inverse document frequency.

    ``w[m, t] = c[m, t] / sum_t c[m, t] * ln(1 + n_rows / df[t])`` where
    ``df[t]`` counts the rows with a positive entry in column ``t``.  The idf
    is learned in :meth:`fit`; rows summing to zero stay zero.
    """

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        check_non_negative(X, "TfidfWeighter")
        self.n_rows_ = X.shape[0]
        df = (X > 0).sum(axis=0)
        with np.errstate(divide="ignore"):
            self.idf_ = np.where(df > 0, np.log1p(self.n_rows_ / np.maximum(df, 1)), 0.0)
        return self

    def transform(self, X):
        check_is_fitted(self, "idf_")
        X = check_array(X, dtype=float)
        check_non_negative(X, "TfidfWeighter")
        totals = X.sum(axis=1, keepdims=True)
        tf = np.divide(X, totals, out=np.zeros_like(X), where=totals > 0)
        return tf * self.idf_


def tfidf(counts):
    """TF-IDF weights of a count matrix; keeps labels of a DataFrame input."""
    weighted = TfidfWeighter().fit_transform(counts)
    if isinstance(counts, pd.DataFrame):
        return pd.DataFrame(weighted, index=counts.index, columns=counts.columns)
    return weighted
