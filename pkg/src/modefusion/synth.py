"""Synthetic city with a planted mode split, written in the pipeline's file formats.

The city is a grid of municipalities with towers scattered inside each cell.
Every municipality mixes three archetypes (transit-, car- and active-leaning)
and the planted split is ``trips * mixture @ archetype_shares``.  Everything
else is generated from the same latent mixture:

* devices live in a municipality and use one mode, drawn from the planted
  split; each makes a morning trip through towers preferred by its mode
  (rail towers for mass-transit, highway towers for cars and taxis), and some
  make an evening trip that the time window must discard;
* tower-level app usage follows the modes of the trips passing each tower;
* census-like relations follow the mixture through archetype profiles;
* official statistics and a base-year split are back-solved so that the
  prior projection lands on the planted split up to ``noise_level``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .io import RelationEntry, write_manifest, write_matrix
from .mobility import DEFAULT_SPEED_EDGES, SpeedRangeScheme
from .mode_priors import MODES

__all__ = ["SyntheticSpec", "SyntheticBundle", "planted_truth", "generate"]

ARCHETYPE_SHARES = np.array(
    [
        [0.58, 0.22, 0.15, 0.05],  # transit-leaning
        [0.18, 0.62, 0.12, 0.08],  # car-leaning
        [0.30, 0.18, 0.47, 0.05],  # active-leaning
    ]
)
TRIP_RATE = 0.5  # morning trips per resident

# per-mode lognormal speed: (median km/h, sigma of log)
SPEED_MODEL = {
    "mass-transit": (22.0, 0.30),
    "motorised": (34.0, 0.35),
    "active": (7.0, 0.40),
    "taxi": (28.0, 0.35),
}

INFRASTRUCTURE = (
    "near railways", "near highways", "near primary streets", "near bus corridors",
    "near cycleways", "near pedestrian streets", "near parking",
)
INFRASTRUCTURE_MODES = {
    "near railways": ("mass-transit",),
    "near highways": ("motorised", "taxi"),
    "near primary streets": ("mass-transit", "motorised", "taxi"),
    "near bus corridors": ("mass-transit",),
    "near cycleways": ("active",),
    "near pedestrian streets": ("active",),
    "near parking": ("motorised",),
}

# (unified domain, associated modes, affinity per mode)
KNOWN_APPS = (
    ("uber.com", ("taxi",), (0.0, 0.2, 0.0, 6.0)),
    ("cabify.com", ("taxi",), (0.0, 0.1, 0.0, 4.0)),
    ("waze.com", ("motorised", "taxi"), (0.0, 3.0, 0.0, 2.0)),
    ("citybus-tracker.cl", ("mass-transit",), (4.0, 0.0, 0.1, 0.0)),
    ("metro-info.cl", ("mass-transit",), (3.0, 0.0, 0.0, 0.0)),
    ("nianticlabs.com", ("active",), (0.2, 0.0, 3.0, 0.0)),
    ("bikeshare.cl", ("active",), (0.0, 0.0, 4.0, 0.0)),
    ("fuelprices.cl", ("motorised",), (0.0, 2.0, 0.0, 0.3)),
)
TRACKER_DOMAIN = "ads.tracker-metrics.net"
SUBDOMAINS = ("api", "www", "cdn")
AGE_GROUPS = 11


@dataclass(frozen=True)
class SyntheticSpec:
    n_municipalities: int = 10
    n_towers: int = 200
    n_devices: int = 5000
    n_apps: int = 40
    n_days: int = 1
    noise_level: float = 0.1
    seed: int = 0
    planted_split: pd.DataFrame | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for name in ("n_municipalities", "n_towers", "n_devices", "n_apps", "n_days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_towers < self.n_municipalities:
            raise ValueError("n_towers must be >= n_municipalities")
        if self.n_apps < len(KNOWN_APPS) + 2:
            raise ValueError(f"n_apps must be >= {len(KNOWN_APPS) + 2}")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        if self.planted_split is not None:
            split = pd.DataFrame(self.planted_split)
            if split.shape != (self.n_municipalities, len(MODES)):
                raise ValueError("planted_split must be n_municipalities x 4")
            if float(split.to_numpy().sum()) <= 0:
                raise ValueError("planted split has zero trips")


@dataclass
class SyntheticBundle:
    directory: Path
    manifest: Path
    truth: Path
    ledger: Path


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("truth", "stats", "noise", "towers", "trips", "apps", "census")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _municipality_labels(n: int) -> list[str]:
    return [f"M{i + 1:02d}" for i in range(n)]


def _latent(spec: SyntheticSpec):
    """Population, archetype mixture and planted split (noise-free)."""
    rng = _streams(spec.seed)["truth"]
    labels = _municipality_labels(spec.n_municipalities)
    population = np.round(np.exp(rng.normal(np.log(120_000), 0.6, spec.n_municipalities)))
    mixture = rng.dirichlet(np.full(3, 0.6), spec.n_municipalities)
    if spec.planted_split is not None:
        truth = pd.DataFrame(spec.planted_split).astype(float).copy()
        truth.columns = list(MODES)
        truth.index = pd.Index(labels, name="municipality")
        shares = truth.div(truth.sum(axis=1), axis=0).to_numpy()
        # best non-negative mixture for the given shares
        mixture = np.clip(shares @ np.linalg.pinv(ARCHETYPE_SHARES), 1e-6, None)
        mixture /= mixture.sum(axis=1, keepdims=True)
        population = np.round(truth.sum(axis=1).to_numpy() / TRIP_RATE)
    else:
        trips = population * TRIP_RATE
        truth = pd.DataFrame(
            trips[:, None] * (mixture @ ARCHETYPE_SHARES),
            index=pd.Index(labels, name="municipality"),
            columns=list(MODES),
        )
    return population, mixture, truth


def planted_truth(spec: SyntheticSpec) -> pd.DataFrame:
    """The ground-truth split used by :func:`generate`."""
    return _latent(spec)[2]


def _grid(n: int) -> tuple[int, int]:
    cols = int(np.ceil(np.sqrt(n * 2)))
    rows = int(np.ceil(n / cols))
    return rows, cols


def _make_towers(spec: SyntheticSpec, rng, cell=4000.0) -> pd.DataFrame:
    munis = _municipality_labels(spec.n_municipalities)
    rows, cols = _grid(spec.n_municipalities)
    per = np.full(spec.n_municipalities, spec.n_towers // spec.n_municipalities)
    per[: spec.n_towers % spec.n_municipalities] += 1
    records = []
    k = 0
    for i, (m, count) in enumerate(zip(munis, per)):
        r, c = divmod(i, cols)
        xs = np.round(c * cell + rng.uniform(0, cell, count), 1)
        ys = np.round(r * cell + rng.uniform(0, cell, count), 1)
        roles = rng.choice(["rail", "highway", "local"], size=count, p=[0.2, 0.2, 0.6])
        roles[0] = "rail"
        if count > 1:
            roles[1] = "highway"
        for x, y, role in zip(xs, ys, roles):
            k += 1
            records.append((f"BTS-{k:04d}", x, y, m, role))
    return pd.DataFrame(records, columns=["tower", "x_m", "y_m", "municipality", "role"])


def _macro_areas(spec: SyntheticSpec) -> dict[str, str]:
    rows, cols = _grid(spec.n_municipalities)
    out = {}
    for i, m in enumerate(_municipality_labels(spec.n_municipalities)):
        r, c = divmod(i, cols)
        if abs(c - (cols - 1) / 2) <= 0.5 and abs(r - (rows - 1) / 2) <= 0.5:
            out[m] = "Center"
        elif c < cols / 3:
            out[m] = "West"
        elif c >= 2 * cols / 3:
            out[m] = "East"
        else:
            out[m] = "North" if r >= rows / 2 else "South"
    return out


def _path(origin, destination, mode, towers, pools, rng) -> list[int]:
    """Tower indices from origin to destination through mode-preferred towers."""
    xy = towers[["x_m", "y_m"]].to_numpy()
    a, b = xy[origin], xy[destination]
    n_mid = int(np.clip(round(np.hypot(*(b - a)) / 1500.0), 1, 8))
    pool = pools[mode]
    path = [origin]
    for f in np.linspace(0, 1, n_mid + 2)[1:-1]:
        point = a + f * (b - a) + rng.normal(0, 150.0, 2)
        nearest = pool[np.argmin(np.hypot(*(xy[pool] - point).T))]
        path.append(int(nearest))
    path.append(destination)
    deduped = [path[0]]
    for p in path[1:]:
        if p != deduped[-1]:
            deduped.append(p)
    return deduped


def _simulate_trips(spec, truth, towers, rng):
    """Device trips and their events; returns (events, ledger)."""
    munis = list(truth.index)
    xy = towers[["x_m", "y_m"]].to_numpy()
    by_muni = {m: np.flatnonzero(towers["municipality"].to_numpy() == m) for m in munis}
    role = towers["role"].to_numpy()
    everywhere = np.arange(len(towers))
    rail = np.flatnonzero(role == "rail")
    highway = np.flatnonzero(role == "highway")
    if highway.size == 0:
        highway = everywhere
    pools = {"mass-transit": rail, "motorised": highway, "taxi": highway, "active": everywhere}
    totals = truth.sum(axis=1).to_numpy()
    home_p = totals / totals.sum()
    shares = truth.div(truth.sum(axis=1), axis=0).to_numpy()
    attract = rng.uniform(0.5, 2.0, len(munis))
    attract /= attract.sum()

    events, ledger = [], []

    def emit(device, path, start, speed, mode, kind):
        t = float(start)
        stamps = [int(round(t))]
        for p, q in zip(path, path[1:]):
            t += np.hypot(*(xy[q] - xy[p])) / (speed / 3.6)
            stamps.append(max(int(round(t)), stamps[-1] + 1))
        for p, s in zip(path, stamps):
            events.append((device, towers["tower"].iat[p], s))
        ledger.append(
            (device, mode, kind, towers["tower"].iat[path[0]], towers["tower"].iat[path[-1]],
             len(path), stamps[0], stamps[-1], round(speed, 6))
        )
        return stamps[-1]

    for d in range(spec.n_devices):
        device = f"D{d + 1:06d}"
        home_m = rng.choice(len(munis), p=home_p)
        mode = MODES[rng.choice(len(MODES), p=shares[home_m])]
        home = int(rng.choice(by_muni[munis[home_m]]))
        work_m = rng.choice(len(munis), p=attract)
        work = int(rng.choice(by_muni[munis[work_m]]))
        if work == home:
            work = int(rng.choice([t for t in by_muni[munis[work_m]] if t != home] or
                                  [t for t in range(len(towers)) if t != home]))
        evening = rng.random() < 0.3
        median, sigma = SPEED_MODEL[mode]
        for day in range(spec.n_days):
            base = day * 86400
            start = base + rng.uniform(6 * 3600 + 900, 9 * 3600 - 3600)
            speed = float(np.exp(rng.normal(np.log(median), sigma)))
            path = _path(home, work, mode, towers, pools, rng)
            events.append((device, towers["tower"].iat[home], int(start - rng.uniform(900, 3600))))
            end = emit(device, path, start, speed, mode, "morning")
            events.append((device, towers["tower"].iat[work], end + int(rng.uniform(900, 3600))))
            if evening:
                start = base + rng.uniform(17 * 3600, 19 * 3600)
                speed = float(np.exp(rng.normal(np.log(median), sigma)))
                back = _path(work, home, mode, towers, pools, rng)
                end = emit(device, back, start, speed, mode, "evening")
                events.append((device, towers["tower"].iat[home], end + int(rng.uniform(900, 3600))))

    events = pd.DataFrame(events, columns=["device", "tower", "timestamp"])
    events = events.sort_values(["device", "timestamp"], kind="mergesort").reset_index(drop=True)
    ledger = pd.DataFrame(
        ledger,
        columns=["device", "mode", "kind", "origin", "destination", "n_towers",
                 "start", "end", "speed_kmh"],
    )
    tod = ledger["start"] % 86400
    ledger["expected_kept"] = (
        (tod >= 6 * 3600) & (tod < 9 * 3600)
        & (ledger["speed_kmh"] >= 5.0) & (ledger["speed_kmh"] <= 120.0)
    )
    return events, ledger


def _app_usage(spec, towers, ledger, events, rng):
    """Long-format tower/domain/count rows plus association lines."""
    n_generic = spec.n_apps - len(KNOWN_APPS)
    generic = [f"app{i + 1:03d}.com" for i in range(n_generic)]
    affinity = np.zeros((spec.n_apps, len(MODES)))
    for i, (_, _, aff) in enumerate(KNOWN_APPS):
        affinity[i] = aff
    affinity[len(KNOWN_APPS):] = rng.gamma(0.6, 0.5, (n_generic, len(MODES)))
    names = [a for a, _, _ in KNOWN_APPS] + generic
    background = rng.gamma(2.0, 1.0, spec.n_apps)
    # two generic apps used only around a couple of towers (low entropy)
    concentrated = {len(KNOWN_APPS): rng.choice(len(towers), 1),
                    len(KNOWN_APPS) + 1: rng.choice(len(towers), 2, replace=False)}

    tower_ids = towers["tower"].tolist()
    index = {t: i for i, t in enumerate(tower_ids)}
    passes = np.zeros((len(towers), len(MODES)))
    morning = ledger[ledger["kind"] == "morning"]
    trip_towers = events.merge(
        morning[["device", "start", "end", "mode"]], on="device"
    )
    trip_towers = trip_towers[
        (trip_towers["timestamp"] >= trip_towers["start"])
        & (trip_towers["timestamp"] <= trip_towers["end"])
    ]
    for tower, mode in zip(trip_towers["tower"], trip_towers["mode"]):
        passes[index[tower], MODES.index(mode)] += 1.0
    activity = passes.sum(axis=1) + 5.0

    rate = 2.0 * (activity[:, None] * background[None, :] * 0.3 + passes @ affinity.T)
    for a, where in concentrated.items():
        mask = np.ones(len(towers), bool)
        mask[where] = False
        rate[mask, a] = 0.0
        rate[where, a] = 200.0
    counts = rng.poisson(rate)

    rows = []
    for t, tower in enumerate(tower_ids):
        for a, app in enumerate(names):
            c = int(counts[t, a])
            if c == 0:
                continue
            # split across subdomains so unification has work to do
            parts = rng.multinomial(c, [0.5, 0.3, 0.2])
            for sub, n in zip(SUBDOMAINS, parts):
                if n:
                    rows.append((tower, f"{sub}.{app}", int(n)))
        rows.append((tower, TRACKER_DOMAIN, int(rng.poisson(50))))
    usage = pd.DataFrame(rows, columns=["tower", "domain", "count"])
    associations = [",".join((app,) + modes) for app, modes, _ in KNOWN_APPS]
    return usage, associations


def _census(spec, population, mixture, rng):
    """Municipality relations that follow the archetype mixture."""
    labels = _municipality_labels(spec.n_municipalities)
    idx = pd.Index(labels, name="municipality")

    def profile(n_cols, concentration=1.0):
        return rng.dirichlet(np.full(n_cols, concentration), 3)

    def noisy(values):
        return values * np.exp(rng.normal(0, 0.03, values.shape))

    work = profile(10)
    migration = profile(8, 0.5)
    income = np.array(
        [[0.30, 0.30, 0.20, 0.12, 0.08],
         [0.05, 0.10, 0.20, 0.30, 0.35],
         [0.20, 0.25, 0.25, 0.18, 0.12]]
    )
    ages_base = profile(AGE_GROUPS, 4.0)
    ages_new = ages_base * rng.uniform(0.8, 1.25, ages_base.shape)
    ages_new /= ages_new.sum(axis=1, keepdims=True)
    growth = rng.uniform(1.0, 1.2, spec.n_municipalities)
    pop_base = np.round(population / growth)

    weights = population[:, None] * mixture
    out = {
        "R02": pd.DataFrame(noisy(0.45 * weights @ work), idx,
                            [f"W{i + 1:02d}" for i in range(10)]),
        "R03": pd.DataFrame(noisy(0.06 * weights @ migration), idx,
                            [f"C{i + 1:02d}" for i in range(8)]),
        "R04": pd.DataFrame(
            noisy(np.hstack([(pop_base[:, None] * mixture) @ ages_base, weights @ ages_new])),
            idx,
            [f"2012:{10 * i}-{10 * i + 9}" for i in range(AGE_GROUPS)]
            + [f"2020:{10 * i}-{10 * i + 9}" for i in range(AGE_GROUPS)],
        ),
        "R06": pd.DataFrame(noisy(weights @ income), idx, [f"Q{i + 1:02d}" for i in range(5)]),
    }
    return out, pop_base, income


def _speed_bin_probabilities(scheme: SpeedRangeScheme) -> np.ndarray:
    """P(speed bin | mode) from the lognormal speed model, modes x bins."""
    edges = np.array(scheme.edges)
    out = np.zeros((len(MODES), len(edges) - 1))
    for i, mode in enumerate(MODES):
        median, sigma = SPEED_MODEL[mode]
        cdf = stats.lognorm.cdf(edges, s=sigma, scale=median)
        out[i] = np.diff(cdf)
    return out


def _stats_and_base(spec, truth, pop_base, population, rng_stats, rng_noise):
    """Back-solve statistics and a base-year split that project onto the truth."""
    p = population / pop_base
    permits_base = np.round(pop_base * rng_stats.uniform(0.15, 0.35, len(p)))
    permits_new = np.round(permits_base * rng_stats.uniform(1.1, 1.5, len(p)))
    metro_base = 2.4e9
    metro_new = metro_base * 0.563
    target = truth.to_numpy() * (1 + spec.noise_level * rng_noise.uniform(-1, 1, truth.shape))
    base = np.empty_like(target)
    base[:, 0] = target[:, 0] / (p * np.sqrt(metro_new / metro_base))
    base[:, 1] = target[:, 1] / (p * np.sqrt(permits_new / permits_base))
    base[:, 2] = target[:, 2] / (p * 0.975)
    base[:, 3] = target[:, 3] / (p * 1.09) - 1.0
    if np.any(base < 0):
        raise ValueError("planted taxi counts too small to back-solve a base split")
    stats_table = pd.DataFrame(
        {"pop_base": pop_base, "pop_new": population,
         "permits_base": permits_base, "permits_new": permits_new},
        index=truth.index,
    )
    base_split = pd.DataFrame(base, index=truth.index, columns=list(MODES))
    return stats_table, (metro_base, metro_new), base_split


def generate(spec: SyntheticSpec, directory: str | Path) -> SyntheticBundle:
    """Write a complete input bundle for the pipeline into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = _streams(spec.seed)
    population, mixture, truth = _latent(spec)
    if float(truth.to_numpy().sum()) <= 0:
        raise ValueError("planted split has zero trips")
    scheme = SpeedRangeScheme(DEFAULT_SPEED_EDGES)

    towers = _make_towers(spec, rng["towers"])
    events, ledger = _simulate_trips(spec, truth, towers, rng["trips"])
    usage, associations = _app_usage(spec, towers, ledger, events, rng["apps"])
    census, pop_base, income = _census(spec, population, mixture, rng["census"])
    stats_table, (metro_base, metro_new), base_split = _stats_and_base(
        spec, truth, pop_base, population, rng["stats"], rng["noise"]
    )

    # survey-style relations (fractions per row)
    speed_given_mode = _speed_bin_probabilities(scheme)
    city_modes = truth.sum(axis=0).to_numpy()
    joint_speed = (speed_given_mode * city_modes[:, None]).T
    r12 = pd.DataFrame(joint_speed / joint_speed.sum(axis=1, keepdims=True),
                       index=pd.Index(scheme.labels, name="speed"), columns=list(MODES))
    trips = population * TRIP_RATE
    joint_income = np.einsum(
        "m,mk,kq,kd->qd", trips, mixture, income, ARCHETYPE_SHARES
    )
    r11 = pd.DataFrame(joint_income / joint_income.sum(axis=1, keepdims=True),
                       index=pd.Index([f"Q{i + 1:02d}" for i in range(5)], name="income"),
                       columns=list(MODES))
    infra_rng = rng["towers"]
    flags = np.zeros((len(towers), len(INFRASTRUCTURE)))
    role = towers["role"].to_numpy()
    flags[role == "rail", 0] = 1
    flags[role == "rail", 3] = infra_rng.random((role == "rail").sum()) < 0.6
    flags[role == "highway", 1] = 1
    flags[role == "highway", 2] = infra_rng.random((role == "highway").sum()) < 0.6
    local = role == "local"
    for j in (4, 5, 6):
        flags[local, j] = infra_rng.random(local.sum()) < 0.35
    flags[:, 2] = np.maximum(flags[:, 2], infra_rng.random(len(towers)) < 0.15)
    r10 = pd.DataFrame(flags, index=pd.Index(towers["tower"], name="waypoint"),
                       columns=list(INFRASTRUCTURE))
    r14 = pd.DataFrame(
        [[1.0 if m in INFRASTRUCTURE_MODES[i] else 0.0 for m in MODES] for i in INFRASTRUCTURE],
        index=pd.Index(list(INFRASTRUCTURE), name="infrastructure"), columns=list(MODES),
    )

    rel_dir = directory / "relations"
    static = {
        "R02": ("municipality", "work_type", census["R02"], "census"),
        "R03": ("municipality", "migration", census["R03"], "census"),
        "R04": ("municipality", "population", census["R04"], "census"),
        "R06": ("municipality", "income", census["R06"], "census"),
        "R10": ("waypoint", "infrastructure", r10, "manual"),
        "R11": ("income", "mode", r11, "survey"),
        "R12": ("speed", "mode", r12, "survey"),
        "R14": ("infrastructure", "mode", r14, "manual"),
    }
    entries = []
    for rid, (src, dst, frame, provenance) in static.items():
        path = rel_dir / f"{rid}.csv"
        write_matrix(frame, path, corner=src)
        entries.append(RelationEntry(rid, src, dst, path, provenance))
    write_manifest(rel_dir / "static.json", entries)

    towers.drop(columns="role").to_csv(directory / "towers.csv", index=False)
    towers[["tower", "role"]].to_csv(directory / "tower_roles.csv", index=False)
    events.to_csv(directory / "events.csv", index=False)
    usage.to_csv(directory / "usage.csv", index=False)
    (directory / "associations.csv").write_text("\n".join(associations) + "\n", encoding="utf-8")
    (directory / "exclusions.txt").write_text(TRACKER_DOMAIN + "\n", encoding="utf-8")
    stats_table.rename_axis("municipality").reset_index().to_csv(directory / "stats.csv", index=False)
    pd.DataFrame({"metro_base": [metro_base], "metro_new": [metro_new]}).to_csv(
        directory / "metro.csv", index=False
    )
    write_matrix(base_split, directory / "base_split.csv", corner="municipality")
    write_matrix(truth, directory / "truth.csv", corner="municipality")
    pd.Series(_macro_areas(spec), name="macro_area").rename_axis("municipality").reset_index().to_csv(
        directory / "macro_areas.csv", index=False
    )
    ledger.to_csv(directory / "trip_ledger.csv", index=False)

    run_config = {
        "data_configuration": "ALL",
        "n_instances": 20,
        "base_seed": 0,
        "solver": {"max_iterations": 2000, "relative_tolerance": 1e-5},
        "active_factor": 0.975,
        "taxi_factor": 1.09,
        "macro_areas": "macro_areas.csv",
    }
    (directory / "run_config.json").write_text(json.dumps(run_config, indent=1) + "\n",
                                               encoding="utf-8")
    manifest = {
        "relations": "relations/static.json",
        "events": "events.csv",
        "towers": "towers.csv",
        "usage": "usage.csv",
        "associations": "associations.csv",
        "exclusions": "exclusions.txt",
        "stats": "stats.csv",
        "metro": "metro.csv",
        "base_split": "base_split.csv",
        "run_config": "run_config.json",
        "reference": "truth.csv",
        "output": "out",
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n",
                                             encoding="utf-8")
    return SyntheticBundle(directory, directory / "manifest.json",
                           directory / "truth.csv", directory / "trip_ledger.csv")
