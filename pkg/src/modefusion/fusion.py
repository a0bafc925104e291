"""Multi-seed fitting, model selection, the updated mode split and validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .mode_priors import MODES, check_mode_split
from .relation_graph import RelationGraph, check_ranks, default_ranks, validate
from .trifactor import FactorSet, FitReport, SolverConfig, fit, reconstruct

__all__ = [
    "DATA_CONFIGURATIONS",
    "RunConfig",
    "InstanceResult",
    "configure_graph",
    "run_instances",
    "global_error",
    "select_best",
    "updated_mode_split",
    "mode_shares",
    "pearson",
    "pearson_pvalue",
    "bonferroni",
    "macro_totals",
    "compare_configurations",
    "ModeSplitFusion",
]

ERROR_FLOOR = 1e-15

# relations removed from the full graph in each ablation
DATA_CONFIGURATIONS: dict[str, tuple[str, ...]] = {
    "ALL": (),
    "NO_DPI": ("R09", "R13"),
    "NO_MOBILE": ("R09", "R13", "R05", "R07", "R08", "R10"),
}


def _configuration_name(name: str) -> str:
    key = name.upper().replace("-", "_")
    if key not in DATA_CONFIGURATIONS:
        raise ValueError(
            f"unknown data configuration {name!r}; expected one of {sorted(DATA_CONFIGURATIONS)}"
        )
    return key


@dataclass(frozen=True)
class RunConfig:
    n_instances: int = 100
    data_configuration: str = "ALL"
    base_seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_instances < 1:
            raise ValueError("n_instances must be >= 1")
        object.__setattr__(self, "data_configuration", _configuration_name(self.data_configuration))


@dataclass
class InstanceResult:
    seed: int
    report: FitReport
    global_error: float
    updated_split: pd.DataFrame
    raw_split: pd.DataFrame
    clamped_cells: int
    factors: FactorSet = field(repr=False)


def configure_graph(graph: RelationGraph, configuration: str) -> RelationGraph:
    """Drop the relations excluded by a data configuration and validate."""
    configuration = _configuration_name(configuration)
    out = graph.drop(DATA_CONFIGURATIONS[configuration])
    if len(out) == 0:
        raise ValueError(f"graph is empty under configuration {configuration}")
    problems = validate(out)
    if problems:
        raise ValueError(f"invalid graph under {configuration}: {problems}")
    return out


def global_error(report: FitReport | Mapping[str, float], excluded: str = "R01") -> float:
    """Geometric mean of the normalized relation errors, skipping ``excluded``.

    Errors are floored at 1e-15 so one exact relation does not zero the mean.
    """
    errors = report.per_relation_error if isinstance(report, FitReport) else report
    values = [max(float(e), ERROR_FLOOR) for rid, e in errors.items() if rid != excluded]
    if not values:
        raise ValueError("no relation left after excluding the target")
    return float(np.exp(np.mean(np.log(values))))


def updated_mode_split(
    graph: RelationGraph, factors: FactorSet, target: str | None = None
) -> tuple[pd.DataFrame, pd.DataFrame, int]:
    """Reconstruct the target relation from the shared latent space.

    Returns ``(clamped, raw, n_clamped)``; negative cells of the raw
    reconstruction are set to zero in ``clamped``.
    """
    target = target or graph.target
    if target not in graph:
        raise KeyError(f"graph has no relation {target!r}")
    r = graph.relation(target)
    raw = reconstruct(graph, factors, target)
    index = pd.Index(graph.concept(r.source).labels, name=r.source)
    columns = list(graph.concept(r.target).labels)
    n_clamped = int(np.count_nonzero(raw < 0))
    return (
        pd.DataFrame(np.maximum(raw, 0.0), index=index, columns=columns),
        pd.DataFrame(raw, index=index, columns=columns),
        n_clamped,
    )


def _run_one(graph: RelationGraph, ranks: Mapping[str, int], solver: SolverConfig, seed: int):
    config = SolverConfig(
        max_iterations=solver.max_iterations,
        relative_tolerance=solver.relative_tolerance,
        seed=seed,
        epsilon=solver.epsilon,
        inner_iterations=solver.inner_iterations,
        patience=solver.patience,
    )
    factors, report = fit(graph, ranks, config)
    split, raw, n_clamped = updated_mode_split(graph, factors)
    return InstanceResult(
        seed=seed,
        report=report,
        global_error=global_error(report, graph.target),
        updated_split=split,
        raw_split=raw,
        clamped_cells=n_clamped,
        factors=factors,
    )


def run_instances(
    graph: RelationGraph, ranks: Mapping[str, int] | None, config: RunConfig
) -> list[InstanceResult]:
    """Fit ``config.n_instances`` models with seeds ``base_seed + i``.

    ``graph`` is the full graph; the data configuration is applied here.
    ``ranks`` may cover more concepts than survive the configuration.
    """
    configured = configure_graph(graph, config.data_configuration)
    ranks = default_ranks(configured) if ranks is None else {
        **default_ranks(configured), **{c: k for c, k in ranks.items() if c in configured.concepts}
    }
    ranks = check_ranks(configured, ranks)
    seeds = [config.base_seed + i for i in range(config.n_instances)]
    if config.n_jobs == 1:
        results = [_run_one(configured, ranks, config.solver, s) for s in seeds]
    else:
        results = Parallel(n_jobs=config.n_jobs)(
            delayed(_run_one)(configured, ranks, config.solver, s) for s in seeds
        )
    return sorted(results, key=lambda r: r.seed)


def select_best(results: Sequence[InstanceResult]) -> InstanceResult:
    """Instance with the smallest global error; ties go to the smaller seed."""
    if not results:
        raise ValueError("no instances to select from")
    return min(results, key=lambda r: (r.global_error, r.seed))


def mode_shares(split) -> tuple[pd.Series, pd.DataFrame]:
    """Citywide and per-municipality shares of each mode.

    Rows with no trips get ``nan`` shares.
    """
    split = pd.DataFrame(split).astype(float)
    total = float(split.to_numpy().sum())
    if total <= 0:
        raise ValueError("mode split has no trips")
    citywide = split.sum(axis=0) / total
    row_totals = split.sum(axis=1)
    per_row = split.div(row_totals.where(row_totals > 0), axis=0)
    return citywide, per_row


def pearson(x, y) -> float:
    """Pearson correlation with population (1/n) moments."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("vectors differ in length")
    if x.size < 3:
        raise ValueError("need at least 3 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.mean(dx * dx), np.mean(dy * dy)
    if sxx == 0 or syy == 0:
        raise ValueError("constant vector; correlation is undefined")
    # sqrt(v * v) == v in IEEE arithmetic, so r(x, x) is exactly 1
    r = np.mean(dx * dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def pearson_pvalue(r: float, n: int) -> float:
    """Two-sided p-value of ``r`` from Student's t with ``n - 2`` dof."""
    if n < 3:
        raise ValueError("need n >= 3")
    if abs(r) >= 1:
        return 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 2)))


def bonferroni(p: float, m: int) -> float:
    return float(min(1.0, p * m))


def macro_totals(split, mapping: Mapping[str, str], mode: str = "mass-transit") -> pd.Series:
    """Sum one mode column per macro-area, plus a ``Total`` entry."""
    split = pd.DataFrame(split)
    mapping = {str(k): str(v) for k, v in mapping.items()}
    unmapped = [m for m in split.index.astype(str) if m not in mapping]
    if unmapped:
        raise KeyError(f"municipalities without macro-area: {unmapped[:5]}")
    areas = list(dict.fromkeys(mapping.values()))
    if len(split) == 0:
        totals = pd.Series(0.0, index=areas)
    else:
        column = split[mode].astype(float)
        totals = column.groupby(split.index.astype(str).map(mapping)).sum().reindex(areas, fill_value=0.0)
    totals.loc["Total"] = float(totals.sum())
    totals.index.name = "macro_area"
    totals.name = mode
    return totals


def _aligned(a: pd.DataFrame, b: pd.DataFrame) -> pd.DataFrame:
    if set(a.index) != set(b.index):
        raise ValueError("splits cover different municipalities")
    return b.loc[a.index]


def compare_configurations(split_a, split_b, modes: Sequence[str] = MODES) -> pd.DataFrame:
    """Per-mode Pearson r between two splits, Bonferroni-corrected over modes.

    Rows are aligned by municipality label.  A mode whose column is constant
    in either split gets ``nan``.
    """
    a = pd.DataFrame(split_a).astype(float)
    b = _aligned(a, pd.DataFrame(split_b).astype(float))
    n = len(a)
    rows = []
    for mode in modes:
        try:
            r = pearson(a[mode], b[mode])
        except ValueError:
            rows.append((mode, np.nan, np.nan, np.nan))
            continue
        p = pearson_pvalue(r, n)
        rows.append((mode, r, p, bonferroni(p, len(modes))))
    return pd.DataFrame(rows, columns=["mode", "r", "p", "p_bonferroni"]).set_index("mode")


class ModeSplitFusion(BaseEstimator):
    """Fit many seeded tri-factorizations and keep the lowest-error model.

    Parameters
    ----------
    n_instances : int
    data_configuration : {"ALL", "NO_DPI", "NO_MOBILE"}
    base_seed : int
    ranks : dict or None
        Rank overrides per concept; others use the rank heuristic.
    max_iter, tol, epsilon, inner_iter, patience
        Solver settings, see :class:`SolverConfig`.
    n_jobs : int
        Instances fitted in parallel; results do not depend on it.
    """

    def __init__(
        self,
        n_instances=100,
        data_configuration="ALL",
        base_seed=0,
        ranks=None,
        max_iter=2000,
        tol=1e-5,
        epsilon=1e-12,
        inner_iter=10,
        patience=20,
        n_jobs=1,
    ):
        self.n_instances = n_instances
        self.data_configuration = data_configuration
        self.base_seed = base_seed
        self.ranks = ranks
        self.max_iter = max_iter
        self.tol = tol
        self.epsilon = epsilon
        self.inner_iter = inner_iter
        self.patience = patience
        self.n_jobs = n_jobs

    def _run_config(self) -> RunConfig:
        solver = SolverConfig(
            max_iterations=self.max_iter,
            relative_tolerance=self.tol,
            seed=0,
            epsilon=self.epsilon,
            inner_iterations=self.inner_iter,
            patience=self.patience,
        )
        return RunConfig(self.n_instances, self.data_configuration, self.base_seed, solver, self.n_jobs)

    def fit(self, graph: RelationGraph, y=None):
        config = self._run_config()
        self.graph_ = configure_graph(graph, config.data_configuration)
        self.results_ = run_instances(graph, self.ranks, config)
        self.best_ = select_best(self.results_)
        self.ranks_ = {c: G.shape[1] for c, G in self.best_.factors.factors.items()}
        return self

    def predict(self, X=None) -> pd.DataFrame:
        """Updated mode split of the selected model (negative cells clamped)."""
        check_is_fitted(self, "best_")
        return self.best_.updated_split

    def instance_table(self) -> pd.DataFrame:
        check_is_fitted(self, "results_")
        table = pd.DataFrame(
            {
                "seed": [r.seed for r in self.results_],
                "global_error": [r.global_error for r in self.results_],
                "iterations": [r.report.iterations_run for r in self.results_],
                "converged": [r.report.converged for r in self.results_],
                "clamped_cells": [r.clamped_cells for r in self.results_],
            }
        )
        table["best"] = table["seed"] == self.best_.seed
        return table

    def score(self, reference, mode: str = "mass-transit") -> float:
        """Pearson r of the predicted ``mode`` column against ``reference``."""
        predicted = check_mode_split(self.predict())[mode]
        reference = pd.Series(reference, dtype=float)
        reference.index = reference.index.astype(str)
        return pearson(predicted, reference.loc[predicted.index])
