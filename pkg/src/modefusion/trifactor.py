"""Collective non-negative matrix tri-factorization over a relation graph.

Every relation ``M_ij`` between concepts ``i`` and ``j`` is approximated as
``G_i @ S_ij @ G_j.T``.  The concept factors ``G`` are shared by every
relation that touches the concept and stay non-negative; the backbones ``S``
are unconstrained.  Fitting alternates exact least-squares backbone solves
with a multiplicative update of the factors.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .relation_graph import RelationGraph, check_ranks, default_ranks

__all__ = [
    "SolverConfig",
    "FactorSet",
    "FitReport",
    "initialize",
    "update_backbones",
    "update_factors",
    "fit",
    "reconstruct",
    "relation_error",
    "objective",
    "TriFactorization",
]


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 2000
    relative_tolerance: float = 1e-5
    seed: int = 0
    epsilon: float = 1e-12
    inner_iterations: int = 10
    patience: int = 20

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not self.relative_tolerance > 0:
            raise ValueError("relative_tolerance must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.inner_iterations < 1:
            raise ValueError("inner_iterations must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass
class FactorSet:
    factors: dict[str, np.ndarray]
    backbones: dict[str, np.ndarray]

    def min_factor(self) -> float:
        return min(float(G.min()) for G in self.factors.values())

    def equals(self, other: "FactorSet") -> bool:
        return (
            self.factors.keys() == other.factors.keys()
            and self.backbones.keys() == other.backbones.keys()
            and all(np.array_equal(G, other.factors[c]) for c, G in self.factors.items())
            and all(np.array_equal(S, other.backbones[r]) for r, S in self.backbones.items())
        )


@dataclass
class FitReport:
    per_relation_error: dict[str, float]
    objective_trace: list[float]
    iterations_run: int
    converged: bool
    seed: int
    min_factor_trace: list[float] = field(default_factory=list)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "FitReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _concept_order(graph: RelationGraph) -> list[str]:
    # sorted so that results do not depend on insertion order
    return sorted(graph.concepts)


def initialize(graph: RelationGraph, ranks: Mapping[str, int], seed: int) -> FactorSet:
    """Draw every factor uniformly from (0, 1] and solve the backbones."""
    ranks = check_ranks(graph, ranks)
    rng = np.random.default_rng(int(seed))
    factors = {}
    for name in _concept_order(graph):
        shape = (graph.concept(name).cardinality, ranks[name])
        factors[name] = 1.0 - rng.random(shape)
    return update_backbones(graph, FactorSet(factors, {}))


def update_backbones(graph: RelationGraph, factors: FactorSet) -> FactorSet:
    """Least-squares backbones for fixed factors.

    ``S = pinv(Gi'Gi) Gi' M Gj pinv(Gj'Gj)`` is the exact minimizer of
    ``||M - Gi S Gj'||`` when the factors are held fixed.
    """
    G = factors.factors
    gram_pinv = {name: np.linalg.pinv(Gc.T @ Gc) for name, Gc in G.items()}
    backbones = {}
    for rid in sorted(graph.relations):
        r = graph.relation(rid)
        Gi, Gj = G[r.source], G[r.target]
        backbones[rid] = gram_pinv[r.source] @ (Gi.T @ r.values @ Gj) @ gram_pinv[r.target]
    return FactorSet(G, backbones)


def _pos(X):
    return np.maximum(X, 0.0)


def _neg(X):
    return np.maximum(-X, 0.0)


def update_factors(
    graph: RelationGraph,
    factors: FactorSet,
    epsilon: float = 1e-12,
    inner_iterations: int = 1,
) -> FactorSet:
    """Multiplicative step on every concept factor.

    For concept ``i`` each relation contributes ``A = M Gj S'`` (or
    ``M' Gi S`` when ``i`` is the target) and ``B = S Gj'Gj S'``; then

        G <- G * sqrt(([A]+ + G[B]-) / ([A]- + G[B]+))

    with ``eps`` added to both sides so that equal terms leave ``G`` as is.
    ``A`` and ``B`` are computed once from the incoming factors and the
    elementwise step is repeated ``inner_iterations`` times, which is cheap
    and speeds up convergence considerably.  Backbones pass through unchanged.
    """
    G = factors.factors
    S = factors.backbones
    A = {name: np.zeros_like(Gc) for name, Gc in G.items()}
    B = {name: np.zeros((Gc.shape[1], Gc.shape[1])) for name, Gc in G.items()}
    gram = {name: Gc.T @ Gc for name, Gc in G.items()}

    for rid in sorted(graph.relations):
        r = graph.relation(rid)
        M, Sij = r.values, S[rid]
        A[r.source] += M @ (G[r.target] @ Sij.T)
        B[r.source] += Sij @ gram[r.target] @ Sij.T
        A[r.target] += M.T @ (G[r.source] @ Sij)
        B[r.target] += Sij.T @ gram[r.source] @ Sij

    updated = {}
    for name, Gc in G.items():
        A_pos, A_neg = _pos(A[name]) + epsilon, _neg(A[name]) + epsilon
        B_pos, B_neg = _pos(B[name]), _neg(B[name])
        for _ in range(inner_iterations):
            Gc = Gc * np.sqrt((A_pos + Gc @ B_neg) / (A_neg + Gc @ B_pos))
        updated[name] = Gc
    return FactorSet(updated, dict(S))


def reconstruct(graph: RelationGraph, factors: FactorSet, relation_id: str) -> np.ndarray:
    r = graph.relation(relation_id)
    if relation_id not in factors.backbones:
        raise KeyError(f"no backbone for relation {relation_id!r}")
    G = factors.factors
    return G[r.source] @ factors.backbones[relation_id] @ G[r.target].T


def relation_error(M, M_hat) -> float:
    """Frobenius norm of ``M - M_hat`` relative to the norm of ``M``."""
    M = np.asarray(M, dtype=float)
    M_hat = np.asarray(M_hat, dtype=float)
    if M.shape != M_hat.shape:
        raise ValueError(f"shape mismatch {M.shape} vs {M_hat.shape}")
    norm = np.linalg.norm(M)
    if norm == 0:
        raise ValueError("relation has zero norm; normalized error is undefined")
    return float(np.linalg.norm(M - M_hat) / norm)


def objective(graph: RelationGraph, factors: FactorSet) -> float:
    """Sum over relations of the (unsquared) Frobenius reconstruction error."""
    total = 0.0
    for rid in sorted(graph.relations):
        M = graph.relation(rid).values
        total += float(np.linalg.norm(M - reconstruct(graph, factors, rid)))
    return total


def _per_relation_errors(graph: RelationGraph, factors: FactorSet) -> dict[str, float]:
    errors = {}
    for rid in sorted(graph.relations):
        M = graph.relation(rid).values
        M_hat = reconstruct(graph, factors, rid)
        if np.linalg.norm(M) == 0:
            # all-zero relation (e.g. no trips ingested): zero backbone reproduces it
            errors[rid] = 0.0 if np.linalg.norm(M_hat) == 0 else float("inf")
        else:
            errors[rid] = relation_error(M, M_hat)
    return errors


def fit(
    graph: RelationGraph,
    ranks: Mapping[str, int],
    config: SolverConfig = SolverConfig(),
    callback: Callable[[int, FactorSet, float], None] | None = None,
) -> tuple[FactorSet, FitReport]:
    """Alternate factor and backbone updates until the objective settles.

    Stops once the relative objective change has stayed below
    ``config.relative_tolerance`` for ``config.patience`` consecutive sweeps
    (a single flat step is often a saddle the updates escape from), or after
    ``config.max_iterations`` sweeps.
    ``callback(iteration, factors, objective)`` is called after every sweep.
    """
    fs = initialize(graph, ranks, config.seed)
    # below this the objective is round-off and counts as an exact fit
    floor = 1e-12 * sum(float(np.linalg.norm(r.values)) for r in graph.relations.values())
    trace = [objective(graph, fs)]
    min_trace = [fs.min_factor()]
    converged = False
    iterations = 0
    flat = 0
    for iterations in range(1, config.max_iterations + 1):
        fs = update_backbones(
            graph, update_factors(graph, fs, config.epsilon, config.inner_iterations)
        )
        value = objective(graph, fs)
        previous = trace[-1]
        trace.append(value)
        min_trace.append(fs.min_factor())
        if callback is not None:
            callback(iterations, fs, value)
        change = abs(previous - value) / previous if previous > 0 else 0.0
        flat = flat + 1 if change < config.relative_tolerance or value <= floor else 0
        if flat >= config.patience:
            converged = True
            break
    report = FitReport(
        per_relation_error=_per_relation_errors(graph, fs),
        objective_trace=trace,
        iterations_run=iterations,
        converged=converged,
        seed=int(config.seed),
        min_factor_trace=min_trace,
    )
    return fs, report


class TriFactorization(BaseEstimator):
    """Estimator wrapper around :func:`fit`.

    Parameters
    ----------
    ranks : dict or None
        Latent rank per concept; ``None`` uses :func:`rank_heuristic` for all.
    max_iter : int
    tol : float
        Relative objective change at which fitting stops.
    epsilon : float
        Guard added to both sides of the multiplicative ratio.
    inner_iter : int
        Repeats of the elementwise factor step per sweep.
    patience : int
        Consecutive flat sweeps required before stopping.
    random_state : int
        Seed for the factor initialization.

    Attributes
    ----------
    factors_ : FactorSet
    report_ : FitReport
    ranks_ : dict
    """

    def __init__(
        self, ranks=None, max_iter=2000, tol=1e-5, epsilon=1e-12, inner_iter=10, patience=20,
        random_state=0,
    ):
        self.ranks = ranks
        self.max_iter = max_iter
        self.tol = tol
        self.epsilon = epsilon
        self.inner_iter = inner_iter
        self.patience = patience
        self.random_state = random_state

    def fit(self, graph: RelationGraph, y=None):
        ranks = default_ranks(graph) if self.ranks is None else {**default_ranks(graph), **self.ranks}
        self.ranks_ = check_ranks(graph, ranks)
        config = SolverConfig(
            max_iterations=self.max_iter,
            relative_tolerance=self.tol,
            seed=self.random_state,
            epsilon=self.epsilon,
            inner_iterations=self.inner_iter,
            patience=self.patience,
        )
        self.graph_ = graph
        self.factors_, self.report_ = fit(graph, self.ranks_, config)
        return self

    def reconstruct(self, relation_id: str) -> np.ndarray:
        check_is_fitted(self, "factors_")
        return reconstruct(self.graph_, self.factors_, relation_id)

    @property
    def errors_(self) -> dict[str, float]:
        check_is_fitted(self, "report_")
        return self.report_.per_relation_error
