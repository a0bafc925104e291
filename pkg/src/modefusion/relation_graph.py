"""Unified representation: concepts, relation matrices between them, and ranks.

A :class:`RelationGraph` is built once (``add_concept`` / ``add_relation``),
then frozen and shared read-only by the solver and the pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "Concept",
    "Relation",
    "RelationGraph",
    "rank_heuristic",
    "default_ranks",
    "check_ranks",
    "validate",
]

TARGET_RELATION = "R01"


class GraphError(ValueError):
    """Raised when a concept or relation cannot be added to a graph."""


@dataclass(frozen=True)
class Concept:
    name: str
    labels: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class Relation:
    id: str
    source: str
    target: str
    values: np.ndarray = field(repr=False)
    provenance: str = "derived"

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _check_labels(labels: Sequence[str]) -> tuple[str, ...]:
    labels = tuple(str(label) for label in labels)
    if not labels:
        raise GraphError("a concept needs at least one label")
    if len(set(labels)) != len(labels):
        seen: set[str] = set()
        dupes = sorted({lb for lb in labels if lb in seen or seen.add(lb)})
        raise GraphError(f"duplicate labels: {dupes[:5]}")
    return labels


class RelationGraph:
    """Concepts plus at most one non-negative relation matrix per ordered pair.

    Parameters
    ----------
    target : str
        Id of the relation whose reconstruction is the pipeline output.
    """

    def __init__(self, target: str = TARGET_RELATION):
        self.target = target
        self._concepts: dict[str, Concept] = {}
        self._relations: dict[str, Relation] = {}
        self._pairs: dict[tuple[str, str], str] = {}
        self._frozen = False

    # -- construction -----------------------------------------------------

    def _check_mutable(self) -> None:
        if self._frozen:
            raise GraphError("graph is frozen")

    def add_concept(self, name: str, labels: Sequence[str]) -> str:
        self._check_mutable()
        if name in self._concepts:
            raise GraphError(f"duplicate concept {name!r}")
        self._concepts[name] = Concept(name, _check_labels(labels))
        return name

    def add_relation(
        self,
        source: str,
        target: str,
        values,
        relation_id: str | None = None,
        provenance: str = "derived",
    ) -> str:
        self._check_mutable()
        for name in (source, target):
            if name not in self._concepts:
                raise GraphError(f"unknown concept {name!r}")
        if (source, target) in self._pairs:
            raise GraphError(
                f"relation {source}->{target} already stored as "
                f"{self._pairs[source, target]}"
            )
        if relation_id is None:
            n = len(self._relations) + 1
            while f"R{n:02d}" in self._relations:
                n += 1
            relation_id = f"R{n:02d}"
        elif relation_id in self._relations:
            raise GraphError(f"duplicate relation id {relation_id!r}")

        values = np.array(values, dtype=float)
        expected = (self._concepts[source].cardinality, self._concepts[target].cardinality)
        if values.ndim != 2 or values.shape != expected:
            raise GraphError(
                f"{relation_id}: shape {values.shape} does not match "
                f"{source} x {target} = {expected}"
            )
        if not np.all(np.isfinite(values)):
            raise GraphError(f"{relation_id}: non-finite entries")
        if np.any(values < 0):
            raise GraphError(f"{relation_id}: negative entries")
        values.setflags(write=False)

        self._relations[relation_id] = Relation(relation_id, source, target, values, provenance)
        self._pairs[source, target] = relation_id
        return relation_id

    def freeze(self) -> "RelationGraph":
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    # -- access -------------------------------------------------------------

    @property
    def concepts(self) -> Mapping[str, Concept]:
        return dict(self._concepts)

    @property
    def relations(self) -> Mapping[str, Relation]:
        return dict(self._relations)

    def concept(self, name: str) -> Concept:
        return self._concepts[name]

    def relation(self, relation_id: str) -> Relation:
        try:
            return self._relations[relation_id]
        except KeyError:
            raise KeyError(f"unknown relation {relation_id!r}") from None

    def __contains__(self, relation_id: str) -> bool:
        return relation_id in self._relations

    def __len__(self) -> int:
        return len(self._relations)

    def relations_of(self, concept: str) -> list[Relation]:
        return [r for r in self._relations.values() if concept in (r.source, r.target)]

    def drop(self, relation_ids: Iterable[str]) -> "RelationGraph":
        """Return a frozen copy without the given relations.

        Concepts left without any relation are dropped as well.
        """
        dropped = set(relation_ids)
        kept = [r for r in self._relations.values() if r.id not in dropped]
        used = {r.source for r in kept} | {r.target for r in kept}
        out = RelationGraph(self.target)
        for name, concept in self._concepts.items():
            if name in used:
                out.add_concept(name, concept.labels)
        for r in kept:
            out.add_relation(r.source, r.target, r.values, r.id, r.provenance)
        return out.freeze()

    def signature(self) -> frozenset:
        """Order-free identity of the graph content."""
        return frozenset(
            (r.source, r.target, self._concepts[r.source].labels,
             self._concepts[r.target].labels, r.values.tobytes())
            for r in self._relations.values()
        )

    def __repr__(self) -> str:
        return (
            f"RelationGraph(concepts={len(self._concepts)}, "
            f"relations={len(self._relations)}, target={self.target!r})"
        )


def rank_heuristic(cardinality: int) -> int:
    """Latent rank for a concept: ``floor(2 * sqrt(cardinality) - 1)``.

    Evaluated in integer arithmetic (``isqrt(4c) - 1``) and clamped to
    ``[1, cardinality]``.
    """
    cardinality = int(cardinality)
    if cardinality < 1:
        raise ValueError(f"cardinality must be >= 1, got {cardinality}")
    k = math.isqrt(4 * cardinality) - 1
    return min(max(k, 1), cardinality)


def default_ranks(graph: RelationGraph) -> dict[str, int]:
    return {name: rank_heuristic(c.cardinality) for name, c in graph.concepts.items()}


def check_ranks(graph: RelationGraph, ranks: Mapping[str, int]) -> dict[str, int]:
    out = {}
    for name, concept in graph.concepts.items():
        if name not in ranks:
            raise ValueError(f"missing rank for concept {name!r}")
        k = int(ranks[name])
        if not 1 <= k <= concept.cardinality:
            raise ValueError(
                f"rank {k} for {name!r} outside [1, {concept.cardinality}]"
            )
        out[name] = k
    return out


def validate(graph: RelationGraph) -> list[str]:
    """Return a list of problems with ``graph``; empty when it is usable."""
    problems: list[str] = []
    concepts = graph.concepts
    relations = graph.relations

    if graph.target not in relations:
        problems.append("no target relation")

    adjacency: dict[str, set[str]] = {name: set() for name in concepts}
    for r in relations.values():
        missing = [c for c in (r.source, r.target) if c not in concepts]
        if missing:
            problems.append(f"{r.id}: references missing concept(s) {missing}")
            continue
        expected = (concepts[r.source].cardinality, concepts[r.target].cardinality)
        if r.values.shape != expected:
            problems.append(f"{r.id}: shape {r.values.shape} != {expected}")
        if not np.all(np.isfinite(r.values)):
            problems.append(f"{r.id}: non-finite entries")
        elif np.any(r.values < 0):
            problems.append(f"{r.id}: negative entries")
        adjacency[r.source].add(r.target)
        adjacency[r.target].add(r.source)

    if graph.target in relations and relations[graph.target].source in adjacency:
        start = relations[graph.target].source
        seen = {start}
        stack = [start]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        unreachable = sorted(set(concepts) - seen)
        if unreachable:
            problems.append(f"concepts not connected to {graph.target}: {unreachable}")
    return problems
