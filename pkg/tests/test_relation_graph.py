import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TABLE2, table2_graph
from modefusion.relation_graph import (
    GraphError,
    Relation,
    RelationGraph,
    check_ranks,
    default_ranks,
    rank_heuristic,
    validate,
)


def test_concept_cardinality():
    g = RelationGraph()
    g.add_concept("mode", ["mass-transit", "motorised", "active", "taxi"])
    g.add_concept("income", [f"Q0{i}" for i in range(1, 6)])
    assert g.concept("mode").cardinality == 4
    assert g.concept("income").cardinality == 5


@pytest.mark.parametrize("labels", [[], ["a", "a"]])
def test_concept_rejects_bad_labels(labels):
    with pytest.raises(GraphError):
        RelationGraph().add_concept("x", labels)


def test_duplicate_concept_rejected():
    g = RelationGraph()
    g.add_concept("x", ["a"])
    with pytest.raises(GraphError):
        g.add_concept("x", ["b"])


def _two_concepts():
    g = RelationGraph()
    g.add_concept("a", ["a0", "a1"])
    g.add_concept("b", ["b0", "b1", "b2"])
    return g


def test_add_relation_shape():
    g = _two_concepts()
    rid = g.add_relation("a", "b", np.ones((2, 3)))
    assert rid == "R01"
    assert g.relation("R01").values.shape == (2, 3)
    with pytest.raises(GraphError, match="shape"):
        _two_concepts().add_relation("b", "a", np.ones((2, 3)))


@pytest.mark.parametrize("bad", [-1.0, np.nan, np.inf])
def test_add_relation_domain(bad):
    M = np.ones((2, 3))
    M[1, 2] = bad
    with pytest.raises(GraphError):
        _two_concepts().add_relation("a", "b", M)


def test_duplicates_and_unknown_concepts():
    g = _two_concepts()
    g.add_relation("a", "b", np.ones((2, 3)), "R01")
    with pytest.raises(GraphError):
        g.add_relation("a", "b", np.ones((2, 3)), "R02")
    with pytest.raises(GraphError):
        g.add_relation("b", "a", np.ones((3, 2)), "R01")
    with pytest.raises(GraphError):
        g.add_relation("a", "zzz", np.ones((2, 1)))


def test_values_are_read_only_and_frozen_graph_immutable():
    g = _two_concepts()
    g.add_relation("a", "b", np.ones((2, 3)))
    with pytest.raises(ValueError):
        g.relation("R01").values[0, 0] = 5
    g.freeze()
    with pytest.raises(GraphError):
        g.add_concept("c", ["c0"])


def test_unknown_relation_lookup():
    with pytest.raises(KeyError):
        _two_concepts().relation("R99")


@pytest.mark.parametrize("c,k", [(4, 3), (40, 11), (1878, 85), (1, 1), (2, 1), (9, 5)])
def test_rank_heuristic_values(c, k):
    assert rank_heuristic(c) == k


def test_rank_heuristic_matches_float_formula():
    for c in range(1, 5000):
        assert rank_heuristic(c) == min(max(math.floor(2 * math.sqrt(c) - 1), 1), c)


def test_rank_heuristic_rejects_zero():
    with pytest.raises(ValueError):
        rank_heuristic(0)


@given(st.integers(1, 10**6), st.integers(1, 10**6))
def test_rank_heuristic_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert rank_heuristic(lo) <= rank_heuristic(hi)
    assert 1 <= rank_heuristic(lo) <= lo


def test_check_ranks():
    g = _two_concepts()
    g.add_relation("a", "b", np.ones((2, 3)))
    assert check_ranks(g, default_ranks(g)) == {"a": 1, "b": 2}
    with pytest.raises(ValueError):
        check_ranks(g, {"a": 1})
    with pytest.raises(ValueError):
        check_ranks(g, {"a": 3, "b": 1})


def test_validate_full_table2_graph(rng):
    g = table2_graph(rng)
    assert len(g) == 14
    assert validate(g) == []


def test_validate_empty_graph():
    assert validate(RelationGraph()) == ["no target relation"]


def test_validate_missing_concept(rng):
    g = table2_graph(rng)
    # bypass add_relation's own checks to plant a dangling reference
    g._relations["R15"] = Relation("R15", "mode", "ghost", np.ones((4, 2)), "derived")
    problems = validate(g)
    assert len(problems) == 1 and "ghost" in problems[0]


def test_validate_disconnected():
    g = RelationGraph()
    for name in "abcd":
        g.add_concept(name, [name + "0", name + "1"])
    g.add_relation("a", "b", np.ones((2, 2)), "R01")
    g.add_relation("c", "d", np.ones((2, 2)), "R02")
    problems = validate(g)
    assert len(problems) == 1 and "not connected" in problems[0]


def test_drop_removes_orphans(rng):
    g = table2_graph(rng)
    d = g.drop(["R09", "R13"])
    assert "app" not in d.concepts and "R09" not in d and len(d) == 12
    assert d.frozen and len(g) == 14


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(len(TABLE2))), st.permutations(range(10)))
def test_construction_order_independent(rel_order, concept_order):
    rng = np.random.default_rng(3)
    reference = table2_graph(rng)
    names = list(reference.concepts)
    g = RelationGraph()
    for i in concept_order:
        c = reference.concept(names[i])
        g.add_concept(c.name, c.labels)
    for i in rel_order:
        r = reference.relation(TABLE2[i][0])
        g.add_relation(r.source, r.target, r.values, r.id)
    assert g.signature() == reference.signature()
    for r in reference.relations.values():
        assert g.relation(r.id).values.shape == (
            g.concept(r.source).cardinality, g.concept(r.target).cardinality)
