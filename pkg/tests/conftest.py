import numpy as np
import pytest

from modefusion.mode_priors import MODES
from modefusion.relation_graph import RelationGraph


def planted_graph(rng, n_concepts=3, sizes=(5, 20), max_rank=4, noise=0.0):
    """Chain-plus-closing-edge graph built from known non-negative factors.

    Returns ``(graph, planted_ranks)``.  With three concepts there are three
    relations: c0-c1 (the target), c1-c2 and c0-c2.
    """
    names = [f"c{i}" for i in range(n_concepts)]
    card = {c: int(rng.integers(sizes[0], sizes[1] + 1)) for c in names}
    rank = {c: int(rng.integers(1, min(max_rank, card[c]) + 1)) for c in names}
    G = {c: rng.random((card[c], rank[c])) + 0.05 for c in names}
    graph = RelationGraph()
    for c in names:
        graph.add_concept(c, [f"{c}_{i}" for i in range(card[c])])
    pairs = [(names[i], names[i + 1]) for i in range(n_concepts - 1)]
    if n_concepts > 2:
        pairs.append((names[0], names[-1]))
    for k, (a, b) in enumerate(pairs):
        S = rng.random((rank[a], rank[b])) + 0.1
        M = G[a] @ S @ G[b].T
        if noise:
            M = M * (1 + noise * rng.uniform(-1, 1, M.shape))
        graph.add_relation(a, b, M, f"R{k + 1:02d}")
    return graph.freeze(), rank


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TABLE2 = (
    ("R01", "municipality", "mode"),
    ("R02", "municipality", "work_type"),
    ("R03", "municipality", "migration"),
    ("R04", "municipality", "population"),
    ("R05", "municipality", "waypoint"),
    ("R06", "municipality", "income"),
    ("R07", "municipality", "speed"),
    ("R08", "waypoint", "speed"),
    ("R09", "waypoint", "app"),
    ("R10", "waypoint", "infrastructure"),
    ("R11", "income", "mode"),
    ("R12", "speed", "mode"),
    ("R13", "app", "mode"),
    ("R14", "infrastructure", "mode"),
)


def table2_graph(rng, scale=1):
    """All fourteen relations over small random non-negative matrices."""
    sizes = {
        "municipality": 6 * scale, "mode": 4, "work_type": 5, "migration": 4,
        "population": 8, "waypoint": 12 * scale, "income": 5, "speed": 8,
        "app": 7, "infrastructure": 7,
    }
    graph = RelationGraph()
    for name, n in sizes.items():
        labels = list(MODES) if name == "mode" else [f"{name}-{i}" for i in range(n)]
        graph.add_concept(name, labels)
    for rid, a, b in TABLE2:
        graph.add_relation(a, b, rng.random((sizes[a], sizes[b])), rid)
    return graph.freeze()


# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
