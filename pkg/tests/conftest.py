import numpy as np
import pytest

from pathmed.graph import ReactionRecord, build_pathway_graph
from pathmed.model import Dataset
from pathmed.simulation import reference_graph as _reference_graph


def rxn(rid, subs, prods, pids=("P1",)):
    return ReactionRecord(rid, list(subs), list(prods), list(pids))


@pytest.fixture(scope="session")
def reference_graph():
    return _reference_graph()


@pytest.fixture
def figure1_graph():
    """Five metabolites, reactions M1 -> M2 -> M3 in one pathway plus M4, M5."""
    reactions = [
        rxn("r1", ["M1"], ["M2"]),
        rxn("r2", ["M2"], ["M3"]),
        rxn("r3", ["M4"], ["M5"]),
    ]
    return build_pathway_graph(reactions, ["M1", "M2", "M3", "M4", "M5"])


def random_dag(rng, K, p=0.2, max_w=3):
    A = np.triu(rng.integers(1, max_w + 1, size=(K, K)) * (rng.random((K, K)) < p), 1)
    perm = rng.permutation(K)
    return A[np.ix_(perm, perm)]


def small_problem(rng, n=60, K=8, q_extra=1):
    """Toy graph with two disjoint pathways and a dataset with real signal."""
    mets = [f"k{i}" for i in range(K)]
    half = K // 2
    reactions = []
    for i in range(half - 1):
        reactions.append(rxn(f"a{i}", [mets[i]], [mets[i + 1]], ["PA"]))
    for i in range(half, K - 1):
        reactions.append(rxn(f"b{i}", [mets[i]], [mets[i + 1]], ["PB"]))
    graph = build_pathway_graph(reactions, mets)
    x = rng.standard_normal(n)
    C = rng.standard_normal((n, q_extra))
    M = rng.standard_normal((n, K))
    M[:, 0] += 1.0 * x
    M[:, 1] += 0.3 * M[:, 0]
    M = (M - M.mean(0)) / M.std(0, ddof=1)
    y = 0.5 * x + 1.0 * M[:, 1] + 0.3 * C[:, 0] + rng.standard_normal(n)
    return Dataset.from_arrays(x, y, M, C), graph


# acceptance-criterion results: criterion number -> list of (label, passed, detail)
ACCEPTANCE: dict = {}


def record_acceptance(criterion: int, label: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE.setdefault(criterion, []).append((label, bool(passed), detail))
    print(f"criterion {criterion} [{label}]: {'PASS' if passed else 'FAIL'} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        ok = all(p for _, p, _ in parts)
        tr.write_line(f"CRITERION {crit}: {'PASS' if ok else 'FAIL'}")
        for label, p, detail in parts:
            tr.write_line(f"    {'PASS' if p else 'FAIL'}  {label}  {detail}".rstrip())
