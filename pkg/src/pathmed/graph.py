"""Reaction graphs for metabolic pathways.

Reactions are turned into a weighted directed graph over metabolites, cycles
are broken so the graph becomes a DAG, and the resulting adjacency is exposed
together with an undirected co-reaction graph used by the Ising priors.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import InputError, InvariantError

logger = logging.getLogger(__name__)

__all__ = [
    "ReactionRecord",
    "PathwayGraph",
    "PathwaySubgraph",
    "build_directed_graph",
    "remove_cycles",
    "nilpotency_index",
    "descendants",
    "descendant_matrix",
    "build_pathway_graph",
    "pathway_subgraph",
    "read_reactions",
    "write_reactions",
    "write_adjacency_triplets",
]


@dataclass(frozen=True)
class ReactionRecord:
    """One biochemical reaction: substrates are converted into products."""

    reaction_id: str
    substrates: tuple[str, ...]
    products: tuple[str, ...]
    pathway_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "substrates", tuple(str(s) for s in self.substrates))
        object.__setattr__(self, "products", tuple(str(p) for p in self.products))
        object.__setattr__(self, "pathway_ids", tuple(str(p) for p in self.pathway_ids))
        if not self.substrates or not self.products:
            raise InputError(
                f"reaction {self.reaction_id!r} needs at least one substrate and one product"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "ReactionRecord":
        missing = {"reaction_id", "substrates", "products", "pathway_ids"} - set(d)
        if missing:
            raise InputError(f"reaction record missing fields: {sorted(missing)}")
        return cls(str(d["reaction_id"]), d["substrates"], d["products"], d["pathway_ids"])

    def to_dict(self) -> dict:
        return {
            "reaction_id": self.reaction_id,
            "substrates": list(self.substrates),
            "products": list(self.products),
            "pathway_ids": list(self.pathway_ids),
        }


def _sorted_reactions(reactions: Iterable[ReactionRecord]) -> list[ReactionRecord]:
    return sorted(reactions, key=lambda r: r.reaction_id)


def build_directed_graph(reactions: Sequence[ReactionRecord], metabolites: Sequence[str]) -> np.ndarray:
    """Count substrate -> product pairs over all reactions.

    Entry ``(i, j)`` is the number of reactions in which metabolite ``i`` is a
    substrate and metabolite ``j`` a product. Pairs where a metabolite is both
    substrate and product of the same reaction are dropped with a warning.
    """
    index = {m: i for i, m in enumerate(metabolites)}
    K = len(metabolites)
    counts = np.zeros((K, K), dtype=np.int64)
    for rxn in _sorted_reactions(reactions):
        for m in (*rxn.substrates, *rxn.products):
            if m not in index:
                raise InputError(f"unknown metabolite id {m!r} in reaction {rxn.reaction_id!r}")
        for s in sorted(set(rxn.substrates)):
            for p in sorted(set(rxn.products)):
                if s == p:
                    logger.warning("dropping self-loop %s -> %s in reaction %s", s, p, rxn.reaction_id)
                    continue
                counts[index[s], index[p]] += 1
    return counts


def _find_cycle(A: np.ndarray) -> list[int] | None:
    """Return the node sequence of the first cycle met by an ordered DFS, or None."""
    K = A.shape[0]
    succ = [np.flatnonzero(A[i]).tolist() for i in range(K)]
    state = np.zeros(K, dtype=np.int8)  # 0 new, 1 on stack, 2 done
    for root in range(K):
        if state[root]:
            continue
        stack = [root]
        iters = [iter(succ[root])]
        state[root] = 1
        while stack:
            nxt = next(iters[-1], None)
            if nxt is None:
                state[stack.pop()] = 2
                iters.pop()
                continue
            if state[nxt] == 1:
                return stack[stack.index(nxt):]
            if state[nxt] == 0:
                state[nxt] = 1
                stack.append(nxt)
                iters.append(iter(succ[nxt]))
    return None


def remove_cycles(counts: np.ndarray) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """Break every directed cycle by deleting edges.

    Repeatedly runs a DFS over nodes and successors in index order; on the first
    back edge the cycle's lightest edge is removed (ties go to the
    lexicographically smallest ``(source, target)``). Returns the acyclic matrix
    and the removed edges as ``(source, target, weight)`` in removal order.
    """
    A = np.array(counts, dtype=np.int64, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError("adjacency must be square")
    if (A < 0).any():
        raise InputError("adjacency must be non-negative")
    if np.diag(A).any():
        raise InputError("adjacency must have a zero diagonal")
    removed = []
    while True:
        cycle = _find_cycle(A)
        if cycle is None:
            break
        edges = [(cycle[i], cycle[(i + 1) % len(cycle)]) for i in range(len(cycle))]
        s, t = min(edges, key=lambda e: (A[e], e))
        removed.append((s, t, int(A[s, t])))
        A[s, t] = 0
    if removed:
        logger.info("removed %d edge(s) to make the reaction graph acyclic", len(removed))
    return A, removed


def nilpotency_index(A: np.ndarray) -> int:
    """Smallest ``D >= 1`` with ``A**D == 0`` (one more than the longest path)."""
    P = np.asarray(A) != 0
    K = P.shape[0]
    if not P.any():
        return 1
    Pf = P.astype(float)  # 0/1 products stay exact in floating point
    power = Pf
    for d in range(2, K + 2):
        power = ((power @ Pf) > 0).astype(float)
        if not power.any():
            return d
    raise InvariantError("adjacency is not nilpotent; the graph has a cycle")


def descendant_matrix(A: np.ndarray) -> np.ndarray:
    """Boolean transitive closure: ``R[k, j]`` is True iff j is reachable from k."""
    P = np.asarray(A) != 0
    K = P.shape[0]
    R = np.zeros((K, K), dtype=bool)
    for k in range(K):
        R[k] = _reach(P, k)
    return R


def _reach(P: np.ndarray, k: int) -> np.ndarray:
    seen = np.zeros(P.shape[0], dtype=bool)
    queue = deque(np.flatnonzero(P[k]).tolist())
    while queue:
        j = queue.popleft()
        if seen[j]:
            continue
        seen[j] = True
        queue.extend(np.flatnonzero(P[j] & ~seen).tolist())
    return seen


def descendants(A: np.ndarray, k: int) -> set[int]:
    """Nodes reachable from ``k`` along directed edges (``k`` itself excluded)."""
    A = np.asarray(A)
    if not 0 <= k < A.shape[0]:
        raise InputError(f"node index {k} out of range for {A.shape[0]} nodes")
    return set(np.flatnonzero(_reach(A != 0, k)).tolist())


@dataclass(frozen=True, eq=False)
class PathwaySubgraph:
    pathway_id: str
    indices: np.ndarray  # global metabolite indices, ascending
    A: np.ndarray
    D: int
    closure: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.indices)

    def to_local(self, k: int) -> int:
        pos = int(np.searchsorted(self.indices, k))
        if pos >= len(self.indices) or self.indices[pos] != k:
            raise InputError(f"metabolite {k} is not in pathway {self.pathway_id!r}")
        return pos


@dataclass(frozen=True, eq=False)
class PathwayGraph:
    """DAG over metabolites plus pathway membership.

    Attributes
    ----------
    metabolites : tuple of str
        Canonical metabolite order; row/column ``k`` of every matrix.
    A : ndarray of int, shape (K, K)
        Weighted adjacency of the DAG (reaction counts after cycle removal).
    A_star : ndarray of int, shape (K, K)
        Symmetric 0/1 adjacency of the undirected Ising graph.
    pathway_ids : tuple of str
        Canonical pathway order.
    membership : dict
        Pathway id -> ascending array of metabolite indices.
    """

    metabolites: tuple[str, ...]
    A: np.ndarray
    A_star: np.ndarray
    pathway_ids: tuple[str, ...]
    membership: dict
    D: int
    raw_counts: np.ndarray = field(repr=False)
    removed_edges: tuple = ()

    @property
    def K(self) -> int:
        return len(self.metabolites)

    @property
    def L(self) -> int:
        return len(self.pathway_ids)

    def index_of(self, metabolite_id: str) -> int:
        try:
            return self.metabolites.index(metabolite_id)
        except ValueError:
            raise InputError(f"unknown metabolite id {metabolite_id!r}") from None

    def membership_matrix(self) -> np.ndarray:
        """Boolean (K, L) matrix; column l flags pathway l's metabolites."""
        out = np.zeros((self.K, self.L), dtype=bool)
        for l, pid in enumerate(self.pathway_ids):
            out[self.membership[pid], l] = True
        return out

    def edges(self) -> np.ndarray:
        """``(E, 2)`` array of DAG edges in row-major order."""
        return np.argwhere(self.A != 0)

    def star_edges(self) -> np.ndarray:
        """``(E*, 2)`` array of undirected edges with ``i < j``."""
        return np.argwhere(np.triu(self.A_star, 1) != 0)

    def parents(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.A[:, k])

    def subgraphs(self) -> list[PathwaySubgraph]:
        cached = self.__dict__.get("_subgraphs")
        if cached is None:
            cached = [pathway_subgraph(self, pid) for pid in self.pathway_ids]
            object.__setattr__(self, "_subgraphs", cached)
        return cached


def build_pathway_graph(
    reactions: Sequence[ReactionRecord],
    metabolites: Sequence[str] | None = None,
    star_from: str = "raw",
) -> PathwayGraph:
    """Build the full :class:`PathwayGraph` from reaction records.

    Parameters
    ----------
    reactions : sequence of ReactionRecord
    metabolites : sequence of str, optional
        Canonical metabolite order. Defaults to the sorted set of ids that
        appear in ``reactions``.
    star_from : {"raw", "dag"}
        Whether the undirected Ising graph links metabolites that co-occur in
        any reaction ("raw", before cycle removal) or only those joined by a
        surviving DAG edge ("dag").
    """
    reactions = _sorted_reactions(reactions)
    if metabolites is None:
        metabolites = sorted({m for r in reactions for m in (*r.substrates, *r.products)})
    metabolites = tuple(str(m) for m in metabolites)
    if len(set(metabolites)) != len(metabolites):
        raise InputError("duplicate metabolite ids")
    raw = build_directed_graph(reactions, metabolites)
    A, removed = remove_cycles(raw)
    if star_from == "raw":
        base = raw
    elif star_from == "dag":
        base = A
    else:
        raise InputError(f"star_from must be 'raw' or 'dag', got {star_from!r}")
    A_star = ((base + base.T) > 0).astype(np.int64)
    np.fill_diagonal(A_star, 0)

    index = {m: i for i, m in enumerate(metabolites)}
    members: dict[str, set] = {}
    for rxn in reactions:
        for pid in rxn.pathway_ids:
            members.setdefault(pid, set()).update(index[m] for m in (*rxn.substrates, *rxn.products))
    pathway_ids = tuple(sorted(members))
    membership = {pid: np.array(sorted(members[pid]), dtype=np.int64) for pid in pathway_ids}
    return PathwayGraph(
        metabolites=metabolites,
        A=A,
        A_star=A_star,
        pathway_ids=pathway_ids,
        membership=membership,
        D=nilpotency_index(A),
        raw_counts=raw,
        removed_edges=tuple(removed),
    )


def pathway_subgraph(graph: PathwayGraph, pathway_id: str) -> PathwaySubgraph:
    if pathway_id not in graph.membership:
        raise InputError(f"unknown pathway id {pathway_id!r}")
    idx = graph.membership[pathway_id]
    A_l = graph.A[np.ix_(idx, idx)]
    return PathwaySubgraph(
        pathway_id=pathway_id,
        indices=idx,
        A=A_l,
        D=nilpotency_index(A_l),
        closure=descendant_matrix(A_l),
    )


def read_reactions(path) -> list[ReactionRecord]:
    """Read newline-delimited JSON reaction records."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(ReactionRecord.from_dict(rec))
    return out


def write_reactions(path, reactions: Iterable[ReactionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rxn in reactions:
            fh.write(json.dumps(rxn.to_dict(), separators=(",", ":")) + "\n")


def write_adjacency_triplets(path, A: np.ndarray) -> None:
    """Write the nonzero entries of ``A`` as ``row,col,weight`` CSV."""
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "weight"])
        for i, j in np.argwhere(np.asarray(A) != 0):
            w.writerow([int(i), int(j), int(A[i, j])])
