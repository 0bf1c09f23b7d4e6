"""Ising prior utilities: log density, Swendsen-Wang cluster moves, Gibbs sweeps.

The prior on a binary vector ``z`` over an undirected edge list is

    log p(z) = lo * sum_k z_k + sum_{edges (j,k)} rho_s * 1[z_j = z_k = s] + const

where ``lo`` is the per-site log-odds of state 1 when all couplings vanish.
Each undirected edge is counted once.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "ising_log_prior",
    "edge_state_counts",
    "sw_sweep",
    "gibbs_sweep",
    "neighbor_lists",
]


def edge_state_counts(z, edges) -> tuple[int, int]:
    """Number of edges with both endpoints in state 0 and in state 1."""
    if len(edges) == 0:
        return 0, 0
    a = z[edges[:, 0]]
    b = z[edges[:, 1]]
    both1 = int(np.count_nonzero(a & b))
    both0 = int(np.count_nonzero((a == 0) & (b == 0)))
    return both0, both1


def ising_log_prior(z, edges, lo: float, rho) -> float:
    """Unnormalized Ising log density."""
    z = np.asarray(z, dtype=np.int8)
    c0, c1 = edge_state_counts(z, edges)
    return lo * int(z.sum()) + rho[0] * c0 + rho[1] * c1


def neighbor_lists(K: int, edges) -> list[list[int]]:
    nbrs = [[] for _ in range(K)]
    for i, j in np.asarray(edges, dtype=np.int64).tolist():
        nbrs[i].append(j)
        nbrs[j].append(i)
    return nbrs


def sw_sweep(z, edges, rho, lo, rng, unary=None, flip_loglik=None, commit=None) -> int:
    """One Swendsen-Wang update of ``z`` in place; returns the number of flipped clusters.

    Bonds are drawn on every edge whose endpoints share a state ``s`` with
    probability ``1 - exp(-rho_s)``; a bonded edge also carries a uniform
    auxiliary ``u`` on ``(1, exp(rho_s))``. A cluster may flip only when every
    bond inside it remains admissible under the other state's coupling
    (``u <= exp(rho_{1-s})``); otherwise the proposal is rejected. Admissible
    flips are accepted by Metropolis-Hastings with the likelihood ratio times
    the field term ``exp(lo * (n1_new - n1_old))``.

    The likelihood enters either as ``unary`` (length-K log-likelihood gain of
    moving each node from 0 to 1; clusters are then independent) or through
    ``flip_loglik(nodes, s) -> (delta_loglik, token)`` evaluated sequentially,
    with ``commit(token)`` called after each accepted flip.
    """
    K = len(z)
    rho = np.asarray(rho, dtype=float)
    E = len(edges)
    if E:
        i = edges[:, 0]
        j = edges[:, 1]
        zi = z[i]
        same = zi == z[j]
        rho_e = rho[zi]
        bond = same & (rng.random(E) < -np.expm1(-rho_e))
        log_u = np.log1p(rng.random(E) * np.expm1(rho_e))
        bad = bond & (log_u > rho[1 - zi])
        bi, bj = i[bond], j[bond]
        graph = coo_matrix((np.ones(len(bi)), (bi, bj)), shape=(K, K))
        ncomp, comp = connected_components(graph, directed=False)
        blocked = np.zeros(ncomp, dtype=bool)
        blocked[comp[i[bad]]] = True
    else:
        ncomp, comp = K, np.arange(K)
        blocked = np.zeros(K, dtype=bool)
    # canonical cluster order: by smallest member index
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first, kind="stable")
    log_u_acc = np.log(rng.random(ncomp))
    state = z[first]  # cluster state, indexed by component label
    size = np.bincount(comp, minlength=ncomp)
    sign = np.where(state == 0, 1.0, -1.0)  # +1 for a 0 -> 1 move
    field = sign * lo * size

    if unary is not None:
        gain = np.bincount(comp, weights=unary, minlength=ncomp) * sign
        accept = ~blocked & (log_u_acc < gain + field)
        z[accept[comp]] ^= 1
        return int(accept.sum())

    members = np.argsort(comp, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(size)])
    flips = 0
    for c in order:
        if blocked[c]:
            continue
        nodes = members[bounds[c]:bounds[c + 1]]
        s = int(state[c])
        dll, token = flip_loglik(nodes, s)
        if log_u_acc[c] < dll + field[c]:
            z[nodes] = 1 - s
            if commit is not None:
                commit(token)
            flips += 1
    return flips


def gibbs_sweep(z, nbrs, lo: float, rho, rng) -> np.ndarray:
    """One sequential single-site Gibbs sweep in index order; returns a new vector."""
    w = [int(v) for v in z]
    K = len(w)
    n1 = [sum(w[j] for j in nb) for nb in nbrs]
    us = rng.random(K).tolist()
    r0, r1 = float(rho[0]), float(rho[1])
    base = float(lo)
    for k in range(K):
        a = base + r1 * n1[k] - r0 * (len(nbrs[k]) - n1[k])
        if a >= 0:
            p1 = 1.0 / (1.0 + math.exp(-a))
        else:
            e = math.exp(a)
            p1 = e / (1.0 + e)
        new = 1 if us[k] < p1 else 0
        if new != w[k]:
            w[k] = new
            d = 1 if new else -1
            for j in nbrs[k]:
                n1[j] += d
    return np.array(w, dtype=np.int8)
