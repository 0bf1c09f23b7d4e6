"""Core model types: data, hyperparameters, parameter state and latent scores.

The pathway indicator ``delta_l`` is a deterministic function of the exposure
and outcome indicators ``psi`` and ``phi``. For a mediating pathway the latent
score is the first PLS component of its selected metabolites.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .exceptions import DegenerateScoreError, InputError, InvariantError
from .graph import PathwayGraph, PathwaySubgraph

logger = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "Hyperparameters",
    "ModelState",
    "LatentScores",
    "CollapsedScores",
    "PathwayScorer",
    "compute_delta",
    "select_score_metabolites",
    "pls_weights",
    "compute_scores",
    "collapse_score_groups",
    "standardize",
]

PLS_TOL = 1e-12


def _as_float_vector(a, name, n=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and a.shape[1] == 1:
        a = a[:, 0]
    if a.ndim != 1:
        raise InputError(f"{name} must be one-dimensional")
    if n is not None and a.shape[0] != n:
        raise InputError(f"{name} has {a.shape[0]} rows, expected {n}")
    if not np.isfinite(a).all():
        raise InputError(f"{name} contains missing or non-finite values")
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observed data for ``n`` subjects.

    ``Z`` always carries the intercept as its first column.
    """

    X: np.ndarray
    Z: np.ndarray
    M: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = _as_float_vector(self.X, "exposure")
        n = X.shape[0]
        Y = _as_float_vector(self.Y, "outcome", n)
        M = np.asarray(self.M, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if M.ndim != 2 or M.shape[0] != n:
            raise InputError(f"metabolite matrix must be (n, K) with n={n}")
        if Z.ndim != 2 or Z.shape[0] != n or Z.shape[1] < 1:
            raise InputError(f"covariate matrix must be (n, 1+p) with n={n}")
        if not (np.isfinite(M).all() and np.isfinite(Z).all()):
            raise InputError("metabolites or covariates contain missing or non-finite values")
        if n and not np.all(Z[:, 0] == 1.0):
            raise InputError("first covariate column must be the intercept (all ones)")
        for name, arr in (("X", X), ("Z", Z), ("M", M), ("Y", Y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, exposure, outcome, metabolites, covariates=None) -> "Dataset":
        """Build a dataset, prepending the intercept column to ``covariates``."""
        X = _as_float_vector(exposure, "exposure")
        n = X.shape[0]
        ones = np.ones((n, 1))
        if covariates is None:
            Z = ones
        else:
            C = np.asarray(covariates, dtype=float)
            if C.ndim == 1:
                C = C[:, None]
            Z = np.hstack([ones, C])
        return cls(X=X, Z=Z, M=metabolites, Y=outcome)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.M.shape[1]

    @property
    def q(self) -> int:
        """Number of covariate columns including the intercept."""
        return self.Z.shape[1]

    def check_graph(self, graph: PathwayGraph) -> None:
        if graph.K != self.K:
            raise InputError(f"dataset has {self.K} metabolites but the graph has {graph.K}")


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings.

    ``eta_psi_1`` / ``eta_phi_1`` are the Ising sparsity log-odds for state 1;
    state 0 uses the negated value. ``None`` means elicit them by marginal
    screening. ``ising_field`` selects how they enter the prior: ``"log-odds"``
    makes ``eta_1`` the per-site prior log-odds of selection when couplings
    vanish; ``"literal"`` adds ``eta_{z_k}`` per site, doubling those odds.
    ``dmh_sweeps`` is the number of Gibbs sweeps used to simulate the
    double Metropolis-Hastings auxiliary configuration.
    """

    h: float = 10.0
    a0: float = 0.01
    b0: float = 0.01
    eta_psi_1: float | None = None
    eta_phi_1: float | None = None
    xi: float = 0.0625
    prior_var_reg: float = 1.0e4
    seed: int = 0
    ising_field: str = "log-odds"
    dmh_sweeps: int = 1

    def __post_init__(self):
        if not (isinstance(self.dmh_sweeps, (int, np.integer)) and self.dmh_sweeps >= 1):
            raise InputError(f"dmh_sweeps must be a positive integer, got {self.dmh_sweeps!r}")
        if self.ising_field not in ("log-odds", "literal"):
            raise InputError(f"ising_field must be 'log-odds' or 'literal', got {self.ising_field!r}")
        for name in ("h", "a0", "b0", "xi", "prior_var_reg"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise InputError(f"hyperparameter {name} must be positive, got {v!r}")
        for name in ("eta_psi_1", "eta_phi_1"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise InputError(f"hyperparameter {name} must be finite")

    @property
    def eta_psi_0(self):
        return None if self.eta_psi_1 is None else -self.eta_psi_1

    @property
    def eta_phi_0(self):
        return None if self.eta_phi_1 is None else -self.eta_phi_1

    def site_log_odds(self, which: str) -> float:
        """Per-site prior log-odds of state 1 at zero coupling."""
        eta = self.eta_psi_1 if which == "psi" else self.eta_phi_1
        if eta is None:
            raise InputError("Ising log-odds are not resolved")
        return eta if self.ising_field == "log-odds" else 2.0 * eta

    def replace(self, **kw) -> "Hyperparameters":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return Hyperparameters(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModelState:
    """All sampled parameters at one iteration.

    ``rho_psi`` and ``rho_phi`` hold the Ising interaction strengths as
    ``[rho_0, rho_1]``.
    """

    alpha: np.ndarray
    alpha_Z: np.ndarray
    gamma_tilde: np.ndarray
    sigma_k2: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    beta: float
    beta_Z: np.ndarray
    theta: np.ndarray
    sigma2: float
    rho_psi: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    rho_phi: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))

    @classmethod
    def zeros(cls, K: int, q: int, L: int) -> "ModelState":
        return cls(
            alpha=np.zeros(K),
            alpha_Z=np.zeros((K, q)),
            gamma_tilde=np.zeros((K, K)),
            sigma_k2=np.ones(K),
            psi=np.zeros(K, dtype=np.int8),
            phi=np.zeros(K, dtype=np.int8),
            beta=0.0,
            beta_Z=np.zeros(q),
            theta=np.zeros(L),
            sigma2=1.0,
        )

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def check_invariants(self, graph: PathwayGraph, delta: np.ndarray | None = None) -> None:
        """Raise :class:`InvariantError` if the state is internally inconsistent."""
        if np.any((self.alpha != 0) & (self.psi == 0)):
            raise InvariantError("alpha must be zero where psi = 0")
        if np.any((self.alpha == 0) & (self.psi == 1)):
            raise InvariantError("alpha must be nonzero where psi = 1")
        if np.any((self.gamma_tilde != 0) & (graph.A == 0)):
            raise InvariantError("gamma_tilde has entries outside the DAG")
        if delta is None:
            delta = np.array(
                [compute_delta(self.psi[sg.indices], self.phi[sg.indices], sg.A) for sg in graph.subgraphs()]
            )
        if np.any((self.theta != 0) & (np.asarray(delta) == 0)):
            raise InvariantError("theta must be zero where delta = 0")
        if not (np.all(self.sigma_k2 > 0) and self.sigma2 > 0):
            raise InvariantError("variance parameters must be positive")
        for r in (*self.rho_psi, *self.rho_phi):
            if not 0 < r < 1:
                raise InvariantError(f"rho parameter {r} outside (0, 1)")


def compute_delta(psi_l, phi_l, A_l) -> int:
    """Pathway mediation indicator: 1 iff ``psi'phi + psi' A phi > 0``."""
    psi_l = np.asarray(psi_l, dtype=np.int64)
    phi_l = np.asarray(phi_l, dtype=np.int64)
    A_l = np.asarray(A_l, dtype=np.int64)
    k = psi_l.shape[0]
    if phi_l.shape != (k,) or A_l.shape != (k, k):
        raise InputError(f"dimension mismatch: psi {psi_l.shape}, phi {phi_l.shape}, A {A_l.shape}")
    return int(psi_l @ phi_l + psi_l @ A_l @ phi_l > 0)


def _score_mask(psi_l, phi_l, closure) -> np.ndarray:
    psi_l = np.asarray(psi_l, dtype=bool)
    phi_l = np.asarray(phi_l, dtype=bool)
    type_a = psi_l & phi_l
    type_b = psi_l & ~phi_l & (closure & phi_l).any(axis=1)
    type_c = phi_l & closure[type_b].any(axis=0)
    return type_a | type_b | type_c


def select_score_metabolites(psi_l, phi_l, subgraph: PathwaySubgraph) -> tuple[int, ...]:
    """Global indices of the metabolites entering pathway ``l``'s score.

    Type (a): psi = phi = 1. Type (b): psi = 1, phi = 0 with some descendant
    having phi = 1. Type (c): phi = 1 descendants of a type (b) metabolite.
    """
    if compute_delta(psi_l, phi_l, subgraph.A) != 1:
        raise InputError(f"pathway {subgraph.pathway_id!r} is not mediating (delta = 0)")
    mask = _score_mask(psi_l, phi_l, subgraph.closure)
    return tuple(int(i) for i in subgraph.indices[mask])


def pls_weights(M_sub, Y) -> np.ndarray:
    """First PLS weight vector of ``M_sub`` against a single response.

    ``M'YY'M`` has rank one, so its top eigenvector is ``M'Y`` normalized.
    The sign makes the entry of largest magnitude positive.
    """
    M_sub = np.asarray(M_sub, dtype=float)
    if M_sub.ndim != 2 or M_sub.shape[1] < 1:
        raise InputError("M_sub must be a non-empty (n, k) matrix")
    v = M_sub.T @ np.asarray(Y, dtype=float)
    norm = np.linalg.norm(v)
    if not norm >= PLS_TOL:
        raise DegenerateScoreError(f"score weights undefined: |M'Y| = {norm:.3g}")
    w = v / norm
    if w[np.argmax(np.abs(w))] < 0:
        w = -w
    return w


@dataclass(frozen=True, eq=False)
class LatentScores:
    delta: np.ndarray  # (L,) int8
    score_sets: tuple  # per pathway, tuple of global indices (empty if delta=0)
    weights: tuple  # per pathway, ndarray aligned with score_sets
    S: np.ndarray  # (n, L)
    groups: tuple  # tuples of pathway indices sharing one score set
    n_degenerate: int = 0

    def weight_matrix(self, K: int) -> np.ndarray:
        """Dense ``(K, L)`` weight matrix with zeros outside each ``O_l``."""
        W = np.zeros((K, len(self.delta)))
        for l, (O, w) in enumerate(zip(self.score_sets, self.weights)):
            if O:
                W[list(O), l] = w
        return W


@dataclass(frozen=True, eq=False)
class CollapsedScores:
    S_star: np.ndarray  # (n, L*)
    group_of: np.ndarray  # (L,) group column, -1 when delta=0
    group_sizes: np.ndarray  # (L*,)

    def expand(self, theta_star) -> np.ndarray:
        """Per-pathway coefficients: group coefficient divided by group size."""
        theta_star = np.asarray(theta_star, dtype=float)
        out = np.zeros(len(self.group_of))
        sel = self.group_of >= 0
        g = self.group_of[sel]
        out[sel] = theta_star[g] / self.group_sizes[g]
        return out


class PathwayScorer:
    """Computes delta, score sets and scores for every pathway.

    Weights and score columns are memoized per score set, since they depend
    only on ``(O_l, M, Y)``.
    """

    def __init__(self, M, Y, graph: PathwayGraph, max_cache: int = 50000):
        self.M = np.asarray(M, dtype=float)
        self.Y = np.asarray(Y, dtype=float)
        self.graph = graph
        self.subgraphs = graph.subgraphs()
        self._cache: dict = {}
        self._max_cache = max_cache
        self.n_degenerate = 0
        K = graph.K
        self.pathways_of = [[] for _ in range(K)]
        for l, sg in enumerate(self.subgraphs):
            for k in sg.indices:
                self.pathways_of[int(k)].append(l)

    def pathway_state(self, l: int, psi, phi) -> tuple[int, tuple]:
        """Return ``(delta_l, O_l)``; ``O_l`` is empty when delta is 0."""
        sg = self.subgraphs[l]
        ps = psi[sg.indices]
        ph = phi[sg.indices]
        if not ps.any() or not ph.any():
            return 0, ()
        if compute_delta(ps, ph, sg.A) == 0:
            return 0, ()
        mask = _score_mask(ps, ph, sg.closure)
        return 1, tuple(int(i) for i in sg.indices[mask])

    def score(self, O: tuple):
        """Return ``(w, s)`` for score set ``O`` or ``None`` if degenerate."""
        hit = self._cache.get(O)
        if hit is None:
            if len(self._cache) >= self._max_cache:
                self._cache.clear()
            M_sub = self.M[:, list(O)]
            try:
                w = pls_weights(M_sub, self.Y)
                hit = (w, M_sub @ w)
            except DegenerateScoreError:
                hit = (None, None)
            self._cache[O] = hit
        return None if hit[0] is None else hit

    def scores(self, psi, phi, states=None) -> LatentScores:
        L = len(self.subgraphs)
        n = self.M.shape[0]
        if states is None:
            states = [self.pathway_state(l, psi, phi) for l in range(L)]
        delta = np.zeros(L, dtype=np.int8)
        sets, weights = [], []
        S = np.zeros((n, L))
        n_deg = 0
        for l, (d, O) in enumerate(states):
            if d:
                res = self.score(O)
                if res is None:
                    n_deg += 1
                    logger.debug("degenerate score for pathway %s", self.graph.pathway_ids[l])
                    d, O = 0, ()
            if d:
                w, s = res
                delta[l] = 1
                S[:, l] = s
                sets.append(O)
                weights.append(w)
            else:
                sets.append(())
                weights.append(np.zeros(0))
        self.n_degenerate += n_deg
        groups: dict = {}
        for l in range(L):
            if delta[l]:
                groups.setdefault(sets[l], []).append(l)
        grp = tuple(sorted((tuple(v) for v in groups.values()), key=lambda g: g[0]))
        return LatentScores(delta, tuple(sets), tuple(weights), S, grp, n_deg)


def compute_scores(dataset: Dataset, graph: PathwayGraph, psi, phi) -> LatentScores:
    """Delta, score sets, PLS weights and the score matrix for all pathways.

    A pathway whose score is degenerate (``M'Y`` numerically zero) is treated
    as non-mediating and counted in ``n_degenerate``.
    """
    dataset.check_graph(graph)
    psi = np.asarray(psi, dtype=np.int8)
    phi = np.asarray(phi, dtype=np.int8)
    if psi.shape != (graph.K,) or phi.shape != (graph.K,):
        raise InputError("psi and phi must have length K")
    return PathwayScorer(dataset.M, dataset.Y, graph).scores(psi, phi)


def collapse_score_groups(scores: LatentScores) -> CollapsedScores:
    """One design column per group of pathways sharing a score set."""
    n = scores.S.shape[0]
    L = len(scores.delta)
    group_of = np.full(L, -1, dtype=np.int64)
    S_star = np.zeros((n, len(scores.groups)))
    sizes = np.zeros(len(scores.groups), dtype=np.int64)
    for g, members in enumerate(scores.groups):
        group_of[list(members)] = g
        sizes[g] = len(members)
        S_star[:, g] = scores.S[:, members[0]]
    return CollapsedScores(S_star, group_of, sizes)


def standardize(M, ddof: int = 1):
    """Center and scale columns to mean 0, variance 1.

    Returns the standardized matrix with the column means and standard
    deviations. Constant columns raise :class:`InputError`.
    """
    M = np.asarray(M, dtype=float)
    mean = M.mean(axis=0)
    sd = M.std(axis=0, ddof=ddof)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        raise InputError(f"cannot standardize constant column(s) {bad.tolist()[:10]}")
    return (M - mean) / sd, mean, sd
