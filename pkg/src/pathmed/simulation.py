"""Simulation study: reference graph, scenarios, data generation, truths and metrics.

The bundled reference graph has 265 metabolites in 60 pathways. The first 13
metabolites are the active mediators and span pathways ``P01``-``P04``; those
four pathways are closed (their members belong to no other pathway).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy.linalg import solve_triangular
from threadpoolctl import threadpool_limits

from .effects import summarize
from .exceptions import InputError, InvariantError, PathmedError
from .graph import (
    PathwayGraph,
    ReactionRecord,
    build_pathway_graph,
    nilpotency_index,
    read_reactions,
    remove_cycles,
)
from .model import Dataset, compute_delta, standardize
from .sampler import ChainConfig, run_chain

logger = logging.getLogger(__name__)

__all__ = [
    "ScenarioSpec",
    "SCENARIOS",
    "N_ACTIVE",
    "build_reference_reactions",
    "reference_graph",
    "SimReplicate",
    "generate_replicate",
    "misannotate",
    "TrueEffects",
    "true_effects",
    "analytic_effects",
    "oracle_fit",
    "StudyMetrics",
    "run_study",
    "study_table_rows",
    "study_rate_rows",
]

N_ACTIVE = 13
REFERENCE_FILE = "reference_pathways.jsonl"
REFERENCE_SEED = 20240611
EFFECT_NAMES = ("Pathway A", "Pathway B", "Pathway C", "Pathway D", "Overall", "Total")
ACTIVE_PATHWAYS = ("P01", "P02", "P03", "P04")


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    alpha_true: tuple
    theta_star_true: tuple
    alpha0: float = 1.0
    gamma_value: float = 0.2
    beta0: float = 5.0
    beta: float = -1.0
    beta1: float = 0.5
    n: int = 100
    n_active: int = N_ACTIVE

    def __post_init__(self):
        if len(self.alpha_true) != self.n_active or len(self.theta_star_true) != self.n_active:
            raise InputError("scenario coefficient vectors must have one entry per active metabolite")

    def zeroed(self) -> "ScenarioSpec":
        """Same scenario without any mediation."""
        z = (0.0,) * self.n_active
        return ScenarioSpec(self.id + "-null", z, z, self.alpha0, self.gamma_value, self.beta0, self.beta, self.beta1, self.n, self.n_active)


def _signs(neg, value, n=N_ACTIVE):
    return tuple(-value if k + 1 in neg else value for k in range(n))


SCENARIOS = {
    "S1": ScenarioSpec("S1", (-0.5,) * 13, (-0.3,) * 13),
    "S2": ScenarioSpec("S2", (-0.7,) * 13, (-0.7,) * 13),
    "S3": ScenarioSpec("S3", _signs({5, 8, 9}, 0.7), _signs({7, 8, 13}, 0.7)),
    "S4": ScenarioSpec(
        "S4",
        (-2.0, 1.5, 2.0, -0.7, 0.7, 1.5, 1.5, 1.5, 2.0, 2.0, -1.5, -0.7, -2.0),
        (2.0, 1.5, 2.0, -0.7, -0.7, 1.5, -1.5, 1.5, 2.0, 2.0, 1.5, 0.7, 2.0),
    ),
}

# Reference graph layout (0-based active indices).
_ACTIVE_MEMBERS = {"P01": (7, 12), "P02": (4, 6, 11), "P03": (1, 3, 8, 10), "P04": (0, 2, 5, 9)}
_ACTIVE_EDGES = ((0, 2, 1), (0, 9, 1), (1, 8, 1), (4, 11, 2), (6, 11, 1))
_SOURCE_PARENTS = (3, 3, 4, 3, 4, 3, 3, 0, 0, 3, 4, 1, 1)
_INACTIVE_CHILDREN = (2, 5, 7, 8, 11, 12)
_K_REF = 265
_L_REF = 60


def _mid(i: int) -> str:
    return f"m{i + 1:03d}"


def build_reference_reactions(seed: int = REFERENCE_SEED) -> list[ReactionRecord]:
    """Deterministically construct the bundled reference reaction list."""
    rng = np.random.default_rng(seed)
    reactions = []

    def add(subs, prods, pids):
        reactions.append(ReactionRecord(f"R{len(reactions) + 1:04d}", [_mid(s) for s in subs], [_mid(p) for p in prods], list(pids)))

    pathway_of = {k: pid for pid, ks in _ACTIVE_MEMBERS.items() for k in ks}
    for s, t, w in _ACTIVE_EDGES:
        for _ in range(w):
            add([s], [t], [pathway_of[s]])
    nxt = N_ACTIVE
    for k, npar in enumerate(_SOURCE_PARENTS):
        for _ in range(npar):
            add([nxt], [k], [pathway_of[k]])
            nxt += 1
    for k in _INACTIVE_CHILDREN:
        add([k], [nxt], [pathway_of[k]])
        nxt += 1

    free = rng.permutation(np.arange(nxt, _K_REF))
    n_free_pw = _L_REF - len(_ACTIVE_MEMBERS)
    blocks = np.array_split(free, n_free_pw)
    cyc = set(rng.choice(n_free_pw, size=8, replace=False).tolist())
    for b, block in enumerate(blocks):
        pid = f"P{b + len(_ACTIVE_MEMBERS) + 1:02d}"
        others = np.setdiff1d(free, block)
        borrow = rng.choice(others, size=int(rng.integers(0, 3)), replace=False)
        members = rng.permutation(np.concatenate([block, borrow])).tolist()
        for i in range(1, len(members)):
            parent = members[int(rng.integers(0, i))]
            if rng.random() < 0.15 and i + 1 < len(members):
                add([parent], [members[i], members[i + 1]], [pid])
            else:
                add([parent], [members[i]], [pid])
        for _ in range(int(rng.integers(0, 3))):
            i, j = sorted(rng.choice(len(members), size=2, replace=False).tolist())
            add([members[i]], [members[j]], [pid])
        if b in cyc and len(members) >= 3:
            add([members[-1]], [members[0]], [pid])
    return reactions


def reference_graph(path=None) -> PathwayGraph:
    """Load the bundled 265-metabolite reference graph."""
    if path is None:
        with resources.as_file(resources.files("pathmed.data") / REFERENCE_FILE) as p:
            reactions = read_reactions(p)
    else:
        reactions = read_reactions(path)
    metabolites = [_mid(i) for i in range(_K_REF)]
    return build_pathway_graph(reactions, metabolites)


# ---------------------------------------------------------------------------
# data generation


def _scenario_vectors(spec: ScenarioSpec, K: int):
    if K < spec.n_active:
        raise InputError(f"graph has {K} metabolites, fewer than {spec.n_active} active ones")
    a = np.zeros(K)
    th = np.zeros(K)
    a0 = np.zeros(K)
    a[: spec.n_active] = spec.alpha_true
    th[: spec.n_active] = spec.theta_star_true
    a0[: spec.n_active] = spec.alpha0
    return a0, a, th


def topological_order(A) -> np.ndarray:
    """Kahn's algorithm with smallest-index tie breaking."""
    import heapq

    A = np.asarray(A) != 0
    K = A.shape[0]
    indeg = A.sum(axis=0).astype(int)
    heap = [k for k in range(K) if indeg[k] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        k = heapq.heappop(heap)
        order.append(k)
        for j in np.flatnonzero(A[k]):
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(heap, int(j))
    if len(order) != K:
        raise InvariantError("graph has no topological order")
    return np.array(order)


def _propagate_rows(B, Gamma, order):
    """Solve ``M = B + M Gamma`` for a DAG ``Gamma`` using the topological order."""
    P = Gamma[np.ix_(order, order)]
    U = np.eye(len(order)) - P  # upper unit-triangular
    Mo = solve_triangular(U, B[:, order].T, trans="T", lower=False, unit_diagonal=True).T
    M = np.empty_like(B)
    M[:, order] = Mo
    return M


@dataclass(frozen=True, eq=False)
class SimReplicate:
    dataset: Dataset
    psi_true: np.ndarray
    phi_true: np.ndarray
    delta_true: np.ndarray
    graph: PathwayGraph  # graph used for fitting
    misannotation: dict | None = None


def _true_delta(graph: PathwayGraph, psi, phi) -> np.ndarray:
    return np.array([compute_delta(psi[sg.indices], phi[sg.indices], sg.A) for sg in graph.subgraphs()], dtype=np.int8)


def generate_replicate(spec: ScenarioSpec, graph: PathwayGraph, rng, misannotation: bool = False) -> SimReplicate:
    """Simulate one dataset from the scenario on ``graph``.

    Metabolites follow the linear structural model over the DAG; the outcome
    uses sample-standardized active metabolites. The returned dataset holds
    raw metabolite values.
    """
    K, n = graph.K, spec.n
    a0, a, th = _scenario_vectors(spec, K)
    Gamma = spec.gamma_value * graph.A.astype(float)
    order = topological_order(graph.A)
    X = rng.standard_normal(n)
    Zc = rng.standard_normal(n)
    E = rng.standard_normal((n, K))
    M = _propagate_rows(a0 + np.outer(X, a) + E, Gamma, order)
    act = np.flatnonzero(th)
    Ms = (M[:, act] - M[:, act].mean(axis=0)) / M[:, act].std(axis=0, ddof=1)
    nu = rng.standard_normal(n)
    Y = spec.beta0 + spec.beta * X + spec.beta1 * Zc + Ms @ th[act] + nu
    psi = (a != 0).astype(np.int8)
    phi = (th != 0).astype(np.int8)
    data = Dataset.from_arrays(X, Y, M, Zc)
    fit_graph, record = graph, None
    if misannotation:
        fit_graph, record = misannotate(graph, rng)
    return SimReplicate(data, psi, phi, _true_delta(graph, psi, phi), fit_graph, record)


def misannotate(graph: PathwayGraph, rng, at_risk_fraction: float = 0.20, candidate_size: int = 3):
    """Perturb the fitting graph by reassigning metabolite identities.

    A fraction of metabolites is flagged at risk; each gets a candidate set of
    its true identity plus ``candidate_size - 1`` decoys drawn from metabolites
    sharing a pathway with it, and is assigned uniformly within that set. The
    graph is rebuilt from the assigned identities; the data are untouched.
    """
    if not 0 <= at_risk_fraction <= 1:
        raise InputError("at_risk_fraction must lie in [0, 1]")
    if candidate_size < 1:
        raise InputError("candidate_size must be >= 1")
    K = graph.K
    n_risk = int(round(at_risk_fraction * K))
    at_risk = np.sort(rng.choice(K, size=n_risk, replace=False)) if n_risk else np.zeros(0, dtype=np.int64)
    ident = np.arange(K)
    mm = graph.membership_matrix()
    for k in at_risk:
        peers = np.flatnonzero(mm[:, mm[k]].any(axis=1))
        peers = peers[peers != k]
        if len(peers) == 0:
            peers = np.setdiff1d(np.arange(K), [k])
        n_decoy = min(candidate_size - 1, len(peers))
        decoys = rng.choice(peers, size=n_decoy, replace=False) if n_decoy else np.zeros(0, dtype=np.int64)
        cands = np.concatenate([[k], decoys])
        ident[k] = int(cands[rng.integers(len(cands))])
    record = {
        "at_risk": [int(k) for k in at_risk],
        "assigned": {int(k): int(ident[k]) for k in at_risk},
        "misannotated": [int(k) for k in at_risk if ident[k] != k],
        "fraction_misannotated": float(np.mean(ident != np.arange(K))),
    }
    if np.array_equal(ident, np.arange(K)):
        return graph, record
    raw = graph.raw_counts[np.ix_(ident, ident)].copy()
    np.fill_diagonal(raw, 0)
    A, removed = remove_cycles(raw)
    A_star = ((raw + raw.T) > 0).astype(np.int64)
    np.fill_diagonal(A_star, 0)
    membership = {}
    for l, pid in enumerate(graph.pathway_ids):
        members = np.flatnonzero(mm[ident, l])
        if len(members):
            membership[pid] = members.astype(np.int64)
    pids = tuple(p for p in graph.pathway_ids if p in membership)
    g = PathwayGraph(
        metabolites=graph.metabolites,
        A=A,
        A_star=A_star,
        pathway_ids=pids,
        membership=membership,
        D=nilpotency_index(A),
        raw_counts=raw,
        removed_edges=tuple(removed),
    )
    return g, record


# ---------------------------------------------------------------------------
# truths


@dataclass(frozen=True)
class TrueEffects:
    """Population mediation effects for the contrast ``x - x* = 1``."""

    NDE: float
    NIE: float
    TE: float
    NIE_Pa: dict  # pathway id -> value
    se: dict = field(default_factory=dict)
    n_mc: int = 0

    def table(self) -> dict:
        out = {name: self.NIE_Pa.get(pid, 0.0) for name, pid in zip(EFFECT_NAMES[:4], ACTIVE_PATHWAYS)}
        out["Overall"] = self.NIE
        out["Total"] = self.TE
        return out


def _ancestors(A, targets):
    P = np.asarray(A) != 0
    keep = np.zeros(P.shape[0], dtype=bool)
    keep[targets] = True
    frontier = list(targets)
    while frontier:
        j = frontier.pop()
        for i in np.flatnonzero(P[:, j] & ~keep):
            keep[i] = True
            frontier.append(int(i))
    return np.flatnonzero(keep)


def _pathway_mediated(spec, graph, a, th, sd, Gamma):
    """Mediated contrast through each pathway using pathway-restricted propagation."""
    out = {}
    for pid in graph.pathway_ids:
        idx = graph.membership[pid]
        if not (a[idx].any() and th[idx].any()):
            out[pid] = 0.0
            continue
        G = Gamma[np.ix_(idx, idx)]
        T = np.linalg.inv(np.eye(len(idx)) - G)
        eff = a[idx] @ T
        with np.errstate(divide="ignore", invalid="ignore"):
            c = np.where(th[idx] != 0, th[idx] * eff / sd[idx], 0.0)
        out[pid] = float(c.sum())
    return out


def analytic_effects(spec: ScenarioSpec, graph: PathwayGraph) -> TrueEffects:
    """Closed-form truths: ``Cov(M) = T'(a a' + I)T`` with ``T = (I - Gamma)^-1``."""
    K = graph.K
    a0, a, th = _scenario_vectors(spec, K)
    Gamma = spec.gamma_value * graph.A.astype(float)
    T = np.linalg.inv(np.eye(K) - Gamma)
    eff = a @ T
    var = np.einsum("ij,ij->j", T, T) + eff**2
    sd = np.sqrt(var)
    nie = float(np.sum(th * eff / sd))
    pa = _pathway_mediated(spec, graph, a, th, sd, Gamma)
    return TrueEffects(NDE=spec.beta, NIE=nie, TE=spec.beta + nie, NIE_Pa=pa)


def true_effects(spec: ScenarioSpec, graph: PathwayGraph, n_mc: int = 1_000_000, seed: int = 0, n_batches: int = 20) -> TrueEffects:
    """Monte Carlo truths with common random numbers.

    Simulates ``n_mc`` draws of the metabolite system restricted to the
    ancestors of the outcome-active metabolites, estimates the population
    standard deviations used for standardization, and evaluates the mediated
    contrasts ``E[Y(1, M(1))] - E[Y(1, M(0))]`` overall and per pathway.
    Standard errors come from batch means.
    """
    if n_mc < n_batches:
        raise InputError("n_mc must be at least n_batches")
    K = graph.K
    a0, a, th = _scenario_vectors(spec, K)
    Gamma = spec.gamma_value * graph.A.astype(float)
    act = np.flatnonzero(th)
    rng = np.random.default_rng(seed)
    if act.size == 0:
        return TrueEffects(spec.beta, 0.0, spec.beta, {pid: 0.0 for pid in graph.pathway_ids}, {"NIE": 0.0, "TE": 0.0}, n_mc)
    anc = _ancestors(graph.A, act)
    Gs = Gamma[np.ix_(anc, anc)]
    order = topological_order(Gs)
    pos = {int(k): i for i, k in enumerate(anc)}
    act_local = np.array([pos[int(k)] for k in act])
    sizes = np.full(n_batches, n_mc // n_batches)
    sizes[: n_mc % n_batches] += 1
    s1 = np.zeros(len(act))
    s2 = np.zeros(len(act))
    d1 = np.zeros(len(act))
    batch_nie = np.zeros(n_batches)
    batch_sd = []
    chunk = 50_000
    for b, nb in enumerate(sizes):
        bs1 = np.zeros(len(act))
        bs2 = np.zeros(len(act))
        bd = np.zeros(len(act))
        done = 0
        while done < nb:
            m = min(chunk, nb - done)
            X = rng.standard_normal(m)
            E = rng.standard_normal((m, len(anc)))
            base = a0[anc] + E
            M_obs = _propagate_rows(base + np.outer(X, a[anc]), Gs, order)[:, act_local]
            M_1 = _propagate_rows(base + a[anc], Gs, order)[:, act_local]
            M_0 = _propagate_rows(base, Gs, order)[:, act_local]
            bs1 += M_obs.sum(axis=0)
            bs2 += (M_obs**2).sum(axis=0)
            bd += (M_1 - M_0).sum(axis=0)
            done += m
        mean_b = bs1 / nb
        sd_b = np.sqrt(bs2 / nb - mean_b**2)
        batch_nie[b] = float(np.sum(th[act] * (bd / nb) / sd_b))
        batch_sd.append(sd_b)
        s1 += bs1
        s2 += bs2
        d1 += bd
    mean = s1 / n_mc
    sd_act = np.sqrt(s2 / n_mc - mean**2)
    diff = d1 / n_mc
    nie = float(np.sum(th[act] * diff / sd_act))
    sd_full = np.ones(K)
    sd_full[act] = sd_act
    pa = _pathway_mediated(spec, graph, a, th, sd_full, Gamma)
    se_nie = float(batch_nie.std(ddof=1) / math.sqrt(n_batches))
    return TrueEffects(
        NDE=spec.beta,
        NIE=nie,
        TE=spec.beta + nie,
        NIE_Pa=pa,
        se={"NIE": se_nie, "TE": se_nie, "NDE": 0.0},
        n_mc=int(n_mc),
    )


# ---------------------------------------------------------------------------
# oracle fitter


def oracle_fit(rep: SimReplicate, truth_graph: PathwayGraph, spec: ScenarioSpec, n_draws: int = 1000, rng=None) -> dict:
    """Fit the data-generating model with the true selection known.

    Metabolite equations regress each active metabolite on the exposure and
    its parents; the outcome regresses on exposure, covariates and the
    standardized active metabolites. Posterior draws use flat-prior
    normal/inverse-Gamma conjugacy.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = rep.dataset
    Ms, _, _ = standardize(d.M)
    K = d.K
    act = np.flatnonzero(rep.phi_true)
    x = d.X

    def draw_ols(D, y):
        n, p = D.shape
        XtX = D.T @ D
        coef = np.linalg.solve(XtX, D.T @ y)
        res = y - D @ coef
        s2 = rng.chisquare(n - p, size=n_draws)
        s2 = float(res @ res) / s2
        c = np.linalg.cholesky(np.linalg.inv(XtX))
        z = rng.standard_normal((n_draws, p))
        return coef + np.sqrt(s2)[:, None] * (z @ c.T)

    anc = _ancestors(truth_graph.A, act)
    alpha = np.zeros((n_draws, K))
    Gam = np.zeros((n_draws, K, K))
    for k in anc:
        par = truth_graph.parents(k)
        cols = [d.Z, Ms[:, par]] + ([x[:, None]] if rep.psi_true[k] else [])
        dr = draw_ols(np.hstack(cols), Ms[:, k])
        Gam[:, par, k] = dr[:, d.q:d.q + len(par)]
        if rep.psi_true[k]:
            alpha[:, k] = dr[:, -1]
    D = np.column_stack([x, d.Z, Ms[:, act]])
    dr = draw_ols(D, d.Y)
    beta = dr[:, 0]
    theta = np.zeros((n_draws, K))
    theta[:, act] = dr[:, 1 + d.q:]
    nie = np.zeros(n_draws)
    pa = {pid: np.zeros(n_draws) for pid in truth_graph.pathway_ids}
    for s in range(n_draws):
        G = Gam[s][np.ix_(anc, anc)]
        T = np.linalg.inv(np.eye(len(anc)) - G)
        eff = np.zeros(K)
        eff[anc] = alpha[s, anc] @ T
        nie[s] = float(eff @ theta[s])
        for pid in ACTIVE_PATHWAYS:
            if pid in truth_graph.membership:
                idx = truth_graph.membership[pid]
                Tl = np.linalg.inv(np.eye(len(idx)) - Gam[s][np.ix_(idx, idx)])
                pa[pid][s] = float((alpha[s, idx] @ Tl) @ theta[s, idx])
    te = beta + nie
    return {"NIE": nie, "TE": te, "NDE": beta, "NIE_Pa": pa}


# ---------------------------------------------------------------------------
# study driver


def _rate(sel, truth, positive: bool):
    mask = truth == (1 if positive else 0)
    if not mask.any():
        return float("nan")
    hit = sel[mask] == (1 if positive else 0)
    return float(hit.mean())


@dataclass
class StudyMetrics:
    scenario: str
    misannotation: bool
    fitter: str
    n_replicates: int
    n_failed: int
    rates: dict  # "pathway_TPR" etc. -> mean over replicates
    rates_per_replicate: dict
    relative_bias: dict  # effect name -> value
    coverage: dict
    truth: dict
    estimates: dict  # effect name -> list per replicate
    intervals: dict  # effect name -> list of (lo, hi)
    misannotated_fraction: float | None = None
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _selection_vectors(summary, fit_graph: PathwayGraph, truth_graph: PathwayGraph, threshold: float):
    pid_index = {p: i for i, p in enumerate(fit_graph.pathway_ids)}
    prob = np.array([summary.delta_prob[pid_index[p]] if p in pid_index else 0.0 for p in truth_graph.pathway_ids])
    return (prob >= threshold).astype(np.int8), (summary.psi_prob >= threshold).astype(np.int8), (summary.phi_prob >= threshold).astype(np.int8)


def _fit_one(args):
    with threadpool_limits(limits=1):
        return _fit_one_inner(args)


def _fit_one_inner(args):
    spec, graph, fit_config, misannotation, threshold, fitter, seed_seq, index = args
    rng = np.random.default_rng(seed_seq)
    rep = generate_replicate(spec, graph, rng, misannotation=misannotation)
    out = {"index": index, "misannotated_fraction": None, "error": None}
    if rep.misannotation is not None:
        out["misannotated_fraction"] = rep.misannotation["fraction_misannotated"]
    try:
        if fitter == "oracle":
            res = oracle_fit(rep, graph, spec, rng=rng)
            est, iv = {}, {}
            for name, pid in zip(EFFECT_NAMES[:4], ACTIVE_PATHWAYS):
                a = res["NIE_Pa"].get(pid, np.zeros(1))
                est[name] = float(a.mean())
                iv[name] = tuple(float(v) for v in np.quantile(a, [0.025, 0.975]))
            for name, key in (("Overall", "NIE"), ("Total", "TE")):
                est[name] = float(res[key].mean())
                iv[name] = tuple(float(v) for v in np.quantile(res[key], [0.025, 0.975]))
            out.update(estimates=est, intervals=iv, sel=None)
            return out
        if fitter == "perfect":
            out.update(estimates=None, intervals=None, sel=(rep.delta_true, rep.psi_true, rep.phi_true))
            out["truth"] = (rep.delta_true, rep.psi_true, rep.phi_true)
            return out
        Ms, _, _ = standardize(rep.dataset.M)
        data = Dataset(rep.dataset.X, rep.dataset.Z, Ms, rep.dataset.Y)
        hyper = fit_config.hyper.replace(seed=int(rng.integers(2**63 - 1)))
        cfg = ChainConfig(fit_config.n_iter, fit_config.n_burnin, fit_config.thin, hyper, None, fit_config.adapt_xi, fit_config.fdr_q)
        chain = run_chain(data, rep.graph, cfg)
        summ = summarize(chain, rep.graph, threshold=threshold)
        pid_index = {p: i for i, p in enumerate(rep.graph.pathway_ids)}
        est, iv = {}, {}
        for name, pid in zip(EFFECT_NAMES[:4], ACTIVE_PATHWAYS):
            if pid in pid_index:
                m, lo, hi = summ.nie_pathway[pid_index[pid]]
            else:
                m = lo = hi = 0.0
            est[name] = float(m)
            iv[name] = (float(lo), float(hi))
        for name, key in (("Overall", "NIE"), ("Total", "TE")):
            m, lo, hi = summ.effects[key]
            est[name] = m
            iv[name] = (lo, hi)
        out.update(estimates=est, intervals=iv, sel=_selection_vectors(summ, rep.graph, graph, threshold))
    except PathmedError as exc:
        out["error"] = str(exc)
        logger.warning("replicate %d failed: %s", index, exc)
    out["truth"] = (rep.delta_true, rep.psi_true, rep.phi_true)
    return out


def run_study(
    spec: ScenarioSpec,
    n_replicates: int,
    fit_config: ChainConfig | None = None,
    misannotation: bool = False,
    graph: PathwayGraph | None = None,
    seed: int = 0,
    threshold: float = 0.5,
    fitter: str = "bayes",
    n_jobs: int = 1,
    truth: TrueEffects | None = None,
    n_mc: int = 1_000_000,
) -> StudyMetrics:
    """Replicate the simulation study for one scenario.

    ``fitter`` is ``"bayes"`` (the full sampler), ``"oracle"`` (data-generating
    model with known selection) or ``"perfect"`` (returns the true selection;
    for testing the metric plumbing). Output does not depend on ``n_jobs``.
    """
    if fitter not in ("bayes", "oracle", "perfect"):
        raise InputError(f"unknown fitter {fitter!r}")
    if n_replicates < 1:
        raise InputError("n_replicates must be >= 1")
    graph = reference_graph() if graph is None else graph
    fit_config = fit_config or ChainConfig()
    if truth is None:
        truth = true_effects(spec, graph, n_mc=n_mc, seed=seed)
    tt = truth.table()
    seqs = np.random.SeedSequence(seed).spawn(n_replicates)
    jobs = [(spec, graph, fit_config, misannotation, threshold, fitter, seqs[i], i) for i in range(n_replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    results.sort(key=lambda r: r["index"])
    ok = [r for r in results if r["error"] is None]
    n_failed = len(results) - len(ok)
    if n_failed > 0.05 * n_replicates:
        raise PathmedError(f"{n_failed} of {n_replicates} replicate fits failed")
    per_rep = {k: [] for k in ("pathway_TPR", "pathway_TNR", "psi_TPR", "psi_TNR", "phi_TPR", "phi_TNR")}
    for r in ok:
        if r.get("sel") is None:
            continue
        sel_d, sel_psi, sel_phi = r["sel"]
        tr_d, tr_psi, tr_phi = r["truth"]
        for name, s, t in (("pathway", sel_d, tr_d), ("psi", sel_psi, tr_psi), ("phi", sel_phi, tr_phi)):
            per_rep[f"{name}_TPR"].append(_rate(s, t, True))
            per_rep[f"{name}_TNR"].append(_rate(s, t, False))
    rates = {k: (float(np.nanmean(v)) if v else float("nan")) for k, v in per_rep.items()}
    estimates = {name: [] for name in EFFECT_NAMES}
    intervals = {name: [] for name in EFFECT_NAMES}
    for r in ok:
        if r.get("estimates") is None:
            continue
        for name in EFFECT_NAMES:
            estimates[name].append(r["estimates"][name])
            intervals[name].append(tuple(r["intervals"][name]))
    bias, cover = {}, {}
    for name in EFFECT_NAMES:
        if not estimates[name]:
            bias[name] = cover[name] = float("nan")
            continue
        t = tt[name]
        e = np.array(estimates[name])
        bias[name] = float(np.mean((e - t) / t)) if t != 0 else float("nan")
        cover[name] = float(np.mean([lo <= t <= hi for lo, hi in intervals[name]]))
    fr = [r["misannotated_fraction"] for r in results if r["misannotated_fraction"] is not None]
    return StudyMetrics(
        scenario=spec.id,
        misannotation=bool(misannotation),
        fitter=fitter,
        n_replicates=n_replicates,
        n_failed=n_failed,
        rates=rates,
        rates_per_replicate=per_rep,
        relative_bias=bias,
        coverage=cover,
        truth=tt,
        estimates=estimates,
        intervals={k: [list(v) for v in vs] for k, vs in intervals.items()},
        misannotated_fraction=float(np.mean(fr)) if fr else None,
        settings={
            "n_iter": fit_config.n_iter,
            "n_burnin": fit_config.n_burnin,
            "thin": fit_config.thin,
            "threshold": threshold,
            "seed": seed,
            "n_mc": truth.n_mc,
        },
    )


def study_table_rows(metrics: StudyMetrics) -> list[dict]:
    """Rows shaped like the effect-estimation table: one per effect."""
    spec = "misspecified" if metrics.misannotation else "correct"
    return [
        {
            "scenario": metrics.scenario,
            "specification": spec,
            "fitter": metrics.fitter,
            "effect": name,
            "true_value": metrics.truth[name],
            "relative_bias": metrics.relative_bias[name],
            "cp": metrics.coverage[name],
        }
        for name in EFFECT_NAMES
    ]


def study_rate_rows(metrics: StudyMetrics) -> list[dict]:
    """Rows shaped like the selection-rate figure panels."""
    spec = "misspecified" if metrics.misannotation else "correct"
    rows = []
    for target in ("pathway", "psi", "phi"):
        for kind in ("TPR", "TNR"):
            rows.append(
                {
                    "scenario": metrics.scenario,
                    "specification": spec,
                    "target": target,
                    "rate": kind,
                    "value": metrics.rates[f"{target}_{kind}"],
                }
            )
    return rows
