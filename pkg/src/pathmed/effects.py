"""Direct, indirect and pathway-specific effects, posterior summaries, FDR selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError
from .graph import PathwayGraph, PathwaySubgraph
from .model import LatentScores, ModelState

__all__ = [
    "nde",
    "nie",
    "nie_pathway",
    "propagate",
    "EffectDraws",
    "effect_draws",
    "PosteriorSummary",
    "summarize",
    "fdr_select",
]


def nde(state: ModelState, x: float = 1.0, x_star: float = 0.0) -> float:
    """Natural direct effect ``beta (x - x*)``."""
    return float(state.beta) * (x - x_star)


def propagate(v, G) -> np.ndarray:
    """``sum_{d >= 0} v G^d`` for a nilpotent ``G``, stopping once the term vanishes."""
    total = np.array(v, dtype=float, copy=True)
    term = total
    for _ in range(G.shape[0]):
        term = term @ G
        if not term.any():
            break
        total = total + term
    return total


def _mediated(v, G, W, theta_delta):
    return float(propagate(v, G) @ W @ theta_delta)


def nie(state: ModelState, scores: LatentScores, graph: PathwayGraph | None = None, x: float = 1.0, x_star: float = 0.0) -> float:
    """Natural indirect effect through all selected pathways.

    ``(alpha*psi)' sum_d Gamma^d W (theta*delta) (x - x*)`` where ``Gamma`` is
    ``gamma_tilde`` and ``W`` the ``(K, L)`` score-weight matrix.
    """
    delta = np.asarray(scores.delta)
    if not delta.any():
        return 0.0
    K = len(state.alpha)
    v = state.alpha * state.psi
    W = scores.weight_matrix(K)
    return _mediated(v, state.gamma_tilde, W, state.theta * delta) * (x - x_star)


def nie_pathway(state: ModelState, scores: LatentScores, subgraph: PathwaySubgraph, l: int, x: float = 1.0, x_star: float = 0.0) -> float:
    """Indirect effect transmitted through pathway ``l`` only."""
    if not scores.delta[l]:
        return 0.0
    idx = subgraph.indices
    v = (state.alpha * state.psi)[idx]
    G = state.gamma_tilde[np.ix_(idx, idx)]
    O = scores.score_sets[l]
    w_local = np.zeros(len(idx))
    w_local[np.searchsorted(idx, O)] = scores.weights[l]
    return float(propagate(v, G) @ w_local) * float(state.theta[l]) * (x - x_star)


@dataclass(frozen=True, eq=False)
class EffectDraws:
    """Per-draw effects; ``TE`` is computed as ``NDE + NIE``."""

    NDE: np.ndarray
    NIE: np.ndarray
    TE: np.ndarray
    NIE_Pa: np.ndarray  # (S, L)
    contrast: tuple

    def __post_init__(self):
        if not np.array_equal(self.TE, self.NDE + self.NIE):
            raise AssertionError("TE must equal NDE + NIE")


def _check_graph(chain, graph):
    if graph is not None and tuple(graph.pathway_ids) != tuple(chain.pathway_ids):
        raise InputError("chain and graph disagree on pathway ids")


def effect_draws(chain, graph: PathwayGraph | None = None, x: float = 1.0, x_star: float = 0.0) -> EffectDraws:
    """Evaluate all effects on every kept draw of a chain.

    Pathway membership comes from the chain; ``graph``, when given, is only
    checked for consistency.
    """
    c = x - x_star
    S, L = chain.n_samples, chain.L
    _check_graph(chain, graph)
    members = chain.membership
    NDE = chain.beta * c
    NIE = np.zeros(S)
    PA = np.zeros((S, L))
    for s in range(S):
        delta = chain.delta[s]
        if not delta.any():
            continue
        v = chain.alpha[s] * chain.psi[s]
        if not v.any():
            continue
        G = chain.gamma_tilde(s)
        W = chain.weight_matrix(s)
        td = chain.theta[s] * delta
        NIE[s] = _mediated(v, G, W, td) * c
        for l in np.flatnonzero(delta):
            idx = members[l]
            u = propagate(v[idx], G[np.ix_(idx, idx)])
            PA[s, l] = float(u @ W[idx, l]) * td[l] * c
    TE = NDE + NIE
    return EffectDraws(NDE=NDE, NIE=NIE, TE=TE, NIE_Pa=PA, contrast=(float(x), float(x_star)))


def _interval(a, level=0.95):
    lo, hi = np.quantile(a, [(1 - level) / 2, 1 - (1 - level) / 2], axis=0)
    return lo, hi


def fdr_select(inclusion_probs, q: float) -> tuple[float, list[int]]:
    """Bayesian FDR selection on posterior inclusion probabilities.

    Probabilities are ranked in decreasing order and the largest prefix whose
    mean exclusion probability is at most ``q`` is selected. Returns the
    probability of the last selected item (1.0 when nothing is selected) and
    the selected indices in rank order.
    """
    p = np.asarray(inclusion_probs, dtype=float)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise InputError("inclusion probabilities must lie in [0, 1]")
    order = np.argsort(-p, kind="stable")
    mean_excl = np.cumsum(1.0 - p[order]) / np.arange(1, p.size + 1)
    ok = np.flatnonzero(mean_excl <= q + 1e-12)
    if ok.size == 0:
        return 1.0, []
    m = int(ok[-1]) + 1
    sel = order[:m]
    return float(p[sel[-1]]), [int(i) for i in sel]


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    metabolites: tuple
    pathway_ids: tuple
    psi_prob: np.ndarray
    phi_prob: np.ndarray
    delta_prob: np.ndarray
    effects: dict  # name -> (mean, lower, upper)
    nie_pathway: np.ndarray  # (L, 3): mean, lower, upper
    threshold: float
    selected: list
    contrast: tuple
    n_samples: int
    fdr_q: float | None = None

    def to_dict(self) -> dict:
        return {
            "contrast": {"x": self.contrast[0], "x_star": self.contrast[1]},
            "n_samples": self.n_samples,
            "selection": {
                "threshold": self.threshold,
                "fdr_q": self.fdr_q,
                "selected_pathways": [self.pathway_ids[l] for l in self.selected],
            },
            "effects": {
                k: {"mean": float(m), "lower": float(lo), "upper": float(hi)}
                for k, (m, lo, hi) in self.effects.items()
            },
            "pathways": [
                {
                    "pathway_id": pid,
                    "inclusion_prob": float(self.delta_prob[l]),
                    "nie_mean": float(self.nie_pathway[l, 0]),
                    "nie_lower": float(self.nie_pathway[l, 1]),
                    "nie_upper": float(self.nie_pathway[l, 2]),
                }
                for l, pid in enumerate(self.pathway_ids)
            ],
            "metabolites": [
                {"metabolite_id": m, "psi_prob": float(self.psi_prob[k]), "phi_prob": float(self.phi_prob[k])}
                for k, m in enumerate(self.metabolites)
            ],
        }


def summarize(chain, graph: PathwayGraph | None = None, x: float = 1.0, x_star: float = 0.0, threshold: float = 0.5, fdr_q: float | None = None, level: float = 0.95) -> PosteriorSummary:
    """Posterior inclusion probabilities, effect means and equal-tailed intervals.

    Pathways are selected at ``threshold`` unless ``fdr_q`` is given, in which
    case Bayesian FDR selection chooses the threshold.
    """
    if chain.n_samples == 0:
        raise InputError("chain has no kept draws")
    draws = effect_draws(chain, graph, x, x_star)
    effects = {}
    for name in ("NDE", "NIE", "TE"):
        a = getattr(draws, name)
        lo, hi = _interval(a, level)
        effects[name] = (float(a.mean()), float(lo), float(hi))
    lo, hi = _interval(draws.NIE_Pa, level)
    pa = np.column_stack([draws.NIE_Pa.mean(axis=0), lo, hi])
    delta_prob = chain.delta.mean(axis=0)
    if fdr_q is not None:
        thr, sel = fdr_select(delta_prob, fdr_q)
        sel = sorted(sel)
    else:
        thr = float(threshold)
        sel = [int(l) for l in np.flatnonzero(delta_prob >= thr)]
    return PosteriorSummary(
        metabolites=tuple(chain.metabolites),
        pathway_ids=tuple(chain.pathway_ids),
        psi_prob=chain.psi.mean(axis=0),
        phi_prob=chain.phi.mean(axis=0),
        delta_prob=delta_prob,
        effects=effects,
        nie_pathway=pa,
        threshold=thr,
        selected=sel,
        contrast=(float(x), float(x_star)),
        n_samples=chain.n_samples,
        fdr_q=fdr_q,
    )
