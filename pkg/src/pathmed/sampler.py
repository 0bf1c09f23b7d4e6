"""Posterior sampler for the pathway mediation model.

One iteration runs ten updates in a fixed order:

1. ``psi`` by Swendsen-Wang, with ``alpha_k`` and ``sigma_k^2`` integrated out
2. ``alpha`` (preceded by ``sigma_k^2`` drawn with ``alpha_k`` integrated out)
3. ``(alpha_Z, gamma)`` jointly per metabolite
4. ``sigma_k^2``
5. the two ``rho_psi`` parameters by double Metropolis-Hastings
6. ``phi`` by Swendsen-Wang, with ``theta`` and ``sigma^2`` integrated out
7. ``theta`` on the collapsed score design
8. ``(beta, beta_Z)``
9. ``sigma^2``
10. the two ``rho_phi`` parameters by double Metropolis-Hastings
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .exceptions import InputError, InvariantError, NumericalError, PathmedError, SamplerError
from .graph import PathwayGraph
from .ising import edge_state_counts, gibbs_sweep, neighbor_lists, sw_sweep
from .model import (
    Dataset,
    Hyperparameters,
    LatentScores,
    ModelState,
    PathwayScorer,
    collapse_score_groups,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ChainConfig",
    "ChainOutput",
    "ChainContext",
    "integrated_likelihood_metabolite",
    "integrated_loglik",
    "outcome_marginal_loglik",
    "screening_pvalues",
    "screening_hyperparams",
    "initial_state",
    "update_psi_sw",
    "update_sigma_k",
    "update_alpha",
    "update_alphaZ_gamma",
    "update_rho_dmh",
    "update_phi_sw",
    "update_theta",
    "update_beta_betaZ",
    "update_sigma2",
    "run_chain",
]

LOG_2PI = math.log(2.0 * math.pi)
JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
RHO_KEYS = ("psi0", "psi1", "phi0", "phi1")
ADAPT_WINDOW = 50


# ---------------------------------------------------------------------------
# marginal likelihoods


def integrated_loglik(R, x, h, a0, b0):
    """Per-column log marginal likelihoods of residuals ``R`` under both ``psi`` states.

    With ``psi = 1`` the column is ``x * alpha + noise`` where
    ``alpha | s2 ~ N(0, h s2)`` and ``s2 ~ IG(a0, b0)``; with ``psi = 0`` it
    is pure noise. Both forms share the same constants.

    Returns
    -------
    ll0, ll1 : ndarray
    """
    R = np.asarray(R, dtype=float)
    x = np.asarray(x, dtype=float)
    squeeze = R.ndim == 1
    if squeeze:
        R = R[:, None]
    if not np.isfinite(R).all():
        raise NumericalError("non-finite residuals in metabolite likelihood")
    n = R.shape[0]
    srr = np.einsum("ij,ij->j", R, R)
    sxr = x @ R
    sxx = float(x @ x)
    an = a0 + 0.5 * n
    const = -0.5 * n * LOG_2PI + a0 * math.log(b0) + gammaln(an) - gammaln(a0)
    Sn = sxx + 1.0 / h
    bn1 = b0 + 0.5 * (srr - sxr**2 / Sn)
    ll1 = const + 0.5 * (math.log(1.0 / h) - math.log(Sn)) - an * np.log(bn1)
    ll0 = const - an * np.log(b0 + 0.5 * srr)
    if squeeze:
        return float(ll0[0]), float(ll1[0])
    return ll0, ll1


def integrated_likelihood_metabolite(k, psi_k, r, X, hyper: Hyperparameters) -> float:
    """Log marginal likelihood of one metabolite's residual column."""
    try:
        ll0, ll1 = integrated_loglik(np.asarray(r, dtype=float), X, hyper.h, hyper.a0, hyper.b0)
    except NumericalError as exc:
        raise NumericalError(f"metabolite {k}: {exc}") from None
    return ll1 if psi_k else ll0


def outcome_marginal_loglik(S_star, r, h, a0, b0) -> float:
    """Log marginal likelihood of ``r`` given design ``S_star``.

    Coefficients have prior ``N(0, h s2 I)`` and ``s2 ~ IG(a0, b0)``.
    """
    r = np.asarray(r, dtype=float)
    n = r.shape[0]
    an = a0 + 0.5 * n
    rr = float(r @ r)
    out = -0.5 * n * LOG_2PI + a0 * math.log(b0) + gammaln(an) - gammaln(a0)
    if S_star is None or S_star.shape[1] == 0:
        return out - an * math.log(b0 + 0.5 * rr)
    Ls = S_star.shape[1]
    Sn = S_star.T @ S_star + np.eye(Ls) / h
    c = _cholesky(Sn, "outcome marginal")
    u = np.linalg.solve(c, S_star.T @ r)  # c u = S'r, so mu' Sn mu = u'u
    quad = rr - float(u @ u)
    logdet = 2.0 * float(np.log(np.diag(c)).sum())
    bn = b0 + 0.5 * quad
    return out + 0.5 * (Ls * math.log(1.0 / h) - logdet) - an * math.log(bn)


# ---------------------------------------------------------------------------
# linear algebra


def _cholesky(P, label):
    scale = float(np.mean(np.diag(P))) if P.size else 1.0
    for jit in JITTERS:
        try:
            if jit:
                logger.debug("cholesky jitter %g for %s", jit, label)
            return np.linalg.cholesky(P + jit * scale * np.eye(P.shape[0]) if jit else P)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky factorization failed for {label} after jitter escalation")


def mvn_from_precision(P, b, rng, label="block"):
    """Draw from ``N(P^-1 b, P^-1)``."""
    c = _cholesky(P, label)
    z = rng.standard_normal(P.shape[0])
    mean = np.linalg.solve(c.T, np.linalg.solve(c, b))
    return mean + np.linalg.solve(c.T, z)


# ---------------------------------------------------------------------------
# screening and initialization


def _residualize(B, D):
    Q, _ = np.linalg.qr(D)
    return B - Q @ (Q.T @ B)


def _slope_pvalues(xr, Br, df):
    xx = np.einsum("i...,i...->...", xr, xr)
    bb = np.einsum("ij,ij->j", Br, Br)
    xb = xr @ Br if xr.ndim == 1 else np.einsum("ij,ij->j", xr, Br)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = xb / xx
        s2 = np.maximum(bb - beta * xb, 0.0) / df
        t = beta / np.sqrt(s2 / xx)
    p = 2.0 * stats.t.sf(np.abs(t), df)
    return np.where(np.isfinite(p), p, 1.0)


def screening_pvalues(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Marginal p-values for exposure -> metabolite and metabolite -> outcome.

    The first adjusts for the covariates, the second for exposure and covariates.
    """
    n, q = dataset.n, dataset.q
    if n < q + 3:
        raise InputError(f"screening needs at least {q + 3} samples, got {n}")
    x, Z, M, Y = dataset.X, dataset.Z, dataset.M, dataset.Y
    xr = _residualize(x, Z)
    p_exp = _slope_pvalues(xr, _residualize(M, Z), n - q - 1)
    D2 = np.column_stack([Z, x])
    Mr = _residualize(M, D2)
    yr = _residualize(Y, D2)
    p_out = _slope_pvalues(Mr, np.repeat(yr[:, None], M.shape[1], axis=1), n - q - 2)
    return p_exp, p_out


def _eta_from_discoveries(n_disc: int, K: int, label: str) -> float:
    if n_disc == 0:
        warnings.warn(f"no {label} discoveries in screening; using proportion 1/K", RuntimeWarning, stacklevel=3)
        prop = 1.0 / K
    else:
        prop = min(max(n_disc / K, 1.0 / K), 0.5)
    return math.log(prop / (1.0 - prop))


def screening_hyperparams(dataset: Dataset, fdr_q: float = 0.05, fdr_q_phi: float | None = None):
    """Ising log-odds ``(eta_psi_1, eta_phi_1)`` from Benjamini-Hochberg screening."""
    disc_psi, disc_phi = _screen(dataset, fdr_q, fdr_q if fdr_q_phi is None else fdr_q_phi)
    K = dataset.K
    return (
        _eta_from_discoveries(int(disc_psi.sum()), K, "exposure-metabolite"),
        _eta_from_discoveries(int(disc_phi.sum()), K, "metabolite-outcome"),
    )


def _bh(p, q):
    if not 0 < q < 1:
        raise InputError(f"FDR level must be in (0, 1), got {q}")
    adj = stats.false_discovery_control(p, method="bh")
    return adj <= q


def _screen(dataset, q_psi, q_phi):
    p_exp, p_out = screening_pvalues(dataset)
    return _bh(p_exp, q_psi), _bh(p_out, q_phi)


def initial_state(dataset: Dataset, graph: PathwayGraph, hyper: Hyperparameters, fdr_q=0.05) -> ModelState:
    """Warm start: screening for the indicators, least squares for the rest."""
    n, K, q = dataset.n, dataset.K, dataset.q
    x, Z, M, Y = dataset.X, dataset.Z, dataset.M, dataset.Y
    disc_psi, disc_phi = _screen(dataset, fdr_q, fdr_q)
    st = ModelState.zeros(K, q, graph.L)
    st.psi = disc_psi.astype(np.int8)
    st.phi = disc_phi.astype(np.int8)
    for k in range(K):
        par = graph.parents(k)
        cols = [Z, M[:, par]] + ([x[:, None]] if st.psi[k] else [])
        D = np.hstack(cols)
        coef, *_ = np.linalg.lstsq(D, M[:, k], rcond=None)
        resid = M[:, k] - D @ coef
        st.alpha_Z[k] = coef[:q]
        st.gamma_tilde[par, k] = coef[q:q + len(par)]
        if st.psi[k]:
            st.alpha[k] = coef[-1] if coef[-1] != 0 else 1e-8
        st.sigma_k2[k] = max(float(resid @ resid) / max(n - D.shape[1], 1), 1e-6)
    scores = PathwayScorer(M, Y, graph).scores(st.psi, st.phi)
    col = collapse_score_groups(scores)
    D = np.column_stack([x, Z, col.S_star])
    coef, *_ = np.linalg.lstsq(D, Y, rcond=None)
    resid = Y - D @ coef
    st.beta = float(coef[0])
    st.beta_Z = coef[1:1 + q].copy()
    st.theta = col.expand(coef[1 + q:])
    st.sigma2 = max(float(resid @ resid) / max(n - D.shape[1], 1), 1e-6)
    return st


# ---------------------------------------------------------------------------
# chain context


@dataclass
class ChainConfig:
    """Run settings for one chain."""

    n_iter: int = 2000
    n_burnin: int = 1000
    thin: int = 1
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    init: ModelState | None = None
    adapt_xi: bool = True
    fdr_q: float = 0.05

    def __post_init__(self):
        if not (isinstance(self.n_iter, (int, np.integer)) and self.n_iter >= 1):
            raise InputError("n_iter must be a positive integer")
        if not 0 <= self.n_burnin < self.n_iter:
            raise InputError("n_burnin must satisfy 0 <= n_burnin < n_iter")
        if self.thin < 1:
            raise InputError("thin must be >= 1")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.n_burnin) // self.thin


class ChainContext:
    """Data-dependent constants and mutable bookkeeping shared by the updates."""

    def __init__(self, dataset: Dataset, graph: PathwayGraph, hyper: Hyperparameters):
        dataset.check_graph(graph)
        if hyper.eta_psi_1 is None or hyper.eta_phi_1 is None:
            raise InputError("Ising log-odds must be resolved before sampling")
        self.data = dataset
        self.graph = graph
        self.hyper = hyper
        self.n, self.K, self.q, self.L = dataset.n, dataset.K, dataset.q, graph.L
        self.x = dataset.X
        self.Z = dataset.Z
        self.M = dataset.M
        self.Y = dataset.Y
        self.sxx = float(self.x @ self.x)
        self.dag_edges = graph.edges()
        self.star_edges = graph.star_edges()
        self.nbrs = neighbor_lists(self.K, self.star_edges)
        self.scorer = PathwayScorer(self.M, self.Y, graph)
        self.outcome_design = np.column_stack([self.x, self.Z])
        self.outcome_gram = self.outcome_design.T @ self.outcome_design
        self._build_blocks()
        self.xi = {k: hyper.xi for k in RHO_KEYS}
        self.dmh_sweeps = int(hyper.dmh_sweeps)
        self.accept = {k: [0, 0] for k in RHO_KEYS}
        self._window = {k: [0, 0] for k in RHO_KEYS}
        self.scores: LatentScores | None = None
        self.theta_star = np.zeros(0)

    def _build_blocks(self):
        """Group metabolites by the size of their regression design."""
        parents = [self.graph.parents(k) for k in range(self.K)]
        by_size: dict[int, list[int]] = {}
        for k, p in enumerate(parents):
            by_size.setdefault(len(p), []).append(k)
        self.blocks = []
        for npar in sorted(by_size):
            ks = np.array(by_size[npar], dtype=np.int64)
            P = np.array([parents[k] for k in ks], dtype=np.int64).reshape(len(ks), npar)
            Om = np.concatenate(
                [np.broadcast_to(self.Z, (len(ks),) + self.Z.shape), self.M[:, P].transpose(1, 0, 2)],
                axis=2,
            )
            G = np.einsum("mnd,mne->mde", Om, Om)
            self.blocks.append((ks, P, np.ascontiguousarray(Om), G))

    def metabolite_base_residual(self, st: ModelState) -> np.ndarray:
        """``M - Z alpha_Z' - M gamma_tilde`` (everything except the exposure term)."""
        return self.M - self.Z @ st.alpha_Z.T - self.M @ st.gamma_tilde

    def outcome_residual(self, st: ModelState) -> np.ndarray:
        return self.Y - st.beta * self.x - self.Z @ st.beta_Z

    def site_log_odds(self, which: str) -> float:
        return self.hyper.site_log_odds(which)

    def refresh_scores(self, st: ModelState) -> LatentScores:
        self.scores = self.scorer.scores(st.psi, st.phi)
        return self.scores

    def adapt(self):
        """Scale proposal variances toward 25-45% acceptance over the last window."""
        for key, (acc, tries) in self._window.items():
            if tries >= ADAPT_WINDOW:
                rate = acc / tries
                if rate < 0.25:
                    self.xi[key] *= 0.7
                elif rate > 0.45:
                    self.xi[key] *= 1.4
                self.xi[key] = float(min(max(self.xi[key], 1e-6), 25.0))
                self._window[key] = [0, 0]


# ---------------------------------------------------------------------------
# updates


def update_psi_sw(st: ModelState, ctx: ChainContext, rng) -> int:
    """Swendsen-Wang update of ``psi`` using integrated metabolite likelihoods."""
    h = ctx.hyper
    R = ctx.metabolite_base_residual(st)
    ll0, ll1 = integrated_loglik(R, ctx.x, h.h, h.a0, h.b0)
    return sw_sweep(st.psi, ctx.star_edges, st.rho_psi, ctx.site_log_odds("psi"), rng, unary=ll1 - ll0)


def _inv_gamma(shape, rate, rng):
    return rate / rng.standard_gamma(shape)


def update_sigma_k(st: ModelState, ctx: ChainContext, rng, integrate_alpha: bool = False) -> None:
    """Inverse-Gamma draw of every ``sigma_k^2``.

    With ``integrate_alpha`` the exposure coefficient is marginalized, so the
    draw is from ``p(sigma_k^2 | psi_k, rest)`` and can be followed by
    :func:`update_alpha` as a joint block. Otherwise the draw conditions on
    ``alpha_k``, whose prior variance ``h sigma_k^2`` adds to the rate.
    """
    h = ctx.hyper
    R = ctx.metabolite_base_residual(st)
    psi = st.psi.astype(float)
    n = ctx.n
    if integrate_alpha:
        srr = np.einsum("ij,ij->j", R, R)
        sxr = ctx.x @ R
        rate = h.b0 + 0.5 * (srr - psi * sxr**2 / (ctx.sxx + 1.0 / h.h))
        shape = np.full(ctx.K, h.a0 + 0.5 * n)
    else:
        E = R - np.outer(ctx.x, st.alpha)
        ssr = np.einsum("ij,ij->j", E, E)
        rate = h.b0 + 0.5 * ssr + psi * st.alpha**2 / (2.0 * h.h)
        shape = h.a0 + 0.5 * n + 0.5 * psi
    st.sigma_k2 = _inv_gamma(shape, rate, rng)


def update_alpha(st: ModelState, ctx: ChainContext, rng) -> None:
    """Conjugate normal draw of ``alpha_k`` for ``psi_k = 1``; zero otherwise."""
    if np.any(st.sigma_k2 <= 0):
        raise InvariantError("sigma_k^2 must be positive")
    R = ctx.metabolite_base_residual(st)
    prec = ctx.sxx + 1.0 / ctx.hyper.h
    mean = (ctx.x @ R) / prec
    sd = np.sqrt(st.sigma_k2 / prec)
    z = rng.standard_normal(ctx.K)
    st.alpha = np.where(st.psi == 1, mean + sd * z, 0.0)


def update_alphaZ_gamma(st: ModelState, ctx: ChainContext, rng) -> None:
    """Joint normal draw of covariate and parent-metabolite coefficients per metabolite."""
    v = ctx.hyper.prior_var_reg
    R = ctx.M - np.outer(ctx.x, st.alpha)
    q = ctx.q
    for ks, P, Om, G in ctx.blocks:
        m, d = len(ks), G.shape[1]
        s2 = st.sigma_k2[ks]
        b = np.einsum("mnd,nm->md", Om, R[:, ks]) / s2[:, None]
        prec = G / s2[:, None, None] + np.eye(d) / v
        z = rng.standard_normal((m, d))
        try:
            c = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            c = np.empty_like(prec)
            for i in range(m):
                try:
                    c[i] = _cholesky(prec[i], f"metabolite {ctx.graph.metabolites[ks[i]]}")
                except NumericalError as exc:
                    raise NumericalError(f"{exc} (index {int(ks[i])})") from None
        cT = np.swapaxes(c, 1, 2)
        mean = np.linalg.solve(cT, np.linalg.solve(c, b[..., None]))[..., 0]
        draw = mean + np.linalg.solve(cT, z[..., None])[..., 0]
        st.alpha_Z[ks] = draw[:, :q]
        if d > q:
            st.gamma_tilde[P.ravel(), np.repeat(ks, d - q)] = draw[:, q:].ravel()


def update_rho_dmh(which: str, s: int, st: ModelState, ctx: ChainContext, rng) -> bool:
    """Double Metropolis-Hastings update of ``rho_{which, s}``.

    Proposal is log-normal around the current value; the intractable Ising
    normalizer cancels against an auxiliary configuration simulated under the
    proposed value by ``ctx.dmh_sweeps`` sequential Gibbs sweeps started at
    the current configuration.
    """
    key = f"{which}{s}"
    rho = st.rho_psi if which == "psi" else st.rho_phi
    z = st.psi if which == "psi" else st.phi
    cur = float(rho[s])
    prop = math.exp(math.log(cur) + math.sqrt(ctx.xi[key]) * rng.standard_normal())
    ctx.accept[key][1] += 1
    ctx._window[key][1] += 1
    if prop >= 1.0:
        return False
    rho_prop = rho.copy()
    rho_prop[s] = prop
    lo = ctx.site_log_odds(which)
    w = z
    for _ in range(ctx.dmh_sweeps):
        w = gibbs_sweep(w, ctx.nbrs, lo, rho_prop, rng)
    cz = edge_state_counts(z, ctx.star_edges)[s]
    cw = edge_state_counts(w, ctx.star_edges)[s]
    log_r = (prop - cur) * (cz - cw) + math.log(prop) - math.log(cur)
    if math.log(rng.random()) < log_r:
        rho[s] = prop
        ctx.accept[key][0] += 1
        ctx._window[key][0] += 1
        return True
    return False


class _PhiTarget:
    """Outcome-model marginal likelihood as a function of the pathway states."""

    def __init__(self, ctx: ChainContext, st: ModelState):
        self.ctx = ctx
        self.r = ctx.outcome_residual(st)
        sc = ctx.scorer
        self.states = [sc.pathway_state(l, st.psi, st.phi) for l in range(ctx.L)]
        self.ll = self.loglik(self.states)

    def loglik(self, states) -> float:
        sc = self.ctx.scorer
        cols = []
        seen = set()
        for d, O in states:
            if d and O not in seen:
                seen.add(O)
                res = sc.score(O)
                if res is not None:
                    cols.append(res[1])
        S = np.column_stack(cols) if cols else None
        h = self.ctx.hyper
        return outcome_marginal_loglik(S, self.r, h.h, h.a0, h.b0)

    def flip(self, psi, phi, nodes, s):
        sc = self.ctx.scorer
        phi_new = phi.copy()
        phi_new[nodes] = 1 - s
        affected = sorted({l for k in nodes.tolist() for l in sc.pathways_of[k]})
        changes = []
        for l in affected:
            new = sc.pathway_state(l, psi, phi_new)
            if new != self.states[l]:
                changes.append((l, new))
        if not changes:
            return 0.0, None
        states = list(self.states)
        for l, new in changes:
            states[l] = new
        ll = self.loglik(states)
        return ll - self.ll, (states, ll)

    def commit(self, token):
        if token is not None:
            self.states, self.ll = token


def update_phi_sw(st: ModelState, ctx: ChainContext, rng) -> int:
    """Swendsen-Wang update of ``phi`` using the outcome-model marginal likelihood."""
    target = _PhiTarget(ctx, st)
    n = sw_sweep(
        st.phi,
        ctx.star_edges,
        st.rho_phi,
        ctx.site_log_odds("phi"),
        rng,
        flip_loglik=lambda nodes, s: target.flip(st.psi, st.phi, nodes, s),
        commit=target.commit,
    )
    return n


def update_theta(st: ModelState, ctx: ChainContext, rng, scores: LatentScores | None = None) -> None:
    """Normal draw of the group coefficients; each pathway gets its share."""
    scores = ctx.scores if scores is None else scores
    col = collapse_score_groups(scores)
    Ls = col.S_star.shape[1]
    if Ls == 0:
        st.theta = np.zeros(ctx.L)
        ctx.theta_star = np.zeros(0)
        return
    r = ctx.outcome_residual(st)
    S = col.S_star
    prec = S.T @ S / st.sigma2 + np.eye(Ls) / ctx.hyper.prior_var_reg
    ctx.theta_star = mvn_from_precision(prec, S.T @ r / st.sigma2, rng, "theta")
    st.theta = col.expand(ctx.theta_star)


def update_beta_betaZ(st: ModelState, ctx: ChainContext, rng, scores: LatentScores | None = None) -> None:
    """Joint normal draw of the exposure and covariate effects on the outcome."""
    scores = ctx.scores if scores is None else scores
    r = ctx.Y - scores.S @ st.theta
    W = ctx.outcome_design
    prec = ctx.outcome_gram / st.sigma2 + np.eye(W.shape[1]) / ctx.hyper.prior_var_reg
    draw = mvn_from_precision(prec, W.T @ r / st.sigma2, rng, "beta")
    st.beta = float(draw[0])
    st.beta_Z = draw[1:]


def update_sigma2(st: ModelState, ctx: ChainContext, rng, scores: LatentScores | None = None) -> None:
    """Inverse-Gamma draw of the outcome error variance."""
    scores = ctx.scores if scores is None else scores
    e = ctx.outcome_residual(st) - scores.S @ st.theta
    h = ctx.hyper
    st.sigma2 = float(_inv_gamma(h.a0 + 0.5 * ctx.n, h.b0 + 0.5 * float(e @ e), rng))


# ---------------------------------------------------------------------------
# chain driver


@dataclass(eq=False)
class ChainOutput:
    """Kept draws of one chain.

    Per-draw weights are stored as flat triplets: draw ``s`` owns the slice
    ``w_ptr[s]:w_ptr[s+1]`` of ``w_pathway``, ``w_metabolite`` and ``w_value``.
    ``gamma`` holds ``gamma_tilde`` on the DAG edges ``edges``; ``membership``
    lists each pathway's metabolite indices.
    """

    metabolites: tuple
    pathway_ids: tuple
    membership: tuple
    edges: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    delta: np.ndarray
    alpha: np.ndarray
    alpha_Z: np.ndarray
    gamma: np.ndarray
    sigma_k2: np.ndarray
    beta: np.ndarray
    beta_Z: np.ndarray
    theta: np.ndarray
    sigma2: np.ndarray
    rho: np.ndarray  # columns psi0, psi1, phi0, phi1
    w_ptr: np.ndarray
    w_pathway: np.ndarray
    w_metabolite: np.ndarray
    w_value: np.ndarray
    accept: dict
    xi: dict
    n_degenerate: int
    hyper: Hyperparameters
    n_iter: int
    n_burnin: int
    thin: int

    @property
    def n_samples(self) -> int:
        return self.psi.shape[0]

    @property
    def K(self) -> int:
        return len(self.metabolites)

    @property
    def L(self) -> int:
        return len(self.pathway_ids)

    def weight_matrix(self, s: int) -> np.ndarray:
        W = np.zeros((self.K, self.L))
        sl = slice(self.w_ptr[s], self.w_ptr[s + 1])
        W[self.w_metabolite[sl], self.w_pathway[sl]] = self.w_value[sl]
        return W

    def score_sets(self, s: int) -> list[tuple]:
        sets = [[] for _ in range(self.L)]
        sl = slice(self.w_ptr[s], self.w_ptr[s + 1])
        for l, k in zip(self.w_pathway[sl].tolist(), self.w_metabolite[sl].tolist()):
            sets[l].append(k)
        return [tuple(v) for v in sets]

    def gamma_tilde(self, s: int) -> np.ndarray:
        G = np.zeros((self.K, self.K))
        if len(self.edges):
            G[self.edges[:, 0], self.edges[:, 1]] = self.gamma[s]
        return G

    def state(self, s: int) -> ModelState:
        return ModelState(
            alpha=self.alpha[s].copy(),
            alpha_Z=self.alpha_Z[s].copy(),
            gamma_tilde=self.gamma_tilde(s),
            sigma_k2=self.sigma_k2[s].copy(),
            psi=self.psi[s].copy(),
            phi=self.phi[s].copy(),
            beta=float(self.beta[s]),
            beta_Z=self.beta_Z[s].copy(),
            theta=self.theta[s].copy(),
            sigma2=float(self.sigma2[s]),
            rho_psi=self.rho[s, :2].copy(),
            rho_phi=self.rho[s, 2:].copy(),
        )

    def acceptance_rates(self) -> dict:
        return {k: (a / t if t else float("nan")) for k, (a, t) in self.accept.items()}


class _Recorder:
    def __init__(self, n_keep, K, q, L, E):
        self.psi = np.zeros((n_keep, K), dtype=np.int8)
        self.phi = np.zeros((n_keep, K), dtype=np.int8)
        self.delta = np.zeros((n_keep, L), dtype=np.int8)
        self.alpha = np.zeros((n_keep, K))
        self.alpha_Z = np.zeros((n_keep, K, q))
        self.gamma = np.zeros((n_keep, E))
        self.sigma_k2 = np.zeros((n_keep, K))
        self.beta = np.zeros(n_keep)
        self.beta_Z = np.zeros((n_keep, q))
        self.theta = np.zeros((n_keep, L))
        self.sigma2 = np.zeros(n_keep)
        self.rho = np.zeros((n_keep, 4))
        self.w_ptr = [0]
        self.w = ([], [], [])

    def record(self, s, st: ModelState, scores: LatentScores, edges):
        self.psi[s] = st.psi
        self.phi[s] = st.phi
        self.delta[s] = scores.delta
        self.alpha[s] = st.alpha
        self.alpha_Z[s] = st.alpha_Z
        if len(edges):
            self.gamma[s] = st.gamma_tilde[edges[:, 0], edges[:, 1]]
        self.sigma_k2[s] = st.sigma_k2
        self.beta[s] = st.beta
        self.beta_Z[s] = st.beta_Z
        self.theta[s] = st.theta
        self.sigma2[s] = st.sigma2
        self.rho[s] = (*st.rho_psi, *st.rho_phi)
        count = 0
        for l, (O, w) in enumerate(zip(scores.score_sets, scores.weights)):
            if O:
                self.w[0].extend([l] * len(O))
                self.w[1].extend(O)
                self.w[2].extend(np.asarray(w).tolist())
                count += len(O)
        self.w_ptr.append(self.w_ptr[-1] + count)


STEPS = (
    ("1-psi", lambda st, ctx, rng: update_psi_sw(st, ctx, rng)),
    ("2-alpha", lambda st, ctx, rng: (update_sigma_k(st, ctx, rng, integrate_alpha=True), update_alpha(st, ctx, rng))),
    ("3-alphaZ-gamma", lambda st, ctx, rng: update_alphaZ_gamma(st, ctx, rng)),
    ("4-sigma_k", lambda st, ctx, rng: update_sigma_k(st, ctx, rng)),
    ("5-rho_psi", lambda st, ctx, rng: (update_rho_dmh("psi", 0, st, ctx, rng), update_rho_dmh("psi", 1, st, ctx, rng))),
    ("6-phi", lambda st, ctx, rng: (update_phi_sw(st, ctx, rng), ctx.refresh_scores(st))),
    ("7-theta", lambda st, ctx, rng: update_theta(st, ctx, rng)),
    ("8-beta", lambda st, ctx, rng: update_beta_betaZ(st, ctx, rng)),
    ("9-sigma2", lambda st, ctx, rng: update_sigma2(st, ctx, rng)),
    ("10-rho_phi", lambda st, ctx, rng: (update_rho_dmh("phi", 0, st, ctx, rng), update_rho_dmh("phi", 1, st, ctx, rng))),
)


def resolve_hyperparameters(dataset: Dataset, hyper: Hyperparameters, fdr_q: float = 0.05) -> Hyperparameters:
    """Fill unset Ising log-odds from marginal screening."""
    if hyper.eta_psi_1 is not None and hyper.eta_phi_1 is not None:
        return hyper
    e_psi, e_phi = screening_hyperparams(dataset, fdr_q)
    return hyper.replace(
        eta_psi_1=e_psi if hyper.eta_psi_1 is None else hyper.eta_psi_1,
        eta_phi_1=e_phi if hyper.eta_phi_1 is None else hyper.eta_phi_1,
    )


def run_chain(dataset: Dataset, graph: PathwayGraph, config: ChainConfig | None = None) -> ChainOutput:
    """Run one chain; identical inputs and seed give bit-identical output."""
    config = config or ChainConfig()
    dataset.check_graph(graph)
    hyper = resolve_hyperparameters(dataset, config.hyper, config.fdr_q)
    ctx = ChainContext(dataset, graph, hyper)
    rng = np.random.default_rng(hyper.seed)
    if config.init is not None:
        st = config.init.copy()
        if st.psi.shape != (ctx.K,) or st.theta.shape != (ctx.L,) or st.alpha_Z.shape != (ctx.K, ctx.q):
            raise InputError("initial state dimensions do not match the data and graph")
        st.psi = st.psi.astype(np.int8)
        st.phi = st.phi.astype(np.int8)
        st.rho_psi = np.asarray(st.rho_psi, dtype=float).copy()
        st.rho_phi = np.asarray(st.rho_phi, dtype=float).copy()
    else:
        st = initial_state(dataset, graph, hyper, config.fdr_q)
    ctx.refresh_scores(st)
    rec = _Recorder(config.n_keep, ctx.K, ctx.q, ctx.L, len(ctx.dag_edges))
    n_deg = 0
    s = 0
    for it in range(config.n_iter):
        for step, fn in STEPS:
            try:
                fn(st, ctx, rng)
            except SamplerError:
                raise
            except (PathmedError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                raise SamplerError(str(exc), it, step) from exc
        n_deg += ctx.scores.n_degenerate
        if config.adapt_xi and it < config.n_burnin and (it + 1) % ADAPT_WINDOW == 0:
            ctx.adapt()
        if it >= config.n_burnin and (it - config.n_burnin + 1) % config.thin == 0:
            rec.record(s, st, ctx.scores, ctx.dag_edges)
            s += 1
    if n_deg:
        logger.warning("degenerate pathway scores encountered %d time(s)", n_deg)
    return ChainOutput(
        metabolites=graph.metabolites,
        pathway_ids=graph.pathway_ids,
        membership=tuple(graph.membership[p] for p in graph.pathway_ids),
        edges=ctx.dag_edges,
        psi=rec.psi,
        phi=rec.phi,
        delta=rec.delta,
        alpha=rec.alpha,
        alpha_Z=rec.alpha_Z,
        gamma=rec.gamma,
        sigma_k2=rec.sigma_k2,
        beta=rec.beta,
        beta_Z=rec.beta_Z,
        theta=rec.theta,
        sigma2=rec.sigma2,
        rho=rec.rho,
        w_ptr=np.array(rec.w_ptr, dtype=np.int64),
        w_pathway=np.array(rec.w[0], dtype=np.int64),
        w_metabolite=np.array(rec.w[1], dtype=np.int64),
        w_value=np.array(rec.w[2], dtype=float),
        accept={k: tuple(v) for k, v in ctx.accept.items()},
        xi=dict(ctx.xi),
        n_degenerate=n_deg,
        hyper=hyper,
        n_iter=config.n_iter,
        n_burnin=config.n_burnin,
        thin=config.thin,
    )
