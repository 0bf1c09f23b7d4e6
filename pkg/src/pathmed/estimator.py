"""scikit-learn style wrapper around the sampler."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .effects import summarize
from .exceptions import InputError
from .graph import PathwayGraph, ReactionRecord, build_pathway_graph
from .model import Dataset, Hyperparameters, standardize
from .sampler import ChainConfig, run_chain

__all__ = ["PathwayMediation"]


class PathwayMediation(BaseEstimator, TransformerMixin):
    """Bayesian pathway-guided mediation model.

    Parameters
    ----------
    graph : PathwayGraph or sequence of ReactionRecord
        Pathway structure. Reaction records are built into a graph whose
        metabolite order must match the columns of ``X`` (see ``metabolite_ids``).
    metabolite_ids : sequence of str, optional
        Column names of ``X``; required when ``graph`` is given as reactions.
    n_iter, n_burnin, thin : int
        MCMC length, burn-in and thinning.
    h, a0, b0 : float
        Prior variance scale and inverse-gamma shape/rate.
    eta_psi, eta_phi : float or None
        Ising sparsity log-odds; ``None`` elicits them by FDR screening at
        level ``fdr_q``.
    ising_field : {"log-odds", "literal"}
        How the log-odds enter the Ising prior; see :class:`Hyperparameters`.
    xi : float
        Initial log-normal proposal variance for the interaction parameters.
    dmh_sweeps : int
        Gibbs sweeps used to simulate each auxiliary Ising configuration.
    adapt_xi : bool
        Tune ``xi`` during burn-in.
    fdr_q : float
        Screening FDR level.
    standardize : bool
        Standardize metabolite columns (mean 0, sd 1) before fitting.
    threshold : float
        Inclusion probability threshold for pathway selection.
    random_state : int
        Seed for the chain.

    Attributes
    ----------
    chain_ : ChainOutput
    summary_ : PosteriorSummary
    graph_ : PathwayGraph
    psi_prob_, phi_prob_ : ndarray of shape (n_features,)
    delta_prob_ : ndarray of shape (n_pathways,)
    selected_pathways_ : list of str
    effects_ : dict
        ``{"NDE"|"NIE"|"TE": (mean, lower, upper)}`` for the unit contrast.
    mean_, scale_ : ndarray of shape (n_features,)
        Standardization applied to ``X`` (zeros and ones when disabled).
    """

    def __init__(
        self,
        graph=None,
        metabolite_ids=None,
        n_iter: int = 2000,
        n_burnin: int = 1000,
        thin: int = 1,
        h: float = 10.0,
        a0: float = 0.01,
        b0: float = 0.01,
        eta_psi=None,
        eta_phi=None,
        ising_field: str = "log-odds",
        xi: float = 0.0625,
        dmh_sweeps: int = 1,
        adapt_xi: bool = True,
        fdr_q: float = 0.05,
        standardize: bool = True,
        threshold: float = 0.5,
        random_state: int = 0,
    ):
        self.graph = graph
        self.metabolite_ids = metabolite_ids
        self.n_iter = n_iter
        self.n_burnin = n_burnin
        self.thin = thin
        self.h = h
        self.a0 = a0
        self.b0 = b0
        self.eta_psi = eta_psi
        self.eta_phi = eta_phi
        self.ising_field = ising_field
        self.xi = xi
        self.dmh_sweeps = dmh_sweeps
        self.adapt_xi = adapt_xi
        self.fdr_q = fdr_q
        self.standardize = standardize
        self.threshold = threshold
        self.random_state = random_state

    # -- validation -------------------------------------------------------

    def _resolve_graph(self, K: int) -> PathwayGraph:
        g = self.graph
        if g is None:
            raise InputError("graph is required")
        if isinstance(g, PathwayGraph):
            if self.metabolite_ids is not None and tuple(self.metabolite_ids) != g.metabolites:
                raise InputError("metabolite_ids do not match the graph's metabolite order")
        else:
            reactions = list(g)
            if not all(isinstance(r, ReactionRecord) for r in reactions):
                raise InputError("graph must be a PathwayGraph or a sequence of ReactionRecord")
            if self.metabolite_ids is None:
                raise InputError("metabolite_ids is required when graph is given as reactions")
            g = build_pathway_graph(reactions, self.metabolite_ids)
        if g.K != K:
            raise InputError(f"X has {K} columns but the graph has {g.K} metabolites")
        return g

    def _config(self) -> ChainConfig:
        if not isinstance(self.random_state, numbers.Integral) or isinstance(self.random_state, bool):
            raise InputError("random_state must be an integer")
        if not 0 < self.threshold <= 1:
            raise InputError("threshold must be in (0, 1]")
        hyper = Hyperparameters(
            h=self.h,
            a0=self.a0,
            b0=self.b0,
            eta_psi_1=self.eta_psi,
            eta_phi_1=self.eta_phi,
            xi=self.xi,
            seed=int(self.random_state),
            ising_field=self.ising_field,
            dmh_sweeps=self.dmh_sweeps,
        )
        return ChainConfig(
            n_iter=self.n_iter,
            n_burnin=self.n_burnin,
            thin=self.thin,
            hyper=hyper,
            adapt_xi=self.adapt_xi,
            fdr_q=self.fdr_q,
        )

    @staticmethod
    def _vector(v, name, n):
        v = check_array(np.asarray(v, dtype=float).reshape(-1, 1), input_name=name).ravel()
        if v.shape[0] != n:
            raise InputError(f"{name} has {v.shape[0]} entries, expected {n}")
        return v

    @staticmethod
    def _covariates(covariates, n):
        if covariates is None:
            return None
        C = check_array(covariates, ensure_2d=False, input_name="covariates")
        C = C.reshape(n, -1) if C.ndim == 1 else C
        if C.shape[0] != n:
            raise InputError(f"covariates have {C.shape[0]} rows, expected {n}")
        return C

    def _scaled(self, X):
        check_is_fitted(self, "chain_")
        X = check_array(X, dtype=float, input_name="X")
        if X.shape[1] != self.n_features_in_:
            raise InputError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return (X - self.mean_) / self.scale_

    # -- estimator API ----------------------------------------------------

    def fit(self, X, y, exposure=None, covariates=None):
        """Fit the model.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
            Metabolite abundances, columns in graph order.
        y : array-like of shape (n_samples,)
            Outcome.
        exposure : array-like of shape (n_samples,)
        covariates : array-like of shape (n_samples, p), optional
            Confounders; an intercept is added automatically.

        Returns
        -------
        self
        """
        if exposure is None:
            raise InputError("exposure is required")
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        n, K = X.shape
        x = self._vector(exposure, "exposure", n)
        C = self._covariates(covariates, n)
        graph = self._resolve_graph(K)
        config = self._config()
        if self.standardize:
            Ms, mean, sd = standardize(X)
        else:
            Ms, mean, sd = X, np.zeros(K), np.ones(K)
        data = Dataset.from_arrays(x, y, Ms, C)
        chain = run_chain(data, graph, config)
        summ = summarize(chain, graph, threshold=self.threshold)
        self.graph_ = graph
        self.chain_ = chain
        self.summary_ = summ
        self.mean_ = mean
        self.scale_ = sd
        self.n_features_in_ = K
        self.n_covariates_ = 0 if C is None else C.shape[1]
        self.psi_prob_ = summ.psi_prob
        self.phi_prob_ = summ.phi_prob
        self.delta_prob_ = summ.delta_prob
        self.selected_pathways_ = [graph.pathway_ids[l] for l in summ.selected]
        self.effects_ = dict(summ.effects)
        return self

    def mean_weights(self) -> np.ndarray:
        """Posterior mean of the ``(n_features, n_pathways)`` score-weight matrix."""
        check_is_fitted(self, "chain_")
        ch = self.chain_
        W = np.zeros((ch.K, ch.L))
        for s in range(ch.n_samples):
            W += ch.weight_matrix(s)
        return W / max(ch.n_samples, 1)

    def transform(self, X):
        """Posterior-mean latent pathway scores, shape ``(n_samples, n_pathways)``."""
        return self._scaled(X) @ self.mean_weights()

    def predict(self, X, exposure=None, covariates=None):
        """Posterior mean of the outcome's conditional expectation."""
        Ms = self._scaled(X)
        n = Ms.shape[0]
        if exposure is None:
            raise InputError("exposure is required")
        x = self._vector(exposure, "exposure", n)
        C = self._covariates(covariates, n)
        p = 0 if C is None else C.shape[1]
        if p != self.n_covariates_:
            raise InputError(f"expected {self.n_covariates_} covariate columns, got {p}")
        Z = np.ones((n, 1)) if C is None else np.hstack([np.ones((n, 1)), C])
        ch = self.chain_
        out = np.zeros(n)
        for s in range(ch.n_samples):
            out += ch.beta[s] * x + Z @ ch.beta_Z[s] + Ms @ (ch.weight_matrix(s) @ ch.theta[s])
        return out / ch.n_samples

    def effects(self, x: float = 1.0, x_star: float = 0.0, level: float = 0.95) -> dict:
        """Posterior mean and equal-tailed interval of NDE, NIE and TE for ``x`` vs ``x_star``."""
        check_is_fitted(self, "chain_")
        return dict(summarize(self.chain_, self.graph_, x=x, x_star=x_star, level=level).effects)
