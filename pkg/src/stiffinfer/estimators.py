"""scikit-learn style wrappers around the inference and rank-analysis pipelines.

``InitialCompositionInference.fit(X)`` treats rows of X as evolved
observation samples at ``t_obs`` and samples the posterior over the initial
composition. ``SubspaceRankAnalyzer.fit(X)`` takes initial compositions and
``transform`` returns the reaction-block singular values over time.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bayes import Posterior, SamplerSettings, TruthSpec, run_chains, summarize
from .manifold import DEFAULT_RANK_THRESHOLD, conserved_basis, rank_descent_times
from .metrics import verdict_from_draws
from .stiffode import SolverConfig, integrate_with_sensitivity

__all__ = ["InitialCompositionInference", "SubspaceRankAnalyzer"]


class InitialCompositionInference(BaseEstimator):
    """Posterior over phi0 from observation samples.

    Parameters mirror :class:`SamplerSettings`; ``model`` is a reactor model,
    ``mu0``/``s0`` define the truth box (mu0 -/+ 3 s0, which is also the
    prior support).
    """

    def __init__(self, model=None, mu0=None, s0=None, t_obs=1e-4, mode="variance",
                 n_warmup=500, n_draws=1000, n_chains=4, max_tree_depth=10, delta=0.8,
                 rtol=1e-6, random_state=0):
        self.model = model
        self.mu0 = mu0
        self.s0 = s0
        self.t_obs = t_obs
        self.mode = mode
        self.n_warmup = n_warmup
        self.n_draws = n_draws
        self.n_chains = n_chains
        self.max_tree_depth = max_tree_depth
        self.delta = delta
        self.rtol = rtol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        spec = TruthSpec(self.mu0, self.s0)
        if X.shape[1] != spec.dim:
            raise ValueError(f"X has {X.shape[1]} columns, expected {spec.dim}")
        obs = summarize(X, self.t_obs, self.mode)
        cfg = SolverConfig(rtol=self.rtol, atol_sens=0.0)
        post = Posterior(self.model, obs, spec.lower, spec.upper, self.mode, cfg)
        settings = SamplerSettings(self.n_warmup, self.n_draws, self.n_chains,
                                   self.max_tree_depth, self.delta)
        self.chains_ = run_chains(post, settings, self.random_state)
        self.truth_spec_ = spec
        self.observation_ = obs
        self.draws_ = np.concatenate([c.draws for c in self.chains_])
        self.posterior_mean_ = self.draws_.mean(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self):
        check_is_fitted(self, "draws_")
        return self.draws_

    def failure_verdict(self, names=None):
        check_is_fitted(self, "draws_")
        names = names or list(getattr(self.model, "species_names", range(self.n_features_in_)))
        return verdict_from_draws(self.truth_spec_.normalize(self.draws_), [str(n) for n in names])


class SubspaceRankAnalyzer(TransformerMixin, BaseEstimator):
    """Singular values of W^T A W along trajectories started from each row of X.

    ``transform`` returns an array of shape (n_samples, n_times, n_reaction).
    """

    def __init__(self, model=None, times=None, threshold=DEFAULT_RANK_THRESHOLD, rtol=1e-8):
        self.model = model
        self.times = times
        self.threshold = threshold
        self.rtol = rtol

    def fit(self, X, y=None):
        X = check_array(X)
        self.basis_ = conserved_basis(self.model.element_matrix())
        if X.shape[1] != self.basis_.Q.shape[0]:
            raise ValueError(f"X has {X.shape[1]} columns, model has {self.basis_.Q.shape[0]}")
        self.times_ = np.asarray(self.times, dtype=float)
        self.n_features_in_ = X.shape[1]
        return self

    def _report(self, x):
        cfg = SolverConfig(rtol=self.rtol)
        sens = integrate_with_sensitivity(self.model, x, self.times_[-1], cfg, t_out=self.times_)
        return rank_descent_times(sens, self.basis_, self.threshold, times=self.times_)

    def transform(self, X):
        check_is_fitted(self, "basis_")
        X = check_array(X)
        self.reports_ = [self._report(x) for x in X]
        return np.array([r.sigma_waw for r in self.reports_])

    def descent_times(self, X):
        """W^T A W rank-descent times for each row of X."""
        self.transform(X)
        return [r.descent_times("WAW") for r in self.reports_]
