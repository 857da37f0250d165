"""Initial-composition posterior, synthetic observations and NUTS sampling.

Pipeline: draw a truth ensemble from a box-truncated Gaussian, push every
member through the reaction map to t_obs, summarize the evolved ensemble by
its mean and (co)variance, then sample the posterior over phi0 under a flat
prior on the truncation box. Sampling happens in an unconstrained space
obtained by a componentwise scaled-logistic map of the box.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import nuts as _nuts
from .stiffode import IntegrationError, SolverConfig, flow_map

log = logging.getLogger(__name__)

__all__ = [
    "BoxTransform",
    "InferenceResult",
    "ObservationError",
    "ObservationSummary",
    "Posterior",
    "PosteriorChain",
    "SamplerSettings",
    "SingularCovarianceError",
    "TruthSpec",
    "bounds_transform",
    "chain_rng",
    "evolve_ensemble",
    "generate_observation",
    "log_posterior",
    "nuts_sample",
    "run_chains",
    "run_inference",
    "sample_truth",
    "summarize",
    "truth_rng",
]

MODES = ("variance", "covariance")
DIVERGENCE_FLAG = 0.05


class ObservationError(RuntimeError):
    def __init__(self, member, cause):
        super().__init__(f"integration of ensemble member {member} failed: {cause}")
        self.member = member
        self.cause = cause


class SingularCovarianceError(np.linalg.LinAlgError):
    def __init__(self, min_eig, trace):
        super().__init__(f"observation covariance is singular: smallest eigenvalue "
                         f"{min_eig:.3e}, trace {trace:.3e}")
        self.min_eig = min_eig


@dataclass(frozen=True)
class TruthSpec:
    """Gaussian truth N(mu0, diag(s0^2)) truncated to mu0 -/+ 3 s0."""

    mu0: np.ndarray
    s0: np.ndarray
    n_truth: int = 1000
    width: float = 3.0

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float)
        s0 = np.asarray(self.s0, dtype=float)
        if mu0.ndim != 1 or s0.shape != mu0.shape:
            raise ValueError("mu0 and s0 must be 1-D of equal length")
        if np.any(s0 <= 0):
            raise ValueError("s0 must be positive")
        if self.n_truth < 2:
            raise ValueError("n_truth must be >= 2")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "s0", s0)

    @property
    def lower(self):
        return self.mu0 - self.width * self.s0

    @property
    def upper(self):
        return self.mu0 + self.width * self.s0

    @property
    def dim(self):
        return self.mu0.size

    def normalize(self, phi0):
        return (np.asarray(phi0) - self.mu0) / self.s0


def sample_truth(spec: TruthSpec, seed=None, n=None, rng=None):
    """i.i.d. truncated-Gaussian draws, shape (n, dim); out-of-box entries are redrawn."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = spec.n_truth if n is None else int(n)
    lo, hi = spec.lower, spec.upper
    x = spec.mu0 + spec.s0 * rng.standard_normal((n, spec.dim))
    bad = (x < lo) | (x > hi)
    while bad.any():
        x[bad] = (spec.mu0 + spec.s0 * rng.standard_normal((n, spec.dim)))[bad]
        bad = (x < lo) | (x > hi)
    return x


@dataclass(frozen=True)
class ObservationSummary:
    t_obs: float
    mu_obs: np.ndarray
    s_obs: np.ndarray
    Sigma_obs: np.ndarray
    corr: np.ndarray
    mode: str = "variance"
    n_members: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def with_mode(self, mode):
        return ObservationSummary(self.t_obs, self.mu_obs, self.s_obs, self.Sigma_obs,
                                  self.corr, mode, self.n_members)

    def to_dict(self):
        return {"t_obs": self.t_obs, "mode": self.mode, "n_members": self.n_members,
                "mu_obs": self.mu_obs.tolist(), "s_obs": self.s_obs.tolist(),
                "Sigma_obs": self.Sigma_obs.tolist(), "corr": self.corr.tolist()}


def summarize(samples, t_obs, mode="variance"):
    """Mean, std, covariance and correlation of an evolved ensemble (rows = members)."""
    x = np.asarray(samples, dtype=float)
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = 0.5 * (cov + cov.T)
    s = np.sqrt(np.diag(cov))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.outer(s, s)
    corr[~np.isfinite(corr)] = 0.0
    np.fill_diagonal(corr, 1.0)
    corr = np.clip(corr, -1.0, 1.0)
    return ObservationSummary(float(t_obs), mu, s, cov, corr, mode, len(x))


def evolve_ensemble(ensemble, model, t_out, cfg: SolverConfig | None = None):
    """Push every member to the times ``t_out``; returns shape (n_members, n_t, n)."""
    t_out = np.atleast_1d(np.asarray(t_out, dtype=float))
    out = np.empty((len(ensemble), len(t_out), ensemble.shape[1]))
    for i, phi0 in enumerate(ensemble):
        try:
            out[i] = flow_map(model, phi0, t_out, cfg)
        except IntegrationError as exc:
            raise ObservationError(i, exc) from exc
    return out


def generate_observation(ensemble, model, t_obs, mode="variance",
                         cfg: SolverConfig | None = None) -> ObservationSummary:
    if t_obs <= 0:
        raise ValueError("t_obs must be > 0")
    y = evolve_ensemble(np.asarray(ensemble, dtype=float), model, [t_obs], cfg)[:, 0]
    return summarize(y, t_obs, mode)


class BoxTransform:
    """phi = lo + (hi - lo) * expit(z), applied componentwise."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.width = self.upper - self.lower
        if np.any(self.width <= 0):
            raise ValueError("box must have upper > lower in every component")

    def to_z(self, phi):
        phi = np.asarray(phi, dtype=float)
        u = (phi - self.lower) / self.width
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise ValueError("point on or outside the box boundary has no finite image")
        z = np.log(u) - np.log1p(-u)
        return z, self.log_jacobian(z)

    def to_phi(self, z):
        z = np.asarray(z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("z must be finite")
        return self.lower + self.width * expit(z), self.log_jacobian(z)

    def log_jacobian(self, z):
        # log|d phi / d z| = sum log(w) + log s + log(1 - s), written stably
        z = np.asarray(z, dtype=float)
        return float(np.sum(np.log(self.width) - np.logaddexp(0.0, z) - np.logaddexp(0.0, -z)))

    def grad_log_jacobian(self, z):
        return 1.0 - 2.0 * expit(z)

    def dphi_dz(self, z):
        s = expit(z)
        return self.width * s * (1.0 - s)


def bounds_transform(value, lower, upper, inverse=False):
    """Map phi0 -> (z, log-Jacobian), or z -> (phi0, log-Jacobian) with ``inverse=True``."""
    t = BoxTransform(lower, upper)
    return t.to_phi(value) if inverse else t.to_z(value)


class Posterior:
    """Gaussian likelihood around mu_obs with a flat prior on the truth box.

    In variance mode the covariance is diag(s_obs^2); in covariance mode the
    full ensemble covariance is used. When the smallest eigenvalue falls
    below 1e-12 * trace a jitter of that size is added and recorded in
    ``jitter``.
    """

    def __init__(self, model, obs: ObservationSummary, lower, upper, mode=None,
                 cfg: SolverConfig | None = None):
        self.model = model
        self.obs = obs
        self.mode = mode or obs.mode
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.cfg = cfg or SolverConfig()
        self.transform = BoxTransform(lower, upper)
        Sigma = obs.Sigma_obs if self.mode == "covariance" else np.diag(obs.s_obs ** 2)
        Sigma = np.array(Sigma, dtype=float)
        tr = float(np.trace(Sigma))
        eig = np.linalg.eigvalsh(Sigma)
        self.jitter = 0.0
        if not tr > 0 or not np.isfinite(tr):
            raise SingularCovarianceError(float(eig.min()), tr)
        if eig.min() < 1e-12 * tr:
            self.jitter = 1e-12 * tr
            log.info("observation covariance regularized: min eig %.3e, jitter %.3e",
                     eig.min(), self.jitter)
            Sigma = Sigma + self.jitter * np.eye(len(Sigma))
        self.Sigma = Sigma
        try:
            c = np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(float(eig.min()), tr) from None
        ci = np.linalg.inv(c)
        self.precision = ci.T @ ci
        self.n_eval = 0
        self.n_fail = 0

    @property
    def lower(self):
        return self.transform.lower

    @property
    def upper(self):
        return self.transform.upper

    def log_density(self, phi0):
        """(log density, gradient) in phi0 space; -inf outside the box or on solver failure."""
        phi0 = np.asarray(phi0, dtype=float)
        if np.any(phi0 <= self.lower) or np.any(phi0 >= self.upper):
            return -math.inf, np.zeros_like(phi0)
        self.n_eval += 1
        try:
            y, A = flow_map(self.model, phi0, [self.obs.t_obs], self.cfg, with_sens=True)
        except IntegrationError:
            self.n_fail += 1
            return -math.inf, np.zeros_like(phi0)
        r = y[0] - self.obs.mu_obs
        Pr = self.precision @ r
        return -0.5 * float(r @ Pr), -(A[0].T @ Pr)

    def log_density_z(self, z):
        phi, logj = self.transform.to_phi(z)
        lp, g = self.log_density(phi)
        if not math.isfinite(lp):
            return -math.inf, np.zeros_like(z)
        gz = g * self.transform.dphi_dz(z) + self.transform.grad_log_jacobian(z)
        return lp + logj, gz

    __call__ = log_density


def log_posterior(phi0, obs: ObservationSummary, model, lower, upper, mode=None, cfg=None):
    return Posterior(model, obs, lower, upper, mode, cfg).log_density(phi0)


@dataclass(frozen=True)
class SamplerSettings:
    n_warmup: int = 500
    n_draws: int = 1000
    n_chains: int = 4
    max_tree_depth: int = 10
    delta: float = 0.8
    adapt_metric: bool = False

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.n_draws < 1 or self.n_chains < 1 or self.n_warmup < 0:
            raise ValueError("n_draws, n_chains must be >= 1 and n_warmup >= 0")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass(frozen=True)
class PosteriorChain:
    draws: np.ndarray
    log_density: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    divergent: np.ndarray
    step_size: float
    seed: object = None
    z_draws: np.ndarray | None = field(default=None, repr=False)
    n_grad: int = 0

    @property
    def divergence_fraction(self):
        return float(np.mean(self.divergent))

    @property
    def flagged(self):
        return self.divergence_fraction > DIVERGENCE_FLAG

    def diagnostics(self):
        return {"step_size": self.step_size, "mean_accept_stat": float(np.mean(self.accept_stat)),
                "mean_tree_depth": float(np.mean(self.tree_depth)),
                "divergence_fraction": self.divergence_fraction, "flagged": self.flagged,
                "n_grad": self.n_grad}


def nuts_sample(logpost, init, n_warmup=500, n_draws=1000, delta_acc=0.8, max_tree_depth=10,
                seed=None, adapt_metric=False, transform=None) -> PosteriorChain:
    """One NUTS chain on ``logpost`` (returning (lp, grad)).

    With ``transform`` the chain runs in z-space and draws are mapped back
    to phi0 via ``transform.to_phi``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    res = _nuts.nuts(logpost, init, n_warmup, n_draws, delta_acc, max_tree_depth, rng=rng,
                     adapt_metric=adapt_metric)
    if transform is not None:
        draws = np.array([transform.to_phi(z)[0] for z in res.draws])
        zs = res.draws
    else:
        draws, zs = res.draws, None
    return PosteriorChain(draws, res.lp, res.accept_stat, res.tree_depth, res.divergent,
                          res.step_size, None if isinstance(seed, np.random.Generator) else seed,
                          zs, res.n_grad)


@dataclass
class InferenceResult:
    spec: TruthSpec
    observation: ObservationSummary
    chains: list
    settings: SamplerSettings
    seed: int | None = None
    jitter: float = 0.0
    truth: np.ndarray | None = field(default=None, repr=False)

    @property
    def draws(self):
        return np.concatenate([c.draws for c in self.chains])

    @property
    def normalized_draws(self):
        return self.spec.normalize(self.draws)

    @property
    def normalized_truth(self):
        return None if self.truth is None else self.spec.normalize(self.truth)

    def chain_array(self):
        """Draws as (n_chains, n_draws, dim)."""
        return np.array([c.draws for c in self.chains])

    def diagnostics(self):
        arr = self.chain_array()
        dim = arr.shape[2]
        rhat = [_nuts.split_rhat(arr[:, :, k]) for k in range(dim)]
        ess = [_nuts.effective_sample_size(arr[:, :, k]) for k in range(dim)]
        return {"rhat": rhat, "ess": ess,
                "max_rhat": float(np.nanmax(rhat)), "min_ess": float(np.min(ess)),
                "jitter": self.jitter,
                "chains": [c.diagnostics() for c in self.chains]}

    def __iter__(self):
        # allows ``chains, obs = run_inference(...)``
        yield self.chains
        yield self.observation


def chain_rng(seed, chain):
    return np.random.default_rng([0 if seed is None else int(seed), 1, int(chain)])


def truth_rng(seed):
    return np.random.default_rng([0 if seed is None else int(seed), 0])


def _initial_z(post, rng, tries=100):
    for _ in range(tries):
        z = rng.uniform(-2.0, 2.0, post.transform.lower.size)
        lp, _ = post.log_density_z(z)
        if math.isfinite(lp):
            return z
    raise _nuts.SamplerError("no finite-density initial point found in 100 tries")


def run_chains(post: Posterior, settings: SamplerSettings, seed=None, threads=1):
    def one(c):
        rng = chain_rng(seed, c)
        z0 = _initial_z(post, rng)
        ch = nuts_sample(post.log_density_z, z0, settings.n_warmup, settings.n_draws,
                         settings.delta, settings.max_tree_depth, rng,
                         settings.adapt_metric, post.transform)
        return PosteriorChain(ch.draws, ch.log_density, ch.accept_stat, ch.tree_depth,
                              ch.divergent, ch.step_size, (seed, c), ch.z_draws, ch.n_grad)

    if threads > 1 and settings.n_chains > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chains = list(ex.map(one, range(settings.n_chains)))
    else:
        chains = [one(c) for c in range(settings.n_chains)]
    for c in chains:
        if c.flagged:
            log.warning("chain %s: %.1f%% divergent transitions", c.seed,
                        100 * c.divergence_fraction)
    return chains


def run_inference(spec: TruthSpec, model, t_obs, mode="variance",
                  settings: SamplerSettings | None = None, seed=None,
                  cfg: SolverConfig | None = None, truth=None, observation=None,
                  threads=1) -> InferenceResult:
    """Truth ensemble -> observation summary -> posterior draws.

    ``truth`` or ``observation`` may be passed to reuse work across runs
    (e.g. a sweep over t_obs shares one truth ensemble).
    """
    settings = settings or SamplerSettings()
    if truth is None:
        truth = sample_truth(spec, rng=truth_rng(seed))
    if observation is None:
        observation = generate_observation(truth, model, t_obs, mode, cfg)
    observation = observation.with_mode(mode)
    post = Posterior(model, observation, spec.lower, spec.upper, mode, cfg)
    chains = run_chains(post, settings, seed, threads)
    return InferenceResult(spec, observation, chains, settings, seed, post.jitter, truth)
