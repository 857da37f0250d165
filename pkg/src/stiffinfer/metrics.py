"""Histogram densities, KL / Jensen-Shannon comparisons and the inference-failure test.

All comparisons are made on marginals of normalized draws (phi0 - mu0) / s0
binned on a shared uniform grid (64 bins over [-3.5, 3.5] by default). The
KL sum runs only over bins where both masses are nonzero.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .bayes import (SamplerSettings, evolve_ensemble, run_inference, sample_truth, summarize,
                    truth_rng)

log = logging.getLogger(__name__)

__all__ = [
    "FailureVerdict",
    "MarginalDensity",
    "SpeciesVerdict",
    "SweepResult",
    "correlation_track",
    "estimate_marginal",
    "failure_time_sweep",
    "failure_verdict",
    "js_distance",
    "kl_divergence",
    "prior_density",
    "truth_density",
]

SUPPORT = (-3.5, 3.5)
N_BINS = 64
MIN_SAMPLES = 100
FAILURE_THRESHOLD = 0.2


@dataclass(frozen=True)
class MarginalDensity:
    edges: np.ndarray
    probs: np.ndarray
    n_samples: int = 0
    n_clipped: int = 0

    @property
    def support(self):
        return float(self.edges[0]), float(self.edges[-1])

    @property
    def bins(self):
        return len(self.probs)

    def check_compatible(self, other):
        if self.edges.shape != other.edges.shape or not np.array_equal(self.edges, other.edges):
            raise ValueError("densities use different binning")


def _edges(bins, support):
    lo, hi = support
    if not hi > lo:
        raise ValueError("support must have hi > lo")
    return np.linspace(lo, hi, int(bins) + 1)


def estimate_marginal(samples, bins=N_BINS, support=SUPPORT, min_samples=MIN_SAMPLES):
    """Histogram pmf of 1-D normalized draws; out-of-support draws go to the edge bins."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    if x.size < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {x.size}")
    edges = _edges(bins, support)
    lo, hi = edges[0], edges[-1]
    clipped = int(np.sum((x < lo) | (x > hi)))
    counts, _ = np.histogram(np.clip(x, lo, hi), bins=edges)
    return MarginalDensity(edges, counts / counts.sum(), x.size, clipped)


def density_from_cdf(cdf, bins=N_BINS, support=SUPPORT):
    edges = _edges(bins, support)
    p = np.diff(cdf(edges))
    p = np.clip(p, 0.0, None)
    return MarginalDensity(edges, p / p.sum())


def truth_density(bins=N_BINS, support=SUPPORT, width=3.0):
    """Standard normal truncated to [-width, width], integrated over each bin."""
    return density_from_cdf(stats.truncnorm(-width, width).cdf, bins, support)


def prior_density(bins=N_BINS, support=SUPPORT, width=3.0):
    """Uniform on [-width, width], integrated over each bin."""
    return density_from_cdf(stats.uniform(-width, 2 * width).cdf, bins, support)


def kl_divergence(P: MarginalDensity, Q: MarginalDensity, base=10, return_info=False):
    """sum_D P log(P/Q) over bins where both are nonzero.

    With ``return_info`` also returns a dict with ``empty_overlap`` and the
    mass of P excluded from the sum.
    """
    P.check_compatible(Q)
    p, q = P.probs, Q.probs
    d = (p > 0) & (q > 0)
    val = float(np.sum(p[d] * np.log(p[d] / q[d])) / math.log(base)) if d.any() else 0.0
    if not return_info:
        return val
    return val, {"empty_overlap": not d.any(), "excluded_mass": float(p[~d].sum())}


def js_distance(P: MarginalDensity, Q: MarginalDensity, base=10):
    """sqrt(KL(P||M)/2 + KL(Q||M)/2) with M the bin-wise average."""
    P.check_compatible(Q)
    M = MarginalDensity(P.edges, 0.5 * (P.probs + Q.probs))
    v = 0.5 * kl_divergence(P, M, base) + 0.5 * kl_divergence(Q, M, base)
    return math.sqrt(max(v, 0.0))


@dataclass(frozen=True)
class SpeciesVerdict:
    species: str
    jsd_truth: float
    jsd_prior: float
    difference: float
    failed: bool


@dataclass(frozen=True)
class FailureVerdict:
    species: list
    threshold: float = FAILURE_THRESHOLD
    base: float = 2

    def __getitem__(self, name):
        for v in self.species:
            if v.species == name:
                return v
        raise KeyError(name)

    @property
    def failed(self):
        return [v.species for v in self.species if v.failed]

    def to_dict(self):
        return {"threshold": self.threshold, "base": self.base,
                "species": {v.species: {"jsd_truth": v.jsd_truth, "jsd_prior": v.jsd_prior,
                                        "difference": v.difference, "failed": v.failed}
                            for v in self.species}}


def failure_verdict(truth, prior, post, threshold=FAILURE_THRESHOLD, base=2, names=None):
    """Apply D_JS(truth||post) - D_JS(prior||post) > threshold per species.

    Each argument is a MarginalDensity or a list of them (one per species).
    The default log base is 2 so that the distance spans [0, 1].
    """
    single = isinstance(post, MarginalDensity)
    posts = [post] if single else list(post)
    n = len(posts)
    truths = [truth] * n if isinstance(truth, MarginalDensity) else list(truth)
    priors = [prior] * n if isinstance(prior, MarginalDensity) else list(prior)
    names = list(names) if names is not None else [str(i) for i in range(n)]
    out = []
    for name, t, p, q in zip(names, truths, priors, posts):
        jt = js_distance(t, q, base)
        jp = js_distance(p, q, base)
        out.append(SpeciesVerdict(name, jt, jp, jt - jp, bool(jt - jp > threshold)))
    return FailureVerdict(out, threshold, base)


def verdict_from_draws(normalized_draws, names, bins=N_BINS, support=SUPPORT,
                       threshold=FAILURE_THRESHOLD, base=2, truth=None, prior=None):
    """Verdict for every column of normalized posterior draws against analytic truth/prior."""
    x = np.asarray(normalized_draws, dtype=float)
    truth = truth or truth_density(bins, support)
    prior = prior or prior_density(bins, support)
    posts = [estimate_marginal(x[:, k], bins, support) for k in range(x.shape[1])]
    return failure_verdict(truth, prior, posts, threshold, base, names)


@dataclass
class SweepResult:
    mode: str
    t_grid: np.ndarray
    species: list
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    HEADER = ("t_obs", "species", "jsd_truth", "jsd_prior", "failed")

    def critical_times(self):
        """First grid time at which each species failed (None if never)."""
        out = {s: None for s in self.species}
        for t, s, _, _, failed in self.rows:
            if failed and out.get(s) is None:
                out[s] = t
        return out

    def to_dict(self):
        crit = self.critical_times()
        return {"mode": self.mode, "t_grid": list(map(float, self.t_grid)),
                "critical_times": crit,
                "log10_critical_times": {k: (None if v is None else round(math.log10(v), 3))
                                         for k, v in crit.items()},
                "diagnostics": self.diagnostics}


def failure_time_sweep(scenario, t_grid=None, mode="variance", species=None, seed=0,
                       settings: SamplerSettings | None = None, cfg=None, threshold=FAILURE_THRESHOLD,
                       base=2, bins=N_BINS, stop_on_failure=False, threads=1, progress=None):
    """Run inference at every grid time and record per-species verdicts.

    One truth ensemble (seeded by ``seed``) is shared across the grid. With
    ``stop_on_failure`` the sweep ends once every requested species has
    failed, since later points cannot change the critical times.
    """
    t_grid = np.asarray(scenario.t_grid if t_grid is None else t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing")
    names = list(scenario.species_names)
    wanted = names if species is None else [species] if isinstance(species, str) else list(species)
    idx = [names.index(s) for s in wanted]
    settings = settings or scenario.sampler
    cfg = cfg or scenario.solver
    spec = scenario.truth
    truth = sample_truth(spec, rng=truth_rng(seed))
    evolved = evolve_ensemble(truth, scenario.model, t_grid, cfg)
    tdens, pdens = truth_density(bins), prior_density(bins)
    res = SweepResult(mode, t_grid, wanted)
    failed_any = set()
    for i, t in enumerate(t_grid):
        obs = summarize(evolved[:, i], t, mode)
        inf = run_inference(spec, scenario.model, t, mode, settings, seed, cfg, truth, obs,
                            threads)
        z = inf.normalized_draws[:, idx]
        v = verdict_from_draws(z, wanted, bins, threshold=threshold, base=base,
                               truth=tdens, prior=pdens)
        for sv in v.species:
            res.rows.append((float(t), sv.species, sv.jsd_truth, sv.jsd_prior, sv.failed))
            if sv.failed:
                failed_any.add(sv.species)
        d = inf.diagnostics()
        res.diagnostics.append({"t_obs": float(t), "max_rhat": d["max_rhat"],
                                "min_ess": d["min_ess"], "jitter": d["jitter"]})
        if progress is not None:
            progress(t, v)
        if stop_on_failure and failed_any.issuperset(wanted):
            break
    return res


def correlation_track(scenario, t_grid=None, seed=0, n=None, cfg=None):
    """Pearson correlation matrices of the evolved truth ensemble, shape (n_t, n_s, n_s)."""
    t_grid = np.asarray(scenario.t_grid if t_grid is None else t_grid, dtype=float)
    truth = sample_truth(scenario.truth, rng=truth_rng(seed), n=n)
    evolved = evolve_ensemble(truth, scenario.model, t_grid, cfg or scenario.solver)
    return t_grid, np.array([summarize(evolved[:, i], t).corr for i, t in enumerate(t_grid)])
