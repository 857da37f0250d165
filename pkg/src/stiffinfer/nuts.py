"""No-U-Turn Sampler with multinomial trajectory sampling and dual averaging.

This follows the "efficient NUTS" variant used by Stan: the trajectory is
grown by doubling in a random direction, states within a subtree are chosen
multinomially in proportion to exp(-H), the top-level merge uses biased
progressive sampling, and termination uses the generalized U-turn criterion
on summed momenta with the additional checks across subtree boundaries.
Step size is tuned during warmup by dual averaging; a diagonal inverse
metric can optionally be estimated in Stan-style expanding windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NUTSResult",
    "DualAveraging",
    "effective_sample_size",
    "nuts",
    "split_rhat",
]

MAX_ENERGY_ERROR = 1000.0


class SamplerError(RuntimeError):
    pass


@dataclass
class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance rate."""

    eps0: float
    delta: float = 0.8
    gamma: float = 0.05
    t0: float = 10.0
    kappa: float = 0.75
    mu: float = field(init=False)
    h_bar: float = field(default=0.0, init=False)
    log_eps_bar: float = field(default=0.0, init=False)
    count: int = field(default=0, init=False)

    def __post_init__(self):
        self.mu = math.log(10.0 * self.eps0)

    def restart(self, eps0):
        self.eps0 = eps0
        self.mu = math.log(10.0 * eps0)
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept_stat):
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.delta - accept_stat)
        log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


class _Tree:
    __slots__ = ("z_m", "r_m", "g_m", "z_p", "r_p", "g_p", "z_prop", "lp_prop", "g_prop",
                 "logw", "rho", "n", "sum_acc", "turning", "divergent")


def _uturn(rho, r_minus, r_plus, inv_metric):
    return (np.dot(inv_metric * r_plus, rho) <= 0.0) or (np.dot(inv_metric * r_minus, rho) <= 0.0)


class _Sampler:
    def __init__(self, logp_grad, dim, rng, inv_metric, max_depth):
        self.f = logp_grad
        self.dim = dim
        self.rng = rng
        self.inv_metric = inv_metric
        self.max_depth = max_depth
        self.n_grad = 0

    def _eval(self, z):
        self.n_grad += 1
        try:
            lp, g = self.f(z)
        except (FloatingPointError, ArithmeticError):
            return -math.inf, np.zeros(self.dim)
        lp = float(lp)
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, np.zeros(self.dim)
        return lp, np.asarray(g, dtype=float)

    def kinetic(self, r):
        return 0.5 * float(np.dot(self.inv_metric * r, r))

    def leapfrog(self, z, r, g, eps):
        r = r + 0.5 * eps * g
        z = z + eps * self.inv_metric * r
        lp, g = self._eval(z)
        if not math.isfinite(lp):
            return z, r, g, lp
        r = r + 0.5 * eps * g
        return z, r, g, lp

    def build(self, z, r, g, v, depth, eps, H0):
        if depth == 0:
            z1, r1, g1, lp1 = self.leapfrog(z, r, g, v * eps)
            H = -lp1 + self.kinetic(r1) if math.isfinite(lp1) else math.inf
            dH = H - H0
            if math.isnan(dH):
                dH = math.inf
            t = _Tree()
            t.z_m = t.z_p = t.z_prop = z1
            t.r_m = t.r_p = r1
            t.g_m = t.g_p = t.g_prop = g1
            t.lp_prop = lp1
            t.logw = -dH
            t.rho = r1.copy()
            t.n = 1
            t.sum_acc = min(1.0, math.exp(-dH)) if dH < math.inf else 0.0
            t.divergent = dH > MAX_ENERGY_ERROR
            t.turning = False
            return t
        t1 = self.build(z, r, g, v, depth - 1, eps, H0)
        if t1.turning or t1.divergent:
            return t1
        if v > 0:
            t2 = self.build(t1.z_p, t1.r_p, t1.g_p, v, depth - 1, eps, H0)
        else:
            t2 = self.build(t1.z_m, t1.r_m, t1.g_m, v, depth - 1, eps, H0)
        t1.n += t2.n
        t1.sum_acc += t2.sum_acc
        if t2.turning or t2.divergent:
            t1.turning = t2.turning
            t1.divergent = t2.divergent
            return t1
        logw = np.logaddexp(t1.logw, t2.logw)
        if math.log(self.rng.uniform()) < t2.logw - logw:
            t1.z_prop, t1.lp_prop, t1.g_prop = t2.z_prop, t2.lp_prop, t2.g_prop
        t1.logw = logw
        left, right = (t1, t2) if v > 0 else (t2, t1)
        rho = t1.rho + t2.rho
        im = self.inv_metric
        turning = _uturn(rho, left.r_m, right.r_p, im)
        # extra checks across the join (Stan >= 2.23)
        if not turning:
            turning = _uturn(left.rho + right.r_m, left.r_m, right.r_m, im)
        if not turning:
            turning = _uturn(left.r_p + right.rho, left.r_p, right.r_p, im)
        t1.z_m, t1.r_m, t1.g_m = left.z_m, left.r_m, left.g_m
        t1.z_p, t1.r_p, t1.g_p = right.z_p, right.r_p, right.g_p
        t1.rho = rho
        t1.turning = turning
        return t1

    def transition(self, z, lp, g, eps):
        r0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        H0 = -lp + self.kinetic(r0)
        tree = _Tree()
        tree.z_m = tree.z_p = tree.z_prop = z
        tree.r_m = tree.r_p = r0
        tree.g_m = tree.g_p = tree.g_prop = g
        tree.lp_prop = lp
        tree.logw = 0.0
        tree.rho = r0.copy()
        n_leap = 0
        sum_acc = 0.0
        divergent = False
        depth = 0
        for depth in range(self.max_depth):
            v = 1 if self.rng.uniform() < 0.5 else -1
            if v > 0:
                new = self.build(tree.z_p, tree.r_p, tree.g_p, v, depth, eps, H0)
            else:
                new = self.build(tree.z_m, tree.r_m, tree.g_m, v, depth, eps, H0)
            n_leap += new.n
            sum_acc += new.sum_acc
            if new.divergent:
                divergent = True
                break
            if new.turning:
                break
            if math.log(self.rng.uniform()) < new.logw - tree.logw:
                tree.z_prop, tree.lp_prop, tree.g_prop = new.z_prop, new.lp_prop, new.g_prop
            left, right = (tree, new) if v > 0 else (new, tree)
            rho = tree.rho + new.rho
            im = self.inv_metric
            turning = _uturn(rho, left.r_m, right.r_p, im)
            if not turning:
                turning = _uturn(left.rho + right.r_m, left.r_m, right.r_m, im)
            if not turning:
                turning = _uturn(left.r_p + right.rho, left.r_p, right.r_p, im)
            tree.logw = np.logaddexp(tree.logw, new.logw)
            tree.z_m, tree.r_m, tree.g_m = left.z_m, left.r_m, left.g_m
            tree.z_p, tree.r_p, tree.g_p = right.z_p, right.r_p, right.g_p
            tree.rho = rho
            if turning:
                break
        accept = sum_acc / max(n_leap, 1)
        return (tree.z_prop, tree.lp_prop, tree.g_prop, accept, depth + 1, n_leap, divergent)

    def find_reasonable_eps(self, z, lp, g):
        eps = 1.0
        r = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        H0 = -lp + self.kinetic(r)

        def dH(e):
            _, r1, _, lp1 = self.leapfrog(z, r, g, e)
            if not math.isfinite(lp1):
                return math.inf
            return (-lp1 + self.kinetic(r1)) - H0

        d = dH(eps)
        direction = 1 if -d > math.log(0.8) else -1
        for _ in range(100):
            d = dH(eps)
            if direction == 1 and not (-d > math.log(0.8)):
                break
            if direction == -1 and -d > math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps < 1e-12 or eps > 1e7:
                break
        return eps


@dataclass(frozen=True)
class NUTSResult:
    draws: np.ndarray
    lp: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergent: int
    n_grad: int


def _windows(n_warmup, init=75, term=50, base=25):
    """Stan's slow-adaptation windows as (start, end) pairs; empty if warmup is too short."""
    if n_warmup < init + term + base:
        return []
    out = []
    start = init
    size = base
    end_all = n_warmup - term
    while start < end_all:
        end = start + size
        if end + 2 * size > end_all:
            end = end_all
        out.append((start, end))
        start = end
        size *= 2
    return out


def nuts(logp_grad, init, n_warmup=500, n_draws=1000, delta=0.8, max_tree_depth=10,
         rng=None, seed=None, adapt_metric=False, step_size=None, inv_metric=None) -> NUTSResult:
    """Run one NUTS chain.

    ``logp_grad(z)`` returns (log density, gradient). Draws are post-warmup.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    z = np.array(init, dtype=float)
    dim = z.size
    im = np.ones(dim) if inv_metric is None else np.array(inv_metric, dtype=float)
    s = _Sampler(logp_grad, dim, rng, im, max_tree_depth)
    lp, g = s._eval(z)
    if not math.isfinite(lp):
        raise SamplerError("log density is not finite at the initial point")
    eps = step_size if step_size is not None else s.find_reasonable_eps(z, lp, g)
    da = DualAveraging(eps, delta)
    windows = {end: start for start, end in _windows(n_warmup)} if adapt_metric else {}
    win_start = {start for start, _ in _windows(n_warmup)} if adapt_metric else set()
    buf = []
    warm_div = 0
    for i in range(n_warmup):
        z, lp, g, acc, _, _, div = s.transition(z, lp, g, eps)
        warm_div += div
        eps = da.update(acc)
        if adapt_metric:
            if i in win_start:
                buf = []
            buf.append(z.copy())
            if (i + 1) in windows:
                x = np.array(buf)
                n = len(x)
                var = x.var(axis=0, ddof=1)
                # regularize toward 1e-3 as in Stan
                s.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                eps = s.find_reasonable_eps(z, lp, g)
                da.restart(eps)
    if n_warmup > 0:
        if warm_div == n_warmup:
            raise SamplerError("every warmup transition diverged")
        eps = da.final
    draws = np.empty((n_draws, dim))
    lps = np.empty(n_draws)
    accs = np.empty(n_draws)
    depths = np.empty(n_draws, dtype=int)
    nleap = np.empty(n_draws, dtype=int)
    divs = np.zeros(n_draws, dtype=bool)
    for i in range(n_draws):
        z, lp, g, acc, d, nl, div = s.transition(z, lp, g, eps)
        draws[i] = z
        lps[i] = lp
        accs[i] = acc
        depths[i] = d
        nleap[i] = nl
        divs[i] = div
    return NUTSResult(draws, lps, accs, depths, nleap, divs, float(eps), s.inv_metric.copy(),
                      int(warm_div), s.n_grad)


def _autocov(x):
    n = len(x)
    x = x - x.mean()
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    ac = np.fft.irfft(f * np.conj(f), m)[:n] / n
    return ac


def effective_sample_size(chains):
    """Bulk ESS of a (n_chains, n_draws) array using Geyer's initial monotone sequence."""
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = np.array([_autocov(c) for c in x])
    chain_mean = x.mean(axis=1)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    b_over_n = chain_mean.var(ddof=1) if m > 1 else 0.0
    var_plus = w * (n - 1.0) / n + b_over_n
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum pairs while positive, enforcing monotonicity
    t = 0
    pairs = []
    while t + 1 < n:
        p = rho[t] + rho[t + 1]
        if p < 0:
            break
        pairs.append(p)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 1 else tau
    return float(m * n / tau)


def split_rhat(chains):
    """Split-R-hat of a (n_chains, n_draws) array."""
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = x.shape
    half = n // 2
    if half < 2:
        return math.nan
    parts = np.vstack([x[:, :half], x[:, n - half:]])
    n2 = half
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = n2 * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else math.inf
    var_plus = (n2 - 1.0) / n2 * W + B / n2
    return float(math.sqrt(var_plus / W))
