import math

import numpy as np
import pytest

from stiffinfer.nuts import (SamplerError, _windows, effective_sample_size, nuts,
                             split_rhat)


def std_normal(z):
    return -0.5 * float(z @ z), -z


def correlated(rho):
    P = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))

    def f(z):
        return -0.5 * float(z @ P @ z), -(P @ z)
    return f


@pytest.fixture(scope="module")
def gauss_chains():
    return [nuts(std_normal, np.full(3, 0.5), 500, 1000, rng=np.random.default_rng([7, c]))
            for c in range(4)]


def test_gaussian_moments(gauss_chains):
    x = np.array([r.draws for r in gauss_chains])
    for k in range(3):
        ess = effective_sample_size(x[:, :, k])
        assert abs(x[:, :, k].mean()) < 4 / math.sqrt(ess)
    cov = np.cov(x.reshape(-1, 3), rowvar=False)
    assert np.abs(cov - np.eye(3)).max() < 0.1


def test_acceptance_targets_delta(gauss_chains):
    acc = np.mean([r.accept_stat.mean() for r in gauss_chains])
    assert abs(acc - 0.8) < 0.05
    assert not any(r.divergent.any() for r in gauss_chains)


def test_highly_correlated_target():
    r = nuts(correlated(0.99), np.zeros(2), 500, 2000, rng=np.random.default_rng(3))
    assert abs(np.corrcoef(r.draws.T)[0, 1] - 0.99) < 0.02


def test_metric_adaptation_learns_scales():
    scale = np.array([1.0, 100.0])

    def f(z):
        u = z / scale
        return -0.5 * float(u @ u), -u / scale
    r = nuts(f, np.zeros(2), 1000, 500, rng=np.random.default_rng(1), adapt_metric=True)
    ratio = r.inv_metric[1] / r.inv_metric[0]
    assert 3e3 < ratio < 3e4
    assert r.tree_depth.mean() < 4


def test_seeded_reproducible():
    a = nuts(std_normal, np.zeros(2), 50, 50, seed=11)
    b = nuts(std_normal, np.zeros(2), 50, 50, seed=11)
    np.testing.assert_array_equal(a.draws, b.draws)


def test_nonfinite_init_rejected():
    with pytest.raises(SamplerError):
        nuts(lambda z: (-math.inf, np.zeros_like(z)), np.zeros(2), 10, 10, seed=0)


def test_all_divergent_warmup_rejected():
    # finite at the start point only: every trajectory leaves the support
    def f(z):
        if np.all(z == 0.0):
            return 0.0, np.zeros_like(z)
        return -math.inf, np.zeros_like(z)
    with pytest.raises(SamplerError):
        nuts(f, np.zeros(2), 20, 10, seed=0, step_size=0.1)


def test_tree_depth_capped():
    r = nuts(std_normal, np.zeros(2), 0, 50, seed=2, step_size=1e-3, max_tree_depth=3)
    assert r.tree_depth.max() <= 3
    assert r.n_leapfrog.max() <= 2 ** 3


def test_warmup_windows():
    w = _windows(1000)
    assert w[0] == (75, 100)
    assert w[-1][1] == 950
    assert all(a[1] == b[0] for a, b in zip(w, w[1:]))
    assert _windows(100) == []


def test_ess_and_rhat_on_iid(rng):
    x = rng.standard_normal((4, 2000))
    assert 0.8 * 8000 < effective_sample_size(x) < 1.2 * 8000
    assert abs(split_rhat(x) - 1.0) < 0.01


def test_rhat_detects_disagreeing_chains(rng):
    x = rng.standard_normal((4, 500))
    x[0] += 3.0
    assert split_rhat(x) > 1.1


def test_ess_of_autocorrelated_series(rng):
    # AR(1) with phi = 0.9 has integrated time 19
    n = 20000
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    for i in range(1, n):
        x[i] = 0.9 * x[i - 1] + math.sqrt(1 - 0.81) * e[i]
    ess = effective_sample_size(x[None, :])
    assert n / 19 * 0.7 < ess < n / 19 * 1.3
