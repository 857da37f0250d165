import math
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from stiffinfer.bayes import SamplerSettings, TruthSpec
from stiffinfer.metrics import (MarginalDensity, correlation_track, estimate_marginal,
                                failure_time_sweep, failure_verdict, js_distance, kl_divergence,
                                prior_density, truth_density, verdict_from_draws)
from stiffinfer.scenarios import Scenario
from stiffinfer.thermokin import FrozenModel


def single_bin(i, bins=64):
    p = np.zeros(bins)
    p[i] = 1.0
    return MarginalDensity(np.linspace(-3.5, 3.5, bins + 1), p)


def random_density(rng, bins=16):
    p = rng.dirichlet(np.full(bins, 0.5))
    return MarginalDensity(np.linspace(-3.5, 3.5, bins + 1), p)


def test_normal_tail_mass(rng):
    d = estimate_marginal(rng.standard_normal(10**6))
    centers = 0.5 * (d.edges[1:] + d.edges[:-1])
    assert d.bins == 64
    assert abs(d.probs[np.abs(centers) > 3.0].sum() - 2 * stats.norm.sf(3.0)) < 1e-3


def test_identical_samples_one_bin():
    d = estimate_marginal(np.full(500, 0.123))
    assert d.probs.max() == 1.0 and np.count_nonzero(d.probs) == 1


def test_uniform_samples_flat(rng):
    n = 10**5
    d = estimate_marginal(rng.uniform(-3.5, 3.5, n))
    assert np.all(np.abs(d.probs - 1 / 64) < 5 / math.sqrt(n))


def test_outliers_clipped_and_counted():
    x = np.concatenate([np.zeros(100), [10.0, -10.0]])
    d = estimate_marginal(x)
    assert d.n_clipped == 2
    assert d.probs[0] > 0 and d.probs[-1] > 0


def test_sample_requirements():
    with pytest.raises(ValueError):
        estimate_marginal([])
    with pytest.raises(ValueError):
        estimate_marginal(np.zeros(99))


def test_kl_identity_and_disjoint():
    P = single_bin(3)
    assert kl_divergence(P, P) == 0.0
    val, info = kl_divergence(P, single_bin(40), return_info=True)
    assert val == 0.0 and info["empty_overlap"] and info["excluded_mass"] == 1.0


def test_kl_gaussian_closed_form(rng):
    n, bins = 10**6, 256
    P = estimate_marginal(rng.standard_normal(n), bins=bins)
    Q = estimate_marginal(rng.normal(0.5, 1.0, n), bins=bins)
    exact = 0.5 ** 2 / 2 / math.log(10)
    assert abs(kl_divergence(P, Q) - exact) < 0.05 * exact


def test_kl_nonnegative_full_overlap(rng):
    for _ in range(100):
        assert kl_divergence(random_density(rng), random_density(rng)) >= 0.0


def test_js_identity_symmetry_bound(rng):
    P, Q = random_density(rng), random_density(rng)
    assert js_distance(P, P) == 0.0
    assert js_distance(P, Q) == js_distance(Q, P)
    assert js_distance(single_bin(0), single_bin(63)) == pytest.approx(math.sqrt(math.log10(2)))
    assert js_distance(single_bin(0), single_bin(63), base=2) == pytest.approx(1.0)


def test_js_triangle_inequality(rng):
    for _ in range(100):
        P, Q, R = (random_density(rng) for _ in range(3))
        assert js_distance(P, R) <= js_distance(P, Q) + js_distance(Q, R) + 1e-12


def test_binning_mismatch():
    with pytest.raises(ValueError):
        js_distance(single_bin(0, 64), single_bin(0, 32))


def test_truth_and_prior_densities():
    t, p = truth_density(), prior_density()
    assert t.probs.sum() == pytest.approx(1.0) and p.probs.sum() == pytest.approx(1.0)
    assert t.probs[0] == 0.0 and p.probs[0] == 0.0
    # JSD of the truncated Gaussian against the uniform prior
    assert js_distance(t, p, base=10) == pytest.approx(0.216, abs=2e-3)
    assert js_distance(t, p, base=2) == pytest.approx(0.394, abs=2e-3)


def test_verdict_truth_draws_pass(rng):
    x = stats.truncnorm(-3, 3).rvs(4000, random_state=rng)
    v = failure_verdict(truth_density(), prior_density(), estimate_marginal(x))
    assert v.species[0].difference < 0 and not v.failed


def test_verdict_prior_draws_fail(rng):
    x = rng.uniform(-3, 3, 4000)
    v = failure_verdict(truth_density(), prior_density(), estimate_marginal(x), names=["yB"])
    assert v["yB"].failed and v.failed == ["yB"]
    assert v["yB"].difference > 0.2


def test_verdict_affine_invariance(rng):
    mu, s = np.array([0.95, 5e-6]), np.array([0.01, 1e-6])
    z = np.column_stack([stats.truncnorm(-3, 3).rvs(2000, random_state=rng),
                         rng.uniform(-3, 3, 2000)])
    spec = TruthSpec(mu, s)
    raw = mu + s * z
    a = verdict_from_draws(z, ["A", "B"])
    b = verdict_from_draws(spec.normalize(raw), ["A", "B"])
    assert [v.failed for v in a.species] == [v.failed for v in b.species] == [False, True]
    for u, w in zip(a.species, b.species):
        assert u.difference == pytest.approx(w.difference, abs=1e-12)


def frozen_scenario():
    cfg = {"name": "frozen", "model": {"kind": "robertson", "k": [0.0, 0.0, 0.0]},
           "truth": {"mu0": [0.5, 0.3, 0.2], "s0": [0.01, 0.01, 0.01], "n_truth": 200},
           "grid": {"log10_start": -2, "log10_stop": 0, "n": 3}}
    return Scenario.from_config(cfg)


def test_frozen_sweep_never_fails():
    s = frozen_scenario()
    res = failure_time_sweep(s, seed=0, settings=SamplerSettings(200, 300, 2))
    assert all(v is None for v in res.critical_times().values())
    assert len(res.rows) == 9


def test_sweep_rejects_unsorted_grid():
    with pytest.raises(ValueError):
        failure_time_sweep(frozen_scenario(), [1.0, 0.1])


def test_correlation_track(robertson):
    t, corr = correlation_track(robertson, [1e-10, 1e-4, 1.0, 1e3], seed=0, n=500)
    assert corr.shape == (4, 3, 3)
    np.testing.assert_allclose(corr, np.transpose(corr, (0, 2, 1)), atol=0)
    np.testing.assert_allclose(np.diagonal(corr, axis1=1, axis2=2), 1.0)
    off = corr[0] - np.eye(3)
    assert np.abs(off).max() < 0.15
    # mass sloshes between A and C once the fast transient is over
    assert abs(corr[-1, 0, 2]) > 0.9


def test_y_a_floor_order_of_magnitude(robertson):
    # stored t_obs = 1 variance-mode draws: y_A stays close to the truth, a few hundredths
    path = Path(__file__).parent / "data" / "robertson_t1_variance" / "draws.csv"
    header = path.read_text().splitlines()[0].split(",")
    raw = np.loadtxt(path, delimiter=",", skiprows=1)[:, header.index("A")]
    z = (raw - robertson.truth.mu0[0]) / robertson.truth.s0[0]
    d = js_distance(truth_density(), estimate_marginal(z), base=10)
    assert 0.01 < d < 0.1
