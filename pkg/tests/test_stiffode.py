import numpy as np
import pytest
from scipy.integrate import solve_ivp

from stiffinfer.stiffode import (IntegrationError, SolverConfig, evaluate_at, flow_map, integrate,
                                 integrate_with_sensitivity)
from stiffinfer.thermokin import FrozenModel, RobertsonModel

Y0 = np.array([0.95, 5e-6, 0.05])


def fd_sensitivity(model, phi0, t, steps, cfg):
    """Central-difference bump of the whole integration (independent of the variational system)."""
    n = len(phi0)
    A = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = steps[j]
        A[:, j] = (flow_map(model, phi0 + e, [t], cfg)[0] - flow_map(model, phi0 - e, [t], cfg)[0]) / (2 * steps[j])
    return A


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(rtol=0.1)
    with pytest.raises(ValueError):
        SolverConfig(atol=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(method="rk45")
    assert SolverConfig().atol_vector(3).shape == (3,)


def test_robertson_profile_shape():
    t = np.logspace(-6, 0, 121)
    tr = integrate(RobertsonModel(), Y0, 1.0, t_out=t)
    ys = np.array([evaluate_at(tr, ti) for ti in t])
    assert ys[:, 1].max() > 2e-5 and ys[-1, 1] < ys[:, 1].max()
    assert np.all(np.diff(ys[:, 0]) <= 1e-15)
    assert np.all(np.diff(ys[:, 2]) >= -1e-15)
    assert np.all(np.diff(tr.times) > 0) and tr.times[0] == 0.0


def test_stationary_point():
    tr = integrate(RobertsonModel(), np.array([0.0, 0.0, 1.0]), 1.0)
    np.testing.assert_array_equal(tr.states[-1], [0.0, 0.0, 1.0])


def test_self_convergence():
    m = RobertsonModel()
    loose = flow_map(m, Y0, [1.0], SolverConfig(rtol=1e-6, atol=1e-14))[0]
    tight = flow_map(m, Y0, [1.0], SolverConfig(rtol=1e-10, atol=1e-16))[0]
    np.testing.assert_allclose(loose, tight, rtol=1e-5)


def test_order_of_accuracy():
    m = RobertsonModel()
    ref = flow_map(m, Y0, [1.0], SolverConfig(rtol=1e-12, atol=1e-20))[0]
    errs = [np.abs(flow_map(m, Y0, [1.0], SolverConfig(rtol=r, atol=1e-20))[0] - ref).max()
            for r in (1e-5, 1e-7, 1e-9)]
    assert errs[0] > errs[1] > errs[2]


def test_hydrogen_richardson(h2):
    ref = flow_map(h2.model, h2.phi0, [1e-3], SolverConfig(rtol=1e-11, atol=1e-18))[0]
    e1 = np.abs(flow_map(h2.model, h2.phi0, [1e-3], SolverConfig(rtol=1e-6))[0] - ref).max()
    e2 = np.abs(flow_map(h2.model, h2.phi0, [1e-3], SolverConfig(rtol=1e-8))[0] - ref).max()
    assert e2 < e1


def test_initial_sensitivity_is_identity(h2):
    s = integrate_with_sensitivity(h2.model, h2.phi0, 1e-6)
    np.testing.assert_array_equal(s.A[0], np.eye(9))
    phi, A = evaluate_at(s, 0.0)
    np.testing.assert_array_equal(phi, h2.phi0)
    np.testing.assert_array_equal(A, np.eye(9))


def test_robertson_sensitivity_vs_fd():
    m = RobertsonModel()
    cfg = SolverConfig(rtol=1e-12, atol=1e-20)
    _, A = flow_map(m, Y0, [1e-3], cfg, with_sens=True)
    Afd = fd_sensitivity(m, Y0, 1e-3, [1e-7] * 3, cfg)
    big = np.abs(Afd) > 1e-12
    assert (np.abs(A[0] - Afd)[big] / np.abs(Afd)[big]).max() < 1e-3


def test_hydrogen_conserved_rows(h2):
    C = h2.element_matrix()
    t = np.logspace(-8, -1, 36)
    _, A = flow_map(h2.model, h2.phi0, t, with_sens=True)
    for Ak in A:
        assert np.abs(C.T @ Ak - C.T).max() < 1e-7


def test_evaluate_at_nodes_and_between():
    m = RobertsonModel()
    cfg = SolverConfig(rtol=1e-8)
    tr = integrate(m, Y0, 1.0, cfg)
    k = len(tr.times) // 2
    np.testing.assert_array_equal(evaluate_at(tr, tr.times[k]), tr.states[k])
    tm = 0.5 * (tr.times[k] + tr.times[k + 1])
    fresh = flow_map(m, Y0, [tm], cfg)[0]
    assert np.all(np.abs(evaluate_at(tr, tm) - fresh) <= 10 * cfg.rtol * np.abs(fresh) + 1e-14)
    with pytest.raises(ValueError):
        evaluate_at(tr, 2.0)


def test_product_rule_quadratic_residual(h2):
    cfg = SolverConfig(rtol=1e-11, atol=1e-18)
    t = 1e-5
    y, A = flow_map(h2.model, h2.phi0, [t], cfg, with_sens=True)
    d = 1e-3 * h2.truth.s0 * np.array([1, -1, 1, -1, 1, -1, 1, -1, 1])
    res = []
    for scale in (1.0, 0.5):
        y1 = flow_map(h2.model, h2.phi0 + scale * d, [t], cfg)[0]
        res.append(np.linalg.norm(y1 - y[0] - A[0] @ (scale * d)))
    # o(|delta|): halving delta cuts the residual by about four
    assert res[1] < 0.35 * res[0]


def test_implicit_path_is_used():
    # explicit RK is stability-limited on the stiff Robertson system. On [0, 1] the
    # stiffness ratio is modest (|lambda| ~ 3e3), so the explicit/implicit step
    # ratio measured here is O(10), not the 1e4 of a long-horizon run.
    m = RobertsonModel()
    tr = integrate(m, Y0, 1.0, SolverConfig(rtol=1e-6, atol=1e-14))
    rk = solve_ivp(lambda t, u: m.rhs(u), (0, 1), Y0, method="RK45", rtol=1e-6, atol=1e-14)
    assert len(rk.t) - 1 > 5 * tr.n_accepted


def test_max_steps_reported():
    with pytest.raises(IntegrationError) as exc:
        flow_map(RobertsonModel(), Y0, [1.0], SolverConfig(max_steps=3))
    assert exc.value.t is not None and exc.value.h is not None


def test_output_time_validation():
    with pytest.raises(ValueError):
        flow_map(RobertsonModel(), Y0, [1.0, 0.5])
    with pytest.raises(ValueError):
        flow_map(RobertsonModel(), Y0, [0.0])


def test_frozen_model_constant():
    y0 = np.array([0.2, 0.3, 0.5])
    y, A = flow_map(FrozenModel(3), y0, [1e-3, 1.0], with_sens=True)
    np.testing.assert_array_equal(y[-1], y0)
    np.testing.assert_array_equal(A[-1], np.eye(3))
