import numpy as np
import pytest
from scipy.integrate import solve_ivp

from stiffinfer.stiffode import SolverConfig, flow_map
from stiffinfer.thermokin import (AdiabaticIsobaric, ComplexSpectrumError, Isothermal,
                                  NoBracketError, RobertsonModel, ThermoState, mixture_enthalpy,
                                  nasa7_properties, robertson_eigen, robertson_jacobian,
                                  robertson_rhs, temperature_from_enthalpy)

from conftest import fd_jacobian

RU = 8314.46261815324
Y_ROB = np.array([0.95, 5e-6, 0.05])


def _nasa_h_rt(a, T):
    # written out term by term, independent of the package kernels
    return a[0] + a[1] * T / 2 + a[2] * T**2 / 3 + a[3] * T**3 / 4 + a[4] * T**4 / 5 + a[5] / T


def _nasa_s_r(a, T):
    return (a[0] * np.log(T) + a[1] * T + a[2] * T**2 / 2 + a[3] * T**3 / 3
            + a[4] * T**4 / 4 + a[6])


def _coeffs(sp, T):
    return sp.thermo.low if T < sp.thermo.t_mid else sp.thermo.high


def test_nasa_continuity_at_tmid(mech):
    for sp in mech.species:
        Tm = sp.thermo.t_mid
        lo = _nasa_h_rt(np.asarray(sp.thermo.low), Tm)
        hi = _nasa_h_rt(np.asarray(sp.thermo.high), Tm)
        assert abs(lo - hi) <= 1e-3 * max(abs(lo), 1.0)


def test_n2_enthalpy_at_reference(mech):
    sp = mech.species[mech.species_index("N2")]
    _, h, _ = nasa7_properties(sp, 298.15)
    h_oracle = _nasa_h_rt(np.asarray(sp.thermo.low), 298.15) * RU * 298.15 / sp.molar_mass
    assert h == pytest.approx(h_oracle, rel=1e-10)
    # formation enthalpy of N2 is zero: h(298.15) is ~0 relative to cp*T
    assert abs(h) < 0.01 * 1040.0 * 298.15


def test_cp_is_dh_dT(mech):
    for sp in mech.species:
        cp, _, _ = nasa7_properties(sp, 1200.0)
        hp = nasa7_properties(sp, 1200.01)[1]
        hm = nasa7_properties(sp, 1199.99)[1]
        assert abs((hp - hm) / 0.02 - cp) < 1e-6 * cp


def test_temperature_inverse(h2):
    mu0 = h2.truth.mu0
    h0 = mixture_enthalpy(h2.mechanism, mu0, 1200.0)
    assert temperature_from_enthalpy(h2.mechanism, mu0, h0) == pytest.approx(1200.0, abs=1e-6)
    phi = mu0 * np.array([1.1, 0.9, 1.2, 0.95, 1.0, 1.3, 0.8, 1.0, 1.0])
    T = temperature_from_enthalpy(h2.mechanism, phi, h0)
    assert T != pytest.approx(1200.0, abs=1e-3)
    assert abs(mixture_enthalpy(h2.mechanism, phi, T) - h0) < 1e-6 * abs(h0)


def test_pure_n2_temperature(mech):
    phi = np.zeros(mech.n_s)
    phi[mech.species_index("N2")] = 1.0
    h0 = mixture_enthalpy(mech, phi, 300.0)
    assert temperature_from_enthalpy(mech, phi, h0) == pytest.approx(300.0, abs=1e-6)


def test_no_bracket(mech):
    phi = np.zeros(mech.n_s)
    phi[mech.species_index("N2")] = 1.0
    with pytest.raises(NoBracketError):
        temperature_from_enthalpy(mech, phi, 1e12)


def test_thermo_state_density(mech, h2):
    s = ThermoState(mech, h2.truth.mu0, 1200.0)
    W = 1.0 / np.sum(s.Y / mech.molar_masses)
    assert s.rho == pytest.approx(101325.0 * W / (RU * 1200.0), rel=1e-14)
    with pytest.raises(ValueError):
        ThermoState(mech, -h2.truth.mu0, 1200.0)


def test_pure_n2_source_is_zero(mech):
    phi = np.zeros(mech.n_s)
    phi[mech.species_index("N2")] = 1.0
    for model in (Isothermal(mech, 1200.0), AdiabaticIsobaric.from_temperature(mech, phi, 1200.0)):
        assert np.all(model.rhs(phi) == 0.0)


def test_rates_against_hand_evaluation(mech, h2):
    # three bimolecular reactions (no third body, no pressure dependence)
    T, P = 1200.0, 101325.0
    Y = h2.truth.mu0
    W = mech.molar_masses
    rho = P / (RU * T * np.sum(Y / W))
    c = rho * Y / W
    model = Isothermal(mech, T, P)
    q = model.rates_of_progress(Y)
    idx = {n: i for i, n in enumerate(mech.species_names)}

    def g_rt(name):
        sp = mech.species[idx[name]]
        a = np.asarray(_coeffs(sp, T))
        return _nasa_h_rt(a, T) - _nasa_s_r(a, T)

    checks = [("O + H2 <=> H + OH", 3.87e4, 2.7, 6260.0, ["O", "H2"], ["H", "OH"]),
              ("H + O2 <=> O + OH", 2.65e16, -0.6707, 17041.0, ["H", "O2"], ["O", "OH"]),
              ("2 OH <=> O + H2O", 3.57e4, 2.4, -2110.0, ["OH", "OH"], ["O", "H2O"])]
    eqs = [r.equation for r in mech.reactions]
    for eq, A, b, Ea_cal, reac, prod in checks:
        r = eqs.index(eq)
        # cm^3/mol/s -> m^3/kmol/s, cal/mol -> J/kmol
        kf = A * 1e-3 * T**b * np.exp(-Ea_cal * 4184.0 / (RU * T))
        Kc = np.exp(sum(g_rt(s) for s in reac) - sum(g_rt(s) for s in prod))
        kr = kf / Kc
        q_hand = kf * np.prod([c[idx[s]] for s in reac]) - kr * np.prod([c[idx[s]] for s in prod])
        assert q[r] == pytest.approx(q_hand, rel=1e-9), eq


def test_source_at_equilibrium_is_small(h2):
    model = h2.model
    y_eq = flow_map(model, h2.phi0, [1.0, 10.0])
    S_eq = model.rhs(y_eq[-1])
    peak = max(np.abs(model.rhs(y)).max() for y in flow_map(model, h2.phi0, np.logspace(-7, -3, 40)))
    assert np.abs(S_eq).max() < 1e-6 * peak


@pytest.mark.parametrize("kind", ["adiabatic", "isothermal"])
def test_jacobian_matches_finite_differences(h2, rng, kind):
    model = h2.model if kind == "adiabatic" else Isothermal(h2.mechanism, 1500.0)
    for _ in range(3):
        phi = h2.phi0 * np.exp(rng.normal(0, 0.3, 9))
        J = model.jac(phi)
        Jfd = fd_jacobian(model.rhs, phi, rel=1e-6, floor=1e-8)
        scale = np.abs(Jfd).max(axis=1)
        rows = scale > 1e-8 * scale.max()
        err = np.abs(J - Jfd)[rows].max(axis=1) / scale[rows]
        assert err.max() < 1e-4


def test_jacobian_left_null_space(h2):
    C = h2.element_matrix()
    J = h2.model.jac(h2.phi0)
    assert np.abs(C.T @ J).max() < 1e-8 * np.abs(J).max()


def test_directional_derivatives(h2, rng):
    phi = h2.phi0
    J = h2.model.jac(phi)
    eps = 1e-7
    for _ in range(20):
        v = rng.normal(size=9)
        v /= np.linalg.norm(v)
        d = (h2.model.rhs(phi + eps * v) - h2.model.rhs(phi - eps * v)) / (2 * eps)
        Jv = J @ v
        assert np.linalg.norm(d - Jv) < 1e-4 * np.linalg.norm(Jv)


def test_robertson_rhs_examples():
    np.testing.assert_allclose(robertson_rhs([1.0, 0.0, 0.0]), [-0.04, 0.04, 0.0], rtol=0, atol=1e-18)
    np.testing.assert_array_equal(robertson_rhs([0.0, 0.0, 1.0]), [0.0, 0.0, 0.0])
    # rows cancel exactly in exact arithmetic; in float64 the residual is a few ulp
    # of the largest term (an absolute 1e-18 is below one ulp of O(0.05) rates)
    for y in ([0.3, 1e-5, 0.7], Y_ROB, [0.1, 3e-5, 0.2], [1e-3, 1e-9, 1e-3]):
        f = robertson_rhs(y)
        assert abs(np.sum(f)) <= 2 * np.spacing(np.abs(f).max())
    assert abs(np.sum(robertson_rhs([1e-3, 1e-9, 1e-3]))) < 1e-18


def test_robertson_jacobian_hand():
    k1, k2, k3 = 0.04, 3e7, 1e4
    yA, yB, yC = Y_ROB
    J_hand = np.array([
        [-k1, k3 * yC, k3 * yB],
        [k1, -k3 * yC - 2 * k2 * yB, -k3 * yB],
        [0.0, 2 * k2 * yB, 0.0],
    ])
    np.testing.assert_array_equal(robertson_jacobian(Y_ROB), J_hand)


@pytest.mark.parametrize("y", [Y_ROB, [0.7, 2e-5, 0.3], [0.99, 1e-7, 0.01]])
def test_robertson_eigen_closed_form(y):
    e = robertson_eigen(y)
    J = robertson_jacobian(y)
    assert e.lambdas[0] == 0.0
    assert e.lambdas[1] <= e.lambdas[2] <= 0.0
    np.testing.assert_array_equal(e.L[0], [1.0, 1.0, 1.0])
    ref = np.sort(np.linalg.eigvals(J).real)
    np.testing.assert_allclose(np.sort(e.lambdas), ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())
    lam = np.abs(e.lambdas).max()
    for k in range(3):
        resid = e.L[k] @ J - e.lambdas[k] * e.L[k]
        assert np.abs(resid).max() <= 1e-8 * lam * np.abs(e.L[k]).max()


def test_robertson_complex_spectrum_reported():
    # large y_C with tiny y_B gives E^2 < 4F only when yB dominates; search a small family
    with pytest.raises(ComplexSpectrumError):
        robertson_eigen([0.5, 0.5, 0.0], k=[1.0, 1.0, 100.0])


def test_robertson_decoupled_modes_decay_order():
    # frozen eigenvectors: psi_k(t) = psi_k(0) exp(lambda_k t)
    e = robertson_eigen(Y_ROB)
    psi0 = e.L @ np.array([1e-3, 1e-7, 1e-3])
    t = np.logspace(-6, -2, 50)
    psi = psi0[:, None] * np.exp(e.lambdas[:, None] * t[None, :])
    r2 = np.abs(psi[1] / psi0[1])
    r3 = np.abs(psi[2] / psi0[2])
    assert np.all(r2 <= r3)
    assert r2[-1] < 1e-3 < r3[-1] or r2[-1] < r3[-1]
    np.testing.assert_allclose(psi[0], psi0[0])


def test_robertson_model_matches_scipy_radau():
    model = RobertsonModel()
    y = flow_map(model, Y_ROB, [1.0], SolverConfig(rtol=1e-10, atol=1e-16))[0]
    ref = solve_ivp(lambda t, u: robertson_rhs(u), (0, 1), Y_ROB, method="Radau",
                    rtol=1e-12, atol=1e-16, jac=lambda t, u: robertson_jacobian(u)).y[:, -1]
    np.testing.assert_allclose(y, ref, rtol=1e-8)
