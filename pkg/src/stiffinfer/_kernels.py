"""Compiled right-hand sides and Jacobians.

Every model shares one parameter-tuple layout so that the integrator is
compiled (and cached on disk) once; ``model_rhs`` and ``model_jac`` dispatch
on an integer model id. Passing jitted functions as arguments would defeat
numba's on-disk cache.

Mechanism parameter tuple layout (see ``pack_mechanism``)::

    (W, nasa_lo, nasa_hi, t_mid, nu_f, nu_r, A, b, Ea_R, kind, eff,
     A0, b0, Ea0_R, troe, reversible, mode, h0, P, T_fix, T_cache)

``mode`` is 0 for adiabatic-isobaric (T recovered from h0 at every call)
and 1 for isothermal. ``T_cache`` is a one-element scratch array holding the
last temperature, used to warm-start the Newton solve.
"""
import math

import numpy as np
from numba import njit

RU = 8314.46261815324  # J/(kmol K)
P_ATM = 101325.0
T_LO = 200.0
T_HI = 6000.0

ELEMENTARY, THREE_BODY, FALLOFF = 0, 1, 2
ADIABATIC, ISOTHERMAL = 0, 1
# model ids understood by model_rhs / model_jac
MECHANISM, ROBERTSON, FROZEN = 0, 1, 2


def pack_mechanism(mech, mode, h0=0.0, P=P_ATM, T_fix=0.0):
    ns, nr = mech.n_s, mech.n_r
    W = mech.molar_masses.astype(np.float64)
    lo = np.zeros((ns, 7))
    hi = np.zeros((ns, 7))
    t_mid = np.zeros(ns)
    for i, sp in enumerate(mech.species):
        lo[i] = sp.thermo.low
        hi[i] = sp.thermo.high
        t_mid[i] = sp.thermo.t_mid
    nu_f, nu_r = mech.stoich
    A = np.zeros(nr)
    b = np.zeros(nr)
    Ea_R = np.zeros(nr)
    kind = np.zeros(nr, dtype=np.int64)
    eff = np.ones((nr, ns))
    A0 = np.zeros(nr)
    b0 = np.zeros(nr)
    Ea0_R = np.zeros(nr)
    troe = np.zeros((nr, 5))  # A, T3, T1, T2, has_T2 (0 columns => Lindemann)
    rev = np.zeros(nr)
    for r, rxn in enumerate(mech.reactions):
        A[r], b[r], Ea_R[r] = rxn.rate.A, rxn.rate.b, rxn.rate.Ea / RU
        kind[r] = {"elementary": ELEMENTARY, "three-body": THREE_BODY,
                   "falloff": FALLOFF}[rxn.kind]
        for name, e in rxn.efficiencies.items():
            eff[r, mech.species_index(name)] = e
        if rxn.low_rate is not None:
            A0[r], b0[r], Ea0_R[r] = rxn.low_rate.A, rxn.low_rate.b, rxn.low_rate.Ea / RU
        if rxn.troe is not None:
            troe[r, 0] = rxn.troe.A
            troe[r, 1] = rxn.troe.T3
            troe[r, 2] = rxn.troe.T1
            if rxn.troe.T2 is not None:
                troe[r, 3] = rxn.troe.T2
                troe[r, 4] = 1.0
        else:
            troe[r, 0] = -1.0
        rev[r] = 1.0 if rxn.reversible else 0.0
    return (W, lo, hi, t_mid, np.ascontiguousarray(nu_f), np.ascontiguousarray(nu_r),
            A, b, Ea_R, kind, eff, A0, b0, Ea0_R, troe, rev,
            int(mode), float(h0), float(P), float(T_fix), np.array([1000.0]))


@njit(cache=True, nogil=True)
def nasa_cp_h_s(a, T):
    """Dimensionless cp/R, h/(RT), s/R for one NASA7 coefficient row."""
    cp = a[0] + T * (a[1] + T * (a[2] + T * (a[3] + T * a[4])))
    h = a[0] + T * (a[1] / 2 + T * (a[2] / 3 + T * (a[3] / 4 + T * a[4] / 5))) + a[5] / T
    s = (a[0] * math.log(T) + T * (a[1] + T * (a[2] / 2 + T * (a[3] / 3 + T * a[4] / 4)))
         + a[6])
    return cp, h, s


@njit(cache=True, nogil=True)
def mixture_h_cp(Y, T, W, lo, hi, t_mid):
    """Mass-specific enthalpy (J/kg) and cp (J/kg/K) of a mixture."""
    h = 0.0
    cp = 0.0
    for i in range(Y.shape[0]):
        a = lo[i] if T < t_mid[i] else hi[i]
        cpi, hi_rt, _ = nasa_cp_h_s(a, T)
        h += Y[i] * hi_rt * RU * T / W[i]
        cp += Y[i] * cpi * RU / W[i]
    return h, cp


@njit(cache=True, nogil=True)
def temperature_from_h(Y, h0, T_guess, W, lo, hi, t_mid):
    """Newton iteration with bisection fallback on [T_LO, T_HI]; NaN if h0 is out of range."""
    h_lo, _ = mixture_h_cp(Y, T_LO, W, lo, hi, t_mid)
    h_hi, _ = mixture_h_cp(Y, T_HI, W, lo, hi, t_mid)
    if h0 < h_lo or h0 > h_hi:
        return np.nan
    a = T_LO
    c = T_HI
    T = T_guess
    if not (a < T < c):
        T = 0.5 * (a + c)
    for _ in range(100):
        h, cp = mixture_h_cp(Y, T, W, lo, hi, t_mid)
        f = h - h0
        if f > 0.0:
            c = T
        else:
            a = T
        dT = -f / cp
        T_new = T + dT
        if not (a < T_new < c):
            T_new = 0.5 * (a + c)
        if abs(T_new - T) <= 1e-12 * T:
            # one more Newton step brings the residual to round-off level
            h, cp = mixture_h_cp(Y, T_new, W, lo, hi, t_mid)
            return T_new - (h - h0) / cp
        T = T_new
    return T


@njit(cache=True, nogil=True)
def _conc_power(c, nu):
    out = 1.0
    for i in range(nu.shape[0]):
        v = nu[i]
        if v == 0.0:
            continue
        k = int(v)
        if k == v:
            for _ in range(k):
                out *= c[i]
        else:
            out *= abs(c[i]) ** v
    return out


@njit(cache=True, nogil=True)
def production_rates(Y, T, P, W, lo, hi, t_mid, nu_f, nu_r, A, b, Ea_R, kind, eff,
                     A0, b0, Ea0_R, troe, rev):
    """Net molar production rates (kmol/m^3/s), density, and per-reaction rates of progress."""
    ns = Y.shape[0]
    nr = A.shape[0]
    inv_w = 0.0
    for i in range(ns):
        inv_w += Y[i] / W[i]
    rho = P / (RU * T * inv_w)
    c = np.empty(ns)
    g_rt = np.empty(ns)
    for i in range(ns):
        c[i] = rho * Y[i] / W[i]
        a = lo[i] if T < t_mid[i] else hi[i]
        _, h_rt, s_r = nasa_cp_h_s(a, T)
        g_rt[i] = h_rt - s_r
    logT = math.log(T)
    c_ref = P_ATM / (RU * T)
    wdot = np.zeros(ns)
    q = np.zeros(nr)
    for r in range(nr):
        kf = A[r] * math.exp(b[r] * logT - Ea_R[r] / T)
        M = 1.0
        if kind[r] != ELEMENTARY:
            M = 0.0
            for i in range(ns):
                M += eff[r, i] * c[i]
        if kind[r] == FALLOFF:
            k0 = A0[r] * math.exp(b0[r] * logT - Ea0_R[r] / T)
            pr = max(k0 * M / kf, 1e-300)
            F = 1.0
            if troe[r, 0] >= 0.0:
                fc = (1.0 - troe[r, 0]) * math.exp(-T / troe[r, 1]) \
                    + troe[r, 0] * math.exp(-T / troe[r, 2])
                if troe[r, 4] > 0.0:
                    fc += math.exp(-troe[r, 3] / T)
                log_fc = math.log10(max(fc, 1e-300))
                cc = -0.4 - 0.67 * log_fc
                nn = 0.75 - 1.27 * log_fc
                x = math.log10(pr) + cc
                f1 = x / (nn - 0.14 * x)
                F = 10.0 ** (log_fc / (1.0 + f1 * f1))
            kf = kf * pr / (1.0 + pr) * F
            M = 1.0
        fwd = kf * _conc_power(c, nu_f[r])
        revr = 0.0
        if rev[r] > 0.0:
            dg = 0.0
            dnu = 0.0
            for i in range(ns):
                d = nu_r[r, i] - nu_f[r, i]
                dg += d * g_rt[i]
                dnu += d
            # k_r = k_f / Kc with Kc = exp(-dG/RT) * c_ref**dnu
            kr = kf * math.exp(dg) * c_ref ** (-dnu)
            revr = kr * _conc_power(c, nu_r[r])
        q[r] = M * (fwd - revr)
        for i in range(ns):
            d = nu_r[r, i] - nu_f[r, i]
            if d != 0.0:
                wdot[i] += d * q[r]
    return wdot, rho, q


@njit(cache=True, nogil=True)
def mech_temperature(y, p):
    W, lo, hi, t_mid = p[0], p[1], p[2], p[3]
    mode, h0, T_fix, cache = p[16], p[17], p[19], p[20]
    if mode == ISOTHERMAL:
        return T_fix
    alpha = 0.0
    for i in range(y.shape[0]):
        alpha += y[i]
    Y = y / alpha
    T = temperature_from_h(Y, h0, cache[0], W, lo, hi, t_mid)
    if T == T:
        cache[0] = T
    return T


@njit(cache=True, nogil=True)
def _rhs_at(y, T, p):
    """Source term at a given temperature (no enthalpy constraint)."""
    W, lo, hi, t_mid = p[0], p[1], p[2], p[3]
    alpha = 0.0
    for i in range(y.shape[0]):
        alpha += y[i]
    Y = y / alpha
    wdot, rho, _ = production_rates(Y, T, p[18], W, lo, hi, t_mid, p[4], p[5], p[6], p[7],
                                    p[8], p[9], p[10], p[11], p[12], p[13], p[14], p[15])
    out = np.empty_like(y)
    for i in range(y.shape[0]):
        out[i] = alpha * W[i] * wdot[i] / rho
    return out


@njit(cache=True, nogil=True)
def mech_rhs(y, p):
    """d(phi)/dt in mass-fraction form.

    The state may carry total mass alpha = sum(phi) != 1; intensive properties
    use Y = phi / alpha and the result is scaled by alpha, so the map is
    homogeneous of degree one in phi.
    """
    T = mech_temperature(y, p)
    if not (T == T):
        out = np.empty_like(y)
        out[:] = np.nan
        return out
    return _rhs_at(y, T, p)


@njit(cache=True, nogil=True)
def _dprod(c, nu, out):
    """out[k] = d/dc_k prod_l c_l**nu_l (integer or real exponents)."""
    n = c.shape[0]
    for k in range(n):
        out[k] = 0.0
        if nu[k] == 0.0:
            continue
        d = nu[k] * abs(c[k]) ** (nu[k] - 1.0) if nu[k] != int(nu[k]) else \
            nu[k] * c[k] ** (int(nu[k]) - 1)
        for l in range(n):
            if l == k or nu[l] == 0.0:
                continue
            v = nu[l]
            if v == int(v):
                for _ in range(int(v)):
                    d *= c[l]
            else:
                d *= abs(c[l]) ** v
        out[k] = d


@njit(cache=True, nogil=True)
def production_jacobian(Y, T, P, W, lo, hi, t_mid, nu_f, nu_r, A, b, Ea_R, kind, eff,
                        A0, b0, Ea0_R, troe, rev):
    """d(wdot)/dc at fixed T, with c the molar concentrations (kmol/m^3)."""
    ns = Y.shape[0]
    nr = A.shape[0]
    inv_w = 0.0
    for i in range(ns):
        inv_w += Y[i] / W[i]
    rho = P / (RU * T * inv_w)
    c = np.empty(ns)
    g_rt = np.empty(ns)
    for i in range(ns):
        c[i] = rho * Y[i] / W[i]
        a = lo[i] if T < t_mid[i] else hi[i]
        _, h_rt, s_r = nasa_cp_h_s(a, T)
        g_rt[i] = h_rt - s_r
    logT = math.log(T)
    c_ref = P_ATM / (RU * T)
    dw = np.zeros((ns, ns))
    dpf = np.empty(ns)
    dpr = np.empty(ns)
    dq = np.empty(ns)
    for r in range(nr):
        kf = A[r] * math.exp(b[r] * logT - Ea_R[r] / T)
        M = 1.0
        if kind[r] != ELEMENTARY:
            M = 0.0
            for i in range(ns):
                M += eff[r, i] * c[i]
        ratio = 0.0
        if rev[r] > 0.0:
            dg = 0.0
            dnu = 0.0
            for i in range(ns):
                d = nu_r[r, i] - nu_f[r, i]
                dg += d * g_rt[i]
                dnu += d
            ratio = math.exp(dg) * c_ref ** (-dnu)
        pf = _conc_power(c, nu_f[r])
        pr_ = _conc_power(c, nu_r[r]) if rev[r] > 0.0 else 0.0
        _dprod(c, nu_f[r], dpf)
        if rev[r] > 0.0:
            _dprod(c, nu_r[r], dpr)
        else:
            dpr[:] = 0.0
        net = pf - ratio * pr_
        if kind[r] == FALLOFF:
            k0 = A0[r] * math.exp(b0[r] * logT - Ea0_R[r] / T)
            Pr = max(k0 * M / kf, 1e-300)
            F = 1.0
            dlnF_dPr = 0.0
            if troe[r, 0] >= 0.0:
                fc = (1.0 - troe[r, 0]) * math.exp(-T / troe[r, 1]) \
                    + troe[r, 0] * math.exp(-T / troe[r, 2])
                if troe[r, 4] > 0.0:
                    fc += math.exp(-troe[r, 3] / T)
                log_fc = math.log10(max(fc, 1e-300))
                cc = -0.4 - 0.67 * log_fc
                nn = 0.75 - 1.27 * log_fc
                x = math.log10(Pr) + cc
                den = nn - 0.14 * x
                f1 = x / den
                F = 10.0 ** (log_fc / (1.0 + f1 * f1))
                df1_dx = nn / (den * den)
                dlog10F_dx = -log_fc * 2.0 * f1 * df1_dx / (1.0 + f1 * f1) ** 2
                dlnF_dPr = dlog10F_dx / Pr
            keff = kf * Pr / (1.0 + Pr) * F
            # d keff / dM through Pr = k0 M / kinf
            dkeff_dPr = kf * F * (1.0 / (1.0 + Pr) ** 2 + Pr / (1.0 + Pr) * dlnF_dPr)
            dPr_dM = k0 / kf
            for k in range(ns):
                dq[k] = dkeff_dPr * dPr_dM * eff[r, k] * net \
                    + keff * (dpf[k] - ratio * dpr[k])
        else:
            for k in range(ns):
                dq[k] = M * kf * (dpf[k] - ratio * dpr[k])
                if kind[r] == THREE_BODY:
                    dq[k] += eff[r, k] * kf * net
        for i in range(ns):
            d = nu_r[r, i] - nu_f[r, i]
            if d != 0.0:
                for k in range(ns):
                    dw[i, k] += d * dq[k]
    return dw


@njit(cache=True, nogil=True)
def mech_jac(y, p):
    """Jacobian of mech_rhs.

    Composition derivatives at fixed T are analytic; the temperature column
    df/dT is a central difference, chained through the
    enthalpy constraint dT/dphi_j = (h0 - h_j) / sum_k(phi_k cp_k) for the
    adiabatic reactor.
    """
    W, lo, hi, t_mid = p[0], p[1], p[2], p[3]
    P = p[18]
    n = y.shape[0]
    T = mech_temperature(y, p)
    J = np.empty((n, n))
    if not (T == T):
        J[:] = np.nan
        return J
    alpha = 0.0
    nmol = 0.0
    for i in range(n):
        alpha += y[i]
        nmol += y[i] / W[i]
    Y = y / alpha
    wdot, rho, _ = production_rates(Y, T, P, W, lo, hi, t_mid, p[4], p[5], p[6], p[7],
                                    p[8], p[9], p[10], p[11], p[12], p[13], p[14], p[15])
    dw = production_jacobian(Y, T, P, W, lo, hi, t_mid, p[4], p[5], p[6], p[7],
                             p[8], p[9], p[10], p[11], p[12], p[13], p[14], p[15])
    # f_i = W_i * wdot_i(c, T) * R T nmol / P with c_k = P phi_k / (R T nmol W_k)
    scale = RU * T / P
    c = np.empty(n)
    for k in range(n):
        c[k] = y[k] / (scale * nmol * W[k])
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                dc = -c[k] / (nmol * W[j])
                if k == j:
                    dc += 1.0 / (scale * nmol * W[k])
                s += dw[i, k] * dc
            J[i, j] = W[i] * scale * (wdot[i] / W[j] + nmol * s)
    if p[16] == ADIABATIC:
        dT = 1e-5 * T
        f1 = _rhs_at(y, T + dT, p)
        m1 = _rhs_at(y, T - dT, p)
        cp_tot = 0.0
        hj = np.empty(n)
        for k in range(n):
            a = lo[k] if T < t_mid[k] else hi[k]
            cpk, h_rt, _ = nasa_cp_h_s(a, T)
            cp_tot += y[k] * cpk * RU / W[k]
            hj[k] = h_rt * RU * T / W[k]
        h0 = p[17]
        for i in range(n):
            dfdT = (f1[i] - m1[i]) / (2.0 * dT)
            for j in range(n):
                J[i, j] += dfdT * (h0 - hj[j]) / cp_tot
    return J


@njit(cache=True, nogil=True)
def mech_jac_fd(y, p):
    """Fourth-order central finite-difference Jacobian of mech_rhs (test oracle)."""
    n = y.shape[0]
    J = np.empty((n, n))
    yp = y.copy()
    for j in range(n):
        h = 2e-4 * max(abs(y[j]), 1e-3)
        yp[j] = y[j] + h
        f1 = mech_rhs(yp, p)
        yp[j] = y[j] - h
        m1 = mech_rhs(yp, p)
        yp[j] = y[j] + 2.0 * h
        f2 = mech_rhs(yp, p)
        yp[j] = y[j] - 2.0 * h
        m2 = mech_rhs(yp, p)
        yp[j] = y[j]
        for i in range(n):
            J[i, j] = (8.0 * (f1[i] - m1[i]) - (f2[i] - m2[i])) / (12.0 * h)
    return J


@njit(cache=True, nogil=True)
def robertson_rhs(y, k):
    k1, k2, k3 = k[0], k[1], k[2]
    out = np.empty(3)
    out[0] = -k1 * y[0] + k3 * y[1] * y[2]
    out[1] = k1 * y[0] - k2 * y[1] * y[1] - k3 * y[1] * y[2]
    out[2] = k2 * y[1] * y[1]
    return out


@njit(cache=True, nogil=True)
def robertson_jac(y, k):
    k1, k2, k3 = k[0], k[1], k[2]
    J = np.empty((3, 3))
    J[0, 0] = -k1
    J[0, 1] = k3 * y[2]
    J[0, 2] = k3 * y[1]
    J[1, 0] = k1
    J[1, 1] = -2.0 * k2 * y[1] - k3 * y[2]
    J[1, 2] = -k3 * y[1]
    J[2, 0] = 0.0
    J[2, 1] = 2.0 * k2 * y[1]
    J[2, 2] = 0.0
    return J


def pack_robertson(k):
    """Uniform parameter tuple with the three rate constants stored in the A slot."""
    e1 = np.zeros(0)
    e2 = np.zeros((0, 0))
    return (e1, e2, e2, e1, e2, e2, np.asarray(k, dtype=np.float64), e1, e1,
            np.zeros(0, dtype=np.int64), e2, e1, e1, e1, e2, e1,
            ISOTHERMAL, 0.0, P_ATM, 0.0, np.array([1000.0]))


@njit(cache=True, nogil=True)
def model_rhs(model, y, p):
    if model == MECHANISM:
        return mech_rhs(y, p)
    if model == ROBERTSON:
        return robertson_rhs(y, p[6])
    return np.zeros_like(y)


@njit(cache=True, nogil=True)
def model_jac(model, y, p):
    if model == MECHANISM:
        return mech_jac(y, p)
    if model == ROBERTSON:
        return robertson_jac(y, p[6])
    return np.zeros((y.shape[0], y.shape[0]))


# ---------------------------------------------------------------------------
# ESDIRK4(3)6L[2]SA integrator (Kennedy & Carpenter 2019)
#
# Stiffly accurate, L-stable, stage order 2, embedded third-order estimate.
# Stage equations are solved by simplified Newton with the Jacobian frozen at
# the start of the step. Forward sensitivities use the staggered-direct
# scheme: once stage i has converged, the variational stage
#
#     (I - h*gamma*J(Y_i)) S_i = A_n + h * sum_{j<i} a_ij J(Y_j) S_j
#
# is solved exactly, i.e. the same Runge-Kutta scheme is applied to
# dA/dt = J(phi) A with exact stage Jacobians. The integrator lives in this
# module so that numba's on-disk cache is invalidated together with the
# model kernels it inlines.
# ---------------------------------------------------------------------------

GAMMA = 0.25
_A = np.zeros((6, 6))
_A[1, :2] = [1 / 4, 1 / 4]
_A[2, :3] = [-1356991263433 / 26208533697614, -1356991263433 / 26208533697614, 1 / 4]
_A[3, :4] = [-1778551891173 / 14697912885533, -1778551891173 / 14697912885533,
             7325038566068 / 12797657924939, 1 / 4]
_A[4, :5] = [-24076725932807 / 39344244018142, -24076725932807 / 39344244018142,
             9344023789330 / 6876721947151, 11302510524611 / 18374767399840, 1 / 4]
_A[5, :6] = [657241292721 / 9909463049845, 657241292721 / 9909463049845,
             1290772910128 / 5804808736437, 1103522341516 / 2197678446715, -3 / 28, 1 / 4]
_B = _A[5].copy()
_BHAT = np.array([-71925161075 / 3900939759889, -71925161075 / 3900939759889,
                  2973346383745 / 8160025745289, 3972464885073 / 7694851252693,
                  -263368882881 / 4213126269514, 3295468053953 / 15064441987965])
_E = _B - _BHAT
TABLEAU_A = _A
TABLEAU_B = _B
TABLEAU_BHAT = _BHAT

OK, MAX_STEPS, STEP_TOO_SMALL, NON_FINITE = 0, 1, 2, 3


@njit(cache=True, nogil=True)
def _wrms(v, y0, y1, rtol, atol):
    s = 0.0
    n = v.shape[0]
    for i in range(n):
        sc = atol[i] + rtol * max(abs(y0[i]), abs(y1[i]))
        s += (v[i] / sc) ** 2
    return math.sqrt(s / n)


@njit(cache=True, nogil=True)
def _wrms_mat(v, a0, a1, rtol, atol):
    s = 0.0
    n = v.shape[0]
    m = v.shape[1]
    for i in range(n):
        for j in range(m):
            sc = atol + rtol * max(abs(a0[i, j]), abs(a1[i, j]))
            s += (v[i, j] / sc) ** 2
    return math.sqrt(s / (n * m))


@njit(cache=True, nogil=True)
def _grow3(a, cap):
    out = np.empty((cap,) + a.shape[1:])
    out[:a.shape[0]] = a
    return out


@njit(cache=True, nogil=True)
def solve(model, p, y0, t_out, rtol, atol, atol_sens, h_init, max_steps,
          with_sens, store_nodes):
    """Integrate from t=0 through every time in ``t_out`` (ascending, > 0).

    Returns (status, t_fail, h_fail, n_accepted, n_rejected, n_nodes,
    node_t, node_y, node_f, node_A, node_dA, out_y, out_A).
    """
    n = y0.shape[0]
    ns = n if with_sens else 1
    n_out = t_out.shape[0]
    out_y = np.empty((n_out, n))
    out_A = np.empty((n_out, ns, ns))
    cap = 256 if store_nodes else 1
    node_t = np.empty(cap)
    node_y = np.empty((cap, n))
    node_f = np.empty((cap, n))
    node_A = np.empty((cap, ns, ns))
    node_dA = np.empty((cap, ns, ns))

    A = _A
    E = _E
    t = 0.0
    t_end = t_out[n_out - 1]
    y = y0.copy()
    f = model_rhs(model, y, p)
    J = model_jac(model, y, p)
    S = np.eye(ns)
    KS = np.empty((ns, ns))
    if with_sens:
        KS = J @ S
    n_nodes = 0
    if store_nodes:
        node_t[0] = 0.0
        node_y[0] = y
        node_f[0] = f
        node_A[0] = S
        node_dA[0] = KS
        n_nodes = 1
    for i in range(n):
        if not np.isfinite(f[i]):
            return (NON_FINITE, 0.0, 0.0, 0, 0, n_nodes, node_t[:n_nodes], node_y[:n_nodes],
                    node_f[:n_nodes], node_A[:n_nodes], node_dA[:n_nodes], out_y, out_A)

    if h_init > 0.0:
        h = h_init
    else:
        d0 = _wrms(y, y, y, rtol, atol)
        d1 = _wrms(f, y, y, rtol, atol)
        if d0 < 1e-5 or d1 < 1e-5:
            h = 1e-6 * t_end
        else:
            h = 0.01 * d0 / d1
        h = min(h, 0.01 * t_end)
    h = max(h, 1e-14 * t_end)

    Z = np.empty((6, n))
    F = np.empty((6, n))
    Sst = np.empty((6, ns, ns))
    Kst = np.empty((6, ns, ns))
    Jlast = J
    iout = 0
    n_acc = 0
    n_rej = 0
    err_prev = 1.0
    eye = np.eye(n)
    # Newton increments are measured in the error norm; stop well below the
    # local error target, or at the round-off floor for very tight rtol
    kappa = 1e-2
    nd_floor = max(1e-8, 50.0 * 2.220446049250313e-16 / rtol)
    Jlast_new = Jlast
    while iout < n_out:
        if n_acc + n_rej >= max_steps:
            return (MAX_STEPS, t, h, n_acc, n_rej, n_nodes, node_t[:n_nodes], node_y[:n_nodes],
                    node_f[:n_nodes], node_A[:n_nodes], node_dA[:n_nodes], out_y, out_A)
        target = t_out[iout]
        h_step = h
        hit = False
        if t + h_step >= target * (1.0 - 1e-12) or t + 1.0001 * h_step >= target:
            h_step = target - t
            hit = True
        if h_step <= 1e-15 * max(t, target):
            return (STEP_TOO_SMALL, t, h_step, n_acc, n_rej, n_nodes, node_t[:n_nodes],
                    node_y[:n_nodes], node_f[:n_nodes], node_A[:n_nodes], node_dA[:n_nodes],
                    out_y, out_A)
        hg = h_step * GAMMA
        Minv = np.linalg.inv(eye - hg * Jlast)
        Z[0] = y
        F[0] = f
        if with_sens:
            Sst[0] = S
            Kst[0] = KS
        failed = False
        for i in range(1, 6):
            base = y.copy()
            for j in range(i):
                if A[i, j] != 0.0:
                    base += h_step * A[i, j] * F[j]
            Yi = base + hg * F[i - 1]
            nd_prev = 0.0
            converged = False
            for it in range(12):
                G = Yi - base - hg * model_rhs(model, Yi, p)
                d = -(Minv @ G)
                Yi = Yi + d
                nd = _wrms(d, y, Yi, rtol, atol)
                if not math.isfinite(nd):
                    break
                if nd <= nd_floor:
                    converged = True
                    break
                if it > 0:
                    rate = nd / nd_prev
                    if rate >= 0.9:
                        break
                    if rate / (1.0 - rate) * nd <= kappa:
                        converged = True
                        break
                nd_prev = nd
            if not converged:
                failed = True
                break
            Z[i] = Yi
            F[i] = (Yi - base) / hg
            if with_sens:
                Ji = model_jac(model, Yi, p)
                rhs_s = S.copy()
                for j in range(i):
                    if A[i, j] != 0.0:
                        rhs_s += h_step * A[i, j] * Kst[j]
                Si = np.linalg.solve(eye - hg * Ji, rhs_s)
                Sst[i] = Si
                Kst[i] = Ji @ Si
                if i == 5:
                    Jlast_new = Ji
        if failed:
            n_rej += 1
            h = 0.25 * h_step
            continue
        y_new = Z[5].copy()
        err = np.zeros(n)
        for j in range(6):
            err += h_step * E[j] * F[j]
        en = _wrms(err, y, y_new, rtol, atol)
        if with_sens and atol_sens > 0.0:
            errA = np.zeros((ns, ns))
            for j in range(6):
                errA += h_step * E[j] * Kst[j]
            ea = _wrms_mat(errA, S, Sst[5], rtol, atol_sens)
            en = math.sqrt((en * en * n + ea * ea * ns * ns) / (n + ns * ns))
        if not math.isfinite(en):
            n_rej += 1
            h = 0.25 * h_step
            continue
        if en <= 1.0:
            t = t + h_step
            if hit:
                t = target
            y = y_new
            f = model_rhs(model, y, p)
            if with_sens:
                S = Sst[5].copy()
                Jlast = Jlast_new
                KS = Jlast @ S
            else:
                Jlast = model_jac(model, y, p)
            n_acc += 1
            if store_nodes:
                if n_nodes == node_t.shape[0]:
                    cap2 = 2 * n_nodes
                    node_t2 = np.empty(cap2)
                    node_t2[:n_nodes] = node_t
                    node_t = node_t2
                    node_y = _grow3(node_y, cap2)
                    node_f = _grow3(node_f, cap2)
                    node_A = _grow3(node_A, cap2)
                    node_dA = _grow3(node_dA, cap2)
                node_t[n_nodes] = t
                node_y[n_nodes] = y
                node_f[n_nodes] = f
                node_A[n_nodes] = S
                node_dA[n_nodes] = KS
                n_nodes += 1
            while iout < n_out and t >= t_out[iout]:
                out_y[iout] = y
                out_A[iout] = S
                iout += 1
            en_c = max(en, 1e-10)
            fac = 0.9 * en_c ** (-0.7 / 4.0) * err_prev ** (0.4 / 4.0)
            fac = min(5.0, max(0.2, fac))
            err_prev = en_c
            # the controller proposes from the unclipped step when the last one was cut short
            h = max(h, h_step) * fac if hit else h_step * fac
        else:
            n_rej += 1
            fac = max(0.2, 0.9 * en ** (-1.0 / 4.0))
            h = h_step * fac
    return (OK, t, h, n_acc, n_rej, n_nodes, node_t[:n_nodes], node_y[:n_nodes],
            node_f[:n_nodes], node_A[:n_nodes], node_dA[:n_nodes], out_y, out_A)
