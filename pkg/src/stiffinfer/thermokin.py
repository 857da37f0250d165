"""Thermodynamics, source terms and Jacobians for the supported reactor models.

Three reactor models are provided:

* :class:`AdiabaticIsobaric` - fixed enthalpy h0 and pressure; the state is
  the mass-fraction vector only and temperature is recovered from h0.
* :class:`Isothermal` - fixed temperature and pressure.
* :class:`RobertsonModel` - the classic three-species stiff test problem.

All models expose ``rhs(y)``, ``jac(y)`` and a compiled ``kernel()`` used
by :mod:`stiffinfer.stiffode`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import _kernels as K
from .mechanism import Mechanism, Species, element_matrix

log = logging.getLogger(__name__)

__all__ = [
    "AdiabaticIsobaric",
    "Isothermal",
    "NoBracketError",
    "RateOverflowError",
    "RobertsonEigen",
    "RobertsonModel",
    "ThermoState",
    "ComplexSpectrumError",
    "jacobian",
    "mixture_enthalpy",
    "nasa7_properties",
    "robertson_eigen",
    "robertson_jacobian",
    "robertson_rhs",
    "source_term",
    "temperature_from_enthalpy",
]

RU = K.RU
P_ATM = K.P_ATM


class NoBracketError(ValueError):
    """Target enthalpy is not attainable within [200 K, 6000 K]."""


class RateOverflowError(FloatingPointError):
    """A reaction rate or source term evaluated to a non-finite value."""


class ComplexSpectrumError(ValueError):
    """The Robertson Jacobian has complex eigenvalues at this state."""


def nasa7_properties(species: Species, T: float):
    """Return (cp [J/kg/K], h [J/kg], s [J/kg/K]) for one species at T."""
    th = species.thermo
    if not th.t_min <= T <= th.t_max:
        log.warning("%s: T=%.1f K outside NASA7 range [%g, %g]; extrapolating",
                    species.name, T, th.t_min, th.t_max)
    a = np.asarray(th.coeffs(T))
    cp_r, h_rt, s_r = K.nasa_cp_h_s(a, float(T))
    r = RU / species.molar_mass
    return cp_r * r, h_rt * r * T, s_r * r


def _thermo_arrays(mech):
    p = K.pack_mechanism(mech, K.ISOTHERMAL)
    return p[0], p[1], p[2], p[3]


def mixture_enthalpy(mech: Mechanism, phi, T: float) -> float:
    """Mass-specific enthalpy (J/kg) of the mixture with mass fractions phi/sum(phi)."""
    phi = np.asarray(phi, dtype=float)
    W, lo, hi, t_mid = _thermo_arrays(mech)
    h, _ = K.mixture_h_cp(phi / phi.sum(), float(T), W, lo, hi, t_mid)
    return h


def temperature_from_enthalpy(mech: Mechanism, phi, h0: float, T_guess: float = 1000.0) -> float:
    """Invert h(phi, T) = h0 for T by safeguarded Newton iteration."""
    phi = np.asarray(phi, dtype=float)
    W, lo, hi, t_mid = _thermo_arrays(mech)
    T = K.temperature_from_h(phi / phi.sum(), float(h0), float(T_guess), W, lo, hi, t_mid)
    if not np.isfinite(T):
        raise NoBracketError(f"h0={h0:.6g} J/kg is not attainable in [{K.T_LO}, {K.T_HI}] K")
    return float(T)


@dataclass(frozen=True)
class ThermoState:
    """Mass fractions with temperature and pressure.

    ``phi`` may carry a total mass different from one; intensive properties
    are evaluated on ``phi / sum(phi)``.
    """

    mech: Mechanism
    phi: np.ndarray
    T: float
    P: float = P_ATM

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (self.mech.n_s,):
            raise ValueError(f"phi must have length {self.mech.n_s}")
        if np.any(phi < -1e-12):
            raise ValueError("mass fractions must be non-negative")
        object.__setattr__(self, "phi", phi)

    @property
    def Y(self):
        return self.phi / self.phi.sum()

    @property
    def mean_molar_mass(self):
        return 1.0 / np.sum(self.Y / self.mech.molar_masses)

    @property
    def rho(self):
        return self.P * self.mean_molar_mass / (RU * self.T)

    @property
    def h(self):
        return mixture_enthalpy(self.mech, self.phi, self.T)


class _MechanismModel:
    mech: Mechanism

    @property
    def n_species(self):
        return self.mech.n_s

    @property
    def species_names(self):
        return self.mech.species_names

    def element_matrix(self):
        return element_matrix(self.mech)

    @cached_property
    def _packed(self):
        return self._pack()

    def _fresh(self):
        # the temperature warm-start cell is per integration context
        return self._packed[:-1] + (np.array([1000.0]),)

    def kernel(self):
        return K.MECHANISM, self._fresh()

    def rhs(self, y):
        out = K.mech_rhs(np.asarray(y, dtype=float), self._fresh())
        if not np.all(np.isfinite(out)):
            raise RateOverflowError("source term is not finite")
        return out

    def jac(self, y):
        return K.mech_jac(np.asarray(y, dtype=float), self._fresh())

    def rates_of_progress(self, y):
        """Per-reaction net rates of progress (kmol/m^3/s) at state y."""
        y = np.asarray(y, dtype=float)
        p = self._packed
        T = self.temperature(y)
        return K.production_rates(y / y.sum(), T, p[18], *p[:16])[2]


@dataclass(frozen=True)
class AdiabaticIsobaric(_MechanismModel):
    """Constant enthalpy h0 (J/kg) and pressure P (Pa); q_loss = 0."""

    mech: Mechanism
    h0: float
    P: float = P_ATM
    kind: str = field(default="adiabatic-isobaric", init=False)

    @classmethod
    def from_temperature(cls, mech, phi, T, P=P_ATM):
        return cls(mech, mixture_enthalpy(mech, phi, T), P)

    def _pack(self):
        return K.pack_mechanism(self.mech, K.ADIABATIC, h0=self.h0, P=self.P)

    def temperature(self, y, T_guess=1000.0):
        return temperature_from_enthalpy(self.mech, y, self.h0, T_guess)

    def state(self, y):
        return ThermoState(self.mech, y, self.temperature(y), self.P)


@dataclass(frozen=True)
class Isothermal(_MechanismModel):
    """Temperature held at T (K) at pressure P (Pa)."""

    mech: Mechanism
    T: float
    P: float = P_ATM
    kind: str = field(default="isothermal", init=False)

    def _pack(self):
        return K.pack_mechanism(self.mech, K.ISOTHERMAL, P=self.P, T_fix=self.T)

    def temperature(self, y, T_guess=None):
        return float(self.T)

    def state(self, y):
        return ThermoState(self.mech, y, self.T, self.P)


@dataclass(frozen=True)
class RobertsonModel:
    """Robertson kinetics A -> B, 2B -> C + B, B + C -> A + C."""

    k: tuple = None
    kind: str = field(default="robertson", init=False)
    species_names: tuple = field(default=("A", "B", "C"), init=False)

    def __post_init__(self):
        if self.k is None:
            from .scenarios import robertson_rate_constants
            object.__setattr__(self, "k", tuple(robertson_rate_constants()))
        object.__setattr__(self, "k", tuple(float(v) for v in self.k))

    @property
    def n_species(self):
        return 3

    def element_matrix(self):
        # one pseudo-element, unit molar masses
        return np.ones((3, 1))

    def kernel(self):
        return K.ROBERTSON, K.pack_robertson(self.k)

    def rhs(self, y):
        return K.robertson_rhs(np.asarray(y, dtype=float), np.array(self.k))

    def jac(self, y):
        return K.robertson_jac(np.asarray(y, dtype=float), np.array(self.k))

    def temperature(self, y, T_guess=None):
        return None


@dataclass(frozen=True)
class FrozenModel:
    """Zero source term; every state is stationary."""

    n: int
    kind: str = field(default="frozen", init=False)

    @property
    def n_species(self):
        return self.n

    @property
    def species_names(self):
        return tuple(f"s{i}" for i in range(self.n))

    def element_matrix(self):
        return np.eye(self.n)

    def kernel(self):
        return K.FROZEN, K.pack_robertson(np.zeros(3))

    def rhs(self, y):
        return np.zeros(self.n)

    def jac(self, y):
        return np.zeros((self.n, self.n))

    def temperature(self, y, T_guess=None):
        return None


def source_term(state, model, mech=None):
    """d(phi)/dt at ``state`` for ``model``.

    ``state`` is a :class:`ThermoState` for mechanism models (its temperature
    is ignored for adiabatic models, which recover T from h0) or a plain
    concentration vector for Robertson.
    """
    y = state.phi if isinstance(state, ThermoState) else np.asarray(state, dtype=float)
    out = model.rhs(y)
    if not np.all(np.isfinite(out)):
        raise RateOverflowError("source term is not finite")
    return out


def jacobian(state, model, mech=None):
    """d(source)/d(phi) at ``state``; analytic for Robertson, central differences otherwise."""
    y = state.phi if isinstance(state, ThermoState) else np.asarray(state, dtype=float)
    return model.jac(y)


def robertson_rhs(y, k=None):
    return RobertsonModel(k).rhs(y)


def robertson_jacobian(y, k=None):
    return RobertsonModel(k).jac(y)


@dataclass(frozen=True)
class RobertsonEigen:
    lambdas: np.ndarray
    L: np.ndarray
    E: float
    F: float
    Q: float
    Q1: float
    Q2: float
    Q3: float


def robertson_eigen(y, k=None) -> RobertsonEigen:
    """Closed-form eigenvalues and left eigenmatrix of the Robertson Jacobian.

    Row k of ``L`` is the left eigenvector for ``lambdas[k]``; the first row
    is the conservation direction [1, 1, 1] with eigenvalue exactly 0.
    """
    k1, k2, k3 = RobertsonModel(k).k
    yA, yB, yC = (float(v) for v in y)
    E = k1 + k3 * yC + 2.0 * k2 * yB
    F = 2.0 * k1 * k2 * yB + 2.0 * k2 * k3 * yB ** 2
    disc = E * E - 4.0 * F
    if disc < 0.0:
        raise ComplexSpectrumError(f"E^2 - 4F = {disc:.3e} < 0 at y = {list(y)}")
    Q = np.sqrt(disc)
    Q1 = E / (2.0 * Q)
    Q2 = F / (k1 * Q)
    Q3 = k3 * yB / k1
    lam = np.array([0.0, (-E - Q) / 2.0, (-E + Q) / 2.0])
    L = np.array([
        [1.0, 1.0, 1.0],
        [Q1 - 0.5, Q1 - Q2 - 0.5, Q3 * (-Q1 + 0.5)],
        [-Q1 - 0.5, -Q1 + Q2 - 0.5, Q3 * (Q1 + 0.5)],
    ])
    return RobertsonEigen(lam, L, E, F, Q, Q1, Q2, Q3)
