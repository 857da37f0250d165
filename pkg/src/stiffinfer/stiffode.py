"""Adaptive stiff integration with optional forward sensitivities.

The integrator is a six-stage ESDIRK method of order 4 with an embedded
order-3 error estimate (stiffly accurate, L-stable). The sensitivity matrix
A = d phi(t) / d phi0 is propagated alongside the state by applying the same
Runge-Kutta scheme to dA/dt = J(phi) A, reusing the exact stage Jacobian for
every column. Dense output is cubic Hermite on the accepted step nodes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K

__all__ = [
    "IntegrationError",
    "SensitivityTrajectory",
    "SolverConfig",
    "Trajectory",
    "evaluate_at",
    "flow_map",
    "integrate",
    "integrate_with_sensitivity",
]

_STATUS = {
    K.MAX_STEPS: "maximum number of steps exceeded",
    K.STEP_TOO_SMALL: "step size underflow (Newton or error test keeps failing)",
    K.NON_FINITE: "non-finite right-hand side at the initial state",
}


class IntegrationError(RuntimeError):
    """Integration failure with the time and step size at which it happened."""

    def __init__(self, message, t=None, h=None, status=None):
        super().__init__(f"{message} (t={t:.6g} s, h={h:.3g} s)" if t is not None else message)
        self.t = t
        self.h = h
        self.status = status


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-8
    atol: float | tuple = 1e-14
    max_steps: int = 500_000
    method: str = "esdirk43"
    # absolute tolerance on sensitivity entries; 0 disables error control on A
    atol_sens: float = 1e-8
    h_init: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.rtol <= 1e-2:
            raise ValueError("rtol must lie in (0, 1e-2]")
        if np.any(np.asarray(self.atol) <= 0):
            raise ValueError("atol must be positive")
        if self.method != "esdirk43":
            raise ValueError(f"unknown method {self.method!r}; only 'esdirk43' is available")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def atol_vector(self, n):
        a = np.asarray(self.atol, dtype=float)
        if a.ndim == 0:
            return np.full(n, float(a))
        if a.shape != (n,):
            raise ValueError(f"atol must be scalar or length {n}")
        return a.copy()


@dataclass(frozen=True)
class Trajectory:
    """Accepted step nodes with states and time derivatives for Hermite dense output."""

    times: np.ndarray
    states: np.ndarray
    derivs: np.ndarray
    temperatures: np.ndarray | None = None
    n_accepted: int = 0
    n_rejected: int = 0

    @property
    def t_end(self):
        return float(self.times[-1])

    @property
    def final(self):
        return self.states[-1]


@dataclass(frozen=True)
class SensitivityTrajectory:
    base: Trajectory
    A: np.ndarray
    dA: np.ndarray = field(repr=False)

    @property
    def times(self):
        return self.base.times


def _as_times(t_out):
    t = np.atleast_1d(np.asarray(t_out, dtype=float))
    if t.ndim != 1 or t.size == 0:
        raise ValueError("output times must be a non-empty 1-D sequence")
    if np.any(t <= 0.0):
        raise ValueError("output times must be > 0")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("output times must be strictly increasing")
    return t


def _run(model, phi0, t_out, cfg, with_sens, store_nodes):
    cfg = cfg or SolverConfig()
    phi0 = np.ascontiguousarray(phi0, dtype=float)
    model_id, p = model.kernel()
    n = phi0.shape[0]
    if n != model.n_species:
        raise ValueError(f"phi0 has length {n}, model expects {model.n_species}")
    res = K.solve(model_id, p, phi0, t_out, float(cfg.rtol), cfg.atol_vector(n),
                        float(cfg.atol_sens), float(cfg.h_init), int(cfg.max_steps),
                        bool(with_sens), bool(store_nodes))
    status, t_fail, h_fail = res[0], res[1], res[2]
    if status != K.OK:
        raise IntegrationError(_STATUS.get(status, f"status {status}"), t_fail, h_fail, status)
    return res


def flow_map(model, phi0, t_out, cfg: SolverConfig | None = None, with_sens=False):
    """States (and sensitivities) at the requested times without storing the step history.

    Returns ``y`` of shape (len(t_out), n) and, when ``with_sens``, ``A`` of
    shape (len(t_out), n, n). This is the hot path used by inference.
    """
    t = _as_times(t_out)
    res = _run(model, phi0, t, cfg, with_sens, False)
    return (res[11], res[12]) if with_sens else res[11]


def _temperatures(model, states):
    if getattr(model, "temperature", None) is None:
        return None
    out = np.empty(len(states))
    T = 1000.0
    for i, y in enumerate(states):
        T = model.temperature(y, T)
        if T is None:
            return None
        out[i] = T
    return out


def _build(model, res, with_sens):
    n_nodes = res[5]
    base = Trajectory(times=res[6][:n_nodes].copy(), states=res[7][:n_nodes].copy(),
                      derivs=res[8][:n_nodes].copy(),
                      temperatures=_temperatures(model, res[7][:n_nodes]),
                      n_accepted=int(res[3]), n_rejected=int(res[4]))
    if not with_sens:
        return base
    return SensitivityTrajectory(base=base, A=res[9][:n_nodes].copy(),
                                 dA=res[10][:n_nodes].copy())


def integrate(model, phi0, t_end, cfg: SolverConfig | None = None, t_out=None) -> Trajectory:
    """Integrate ``model`` from phi0 to t_end, keeping every accepted step.

    ``t_out`` adds extra times that the step sequence is forced to land on;
    t_end is always included.
    """
    t = _grid(t_end, t_out)
    return _build(model, _run(model, phi0, t, cfg, False, True), False)


def integrate_with_sensitivity(model, phi0, t_end, cfg: SolverConfig | None = None,
                               t_out=None) -> SensitivityTrajectory:
    """As :func:`integrate`, also propagating A(t) with A(0) = I."""
    t = _grid(t_end, t_out)
    return _build(model, _run(model, phi0, t, cfg, True, True), True)


def _grid(t_end, t_out):
    if t_end <= 0:
        raise ValueError("t_end must be > 0")
    if t_out is None:
        return np.array([float(t_end)])
    t = np.unique(np.append(np.asarray(t_out, dtype=float), float(t_end)))
    t = t[(t > 0) & (t <= t_end)]
    return _as_times(t)


def _hermite(t, t0, t1, y0, y1, f0, f1):
    h = t1 - t0
    s = (t - t0) / h
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def evaluate_at(traj, t):
    """Dense-output state at time t (and A for sensitivity trajectories).

    Returns ``phi`` for a :class:`Trajectory` and ``(phi, A)`` for a
    :class:`SensitivityTrajectory`.
    """
    base = traj.base if isinstance(traj, SensitivityTrajectory) else traj
    ts = base.times
    t = float(t)
    if t < ts[0] or t > ts[-1]:
        raise ValueError(f"t={t:.6g} outside trajectory range [0, {ts[-1]:.6g}]")
    k = int(np.searchsorted(ts, t, side="left"))
    if k < len(ts) and ts[k] == t:
        phi = base.states[k].copy()
        if isinstance(traj, SensitivityTrajectory):
            return phi, traj.A[k].copy()
        return phi
    i0, i1 = k - 1, k
    phi = _hermite(t, ts[i0], ts[i1], base.states[i0], base.states[i1],
                   base.derivs[i0], base.derivs[i1])
    if isinstance(traj, SensitivityTrajectory):
        A = _hermite(t, ts[i0], ts[i1], traj.A[i0], traj.A[i1], traj.dA[i0], traj.dA[i1])
        return phi, A
    return phi
