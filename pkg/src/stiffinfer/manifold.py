"""Information-loss diagnostics: eigen-analysis, conserved/reaction subspaces, rank tracking.

The composition space splits into the conserved space spanned by the element
matrix C (basis Q) and its orthogonal complement, the reaction space (basis W).
In the rotated frame G = [Q W] the sensitivity matrix is block triangular,

    G^T A G = [[I, 0], [W^T A Q, W^T A W]],

so every loss of rank in A shows up in the reaction block W^T A W.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_RANK_THRESHOLD",
    "EigenAnalysis",
    "RankReport",
    "SubspaceBasis",
    "conserved_basis",
    "eigen_analysis",
    "numerical_rank",
    "rank_descent_times",
    "subspace_blocks",
]

DEFAULT_RANK_THRESHOLD = 1e-6


@dataclass(frozen=True)
class EigenAnalysis:
    lambdas: np.ndarray
    L: np.ndarray
    stiffness_ratio: float
    condition: float
    defective: bool
    psi_perturbation: np.ndarray | None = None


def eigen_analysis(J, dphi0=None, n_conserved=0) -> EigenAnalysis:
    """Eigenvalues sorted by |Re| descending with unit-norm left eigenvectors as rows of L.

    ``n_conserved`` zero modes are excluded from the stiffness ratio, which is
    |Re(lambda_1)| / |Re(lambda_{n - n_conserved})|.
    """
    J = np.asarray(J, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1]:
        raise ValueError("J must be square")
    w, vl = linalg.eig(J, left=True, right=False)
    # canonical order: |Re| descending, ties broken by Re then Im so that row
    # permutations of the input give identical output
    order = np.lexsort((np.round(w.imag, 12), np.round(w.real, 12), -np.abs(w.real)))
    w = w[order]
    L = vl[:, order].conj().T
    L = L / np.linalg.norm(L, axis=1, keepdims=True)
    if np.all(np.abs(w.imag) <= 1e-12 * max(1.0, np.abs(w).max())):
        w = w.real
        L = L.real
        # fix the sign so the largest-magnitude entry of each row is positive
        idx = np.argmax(np.abs(L), axis=1)
        L = L * np.sign(L[np.arange(len(L)), idx])[:, None]
    cond = float(np.linalg.cond(L))
    defective = cond > 1e8
    if defective:
        log.warning("left eigenvector matrix is ill-conditioned (cond=%.3g)", cond)
    re = np.abs(np.real(w))
    k = len(w) - n_conserved - 1
    ratio = float(re[0] / re[k]) if k >= 0 and re[k] > 0 else math.inf
    psi = None if dphi0 is None else L @ np.asarray(dphi0, dtype=float)
    return EigenAnalysis(w, L, ratio, cond, defective, psi)


@dataclass(frozen=True)
class SubspaceBasis:
    Q: np.ndarray
    W: np.ndarray

    @property
    def G(self):
        return np.hstack([self.Q, self.W])

    @property
    def n_conserved(self):
        return self.Q.shape[1]

    @property
    def n_reaction(self):
        return self.W.shape[1]


def conserved_basis(C, tol=1e-10) -> SubspaceBasis:
    """Orthonormal bases of col(C) and of its orthogonal complement."""
    C = np.asarray(C, dtype=float)
    if C.ndim == 1:
        C = C[:, None]
    n_s, n_e = C.shape
    s = np.linalg.svd(C, compute_uv=False)
    rank = int(np.sum(s > tol * s.max())) if s.size else 0
    if rank != n_e:
        raise ValueError(f"element matrix is rank deficient: rank {rank} < {n_e}")
    Q, R = np.linalg.qr(C)
    Q = Q * np.sign(np.diag(R))[None, :]
    W = linalg.null_space(C.T)
    # deterministic orientation
    for j in range(W.shape[1]):
        i = np.argmax(np.abs(W[:, j]))
        if W[i, j] < 0:
            W[:, j] = -W[:, j]
    return SubspaceBasis(Q, W)


def subspace_blocks(A, basis: SubspaceBasis):
    """Return (Q^T A Q, Q^T A W, W^T A Q, W^T A W)."""
    Q, W = basis.Q, basis.W
    A = np.asarray(A, dtype=float)
    return Q.T @ A @ Q, Q.T @ A @ W, W.T @ A @ Q, W.T @ A @ W


def numerical_rank(M, threshold=DEFAULT_RANK_THRESHOLD):
    """(rank, singular values descending) with an absolute cutoff."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0, np.zeros(0)
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > threshold)), s


@dataclass(frozen=True)
class DescentEvent:
    block: str
    old_rank: int
    new_rank: int
    time: float

    def to_dict(self):
        return {"block": self.block, "old_rank": self.old_rank, "new_rank": self.new_rank,
                "time": self.time, "log10_time": math.log10(self.time)}


@dataclass(frozen=True)
class RankReport:
    times: np.ndarray
    threshold: float
    sigma_qaq: np.ndarray
    sigma_waw: np.ndarray
    norm_waq: np.ndarray
    sigma_full: np.ndarray
    rank_qaq: np.ndarray
    rank_waw: np.ndarray
    rank_full: np.ndarray
    events: list = field(default_factory=list)
    qaq_defect: np.ndarray | None = None
    qaw_norm: np.ndarray | None = None

    def descent_times(self, block="WAW"):
        return [e.time for e in self.events if e.block == block]

    def first_drop(self, block="A"):
        t = self.descent_times(block)
        return t[0] if t else None

    def to_rows(self):
        """Long-format CSV rows: t, sigma_QAQ_k..., sigma_WAW_k..., ranks."""
        header = (["t"] + [f"sigma_QAQ_{k + 1}" for k in range(self.sigma_qaq.shape[1])]
                  + [f"sigma_WAW_{k + 1}" for k in range(self.sigma_waw.shape[1])]
                  + ["norm_WAQ", "rank_QAQ", "rank_WAW", "rank_A"])
        rows = []
        for i, t in enumerate(self.times):
            rows.append([t, *self.sigma_qaq[i], *self.sigma_waw[i], self.norm_waq[i],
                         int(self.rank_qaq[i]), int(self.rank_waw[i]), int(self.rank_full[i])])
        return header, rows

    def summary(self, label=None):
        """JSON-ready summary; ``descent_times`` lists the W^T A W crossing times in order."""
        out = {
            "threshold": self.threshold,
            "descent_times": self.descent_times("WAW"),
            "log10_descent_times": [round(math.log10(t), 2) for t in self.descent_times("WAW")],
            "events": [e.to_dict() for e in self.events],
            "final_rank_WAW": int(self.rank_waw[-1]),
            "final_rank_QAQ": int(self.rank_qaq[-1]),
        }
        if self.qaq_defect is not None:
            out["max_QAQ_minus_I"] = float(np.max(self.qaq_defect))
            out["max_QAW"] = float(np.max(self.qaw_norm))
        if label is not None:
            return {str(label): out}
        return out

    def to_json(self, label=None):
        return json.dumps(self.summary(label), indent=2)


def _crossing_time(t0, t1, s0, s1, threshold):
    # singular values decay roughly exponentially in time between dense nodes;
    # interpolate log(sigma) linearly in log(t)
    if s0 <= threshold:
        return t0
    if s1 <= 0:
        s1 = threshold * 1e-300 if threshold > 0 else 1e-300
    ls0, ls1, lth = math.log(s0), math.log(max(s1, 1e-300)), math.log(threshold)
    if ls0 == ls1:
        return t1
    f = (ls0 - lth) / (ls0 - ls1)
    f = min(max(f, 0.0), 1.0)
    lt0 = math.log(t0)
    return math.exp(lt0 + f * (math.log(t1) - lt0))


def _events(block, times, sig, threshold):
    events = []
    n = sig.shape[1]
    rank0 = int(np.sum(sig[0] > threshold))
    for k in range(n):
        below = np.nonzero(sig[:, k] <= threshold)[0]
        if below.size == 0 or k >= rank0:
            continue
        i = below[0]
        if i == 0:
            continue
        tc = _crossing_time(times[i - 1], times[i], sig[i - 1, k], sig[i, k], threshold)
        events.append((tc, k))
    events.sort()
    out = []
    r = rank0
    for tc, _ in events:
        out.append(DescentEvent(block, r, r - 1, float(tc)))
        r -= 1
    return out


def rank_descent_times(sens, basis: SubspaceBasis, threshold=DEFAULT_RANK_THRESHOLD,
                       times=None) -> RankReport:
    """Track singular values of the subspace blocks over time and locate rank drops.

    ``sens`` is a SensitivityTrajectory; by default every stored node with
    t > 0 is analysed, otherwise A is evaluated by dense output at ``times``.
    Crossing times between grid points are found by log-log interpolation of
    the singular value that crosses.
    """
    from .stiffode import evaluate_at

    if times is None:
        mask = sens.times > 0
        ts = sens.times[mask]
        As = sens.A[mask]
    else:
        ts = np.asarray(times, dtype=float)
        As = np.array([evaluate_at(sens, t)[1] for t in ts])
    n_e, n_w = basis.n_conserved, basis.n_reaction
    nt = len(ts)
    s_qaq = np.empty((nt, n_e))
    s_waw = np.empty((nt, n_w))
    s_full = np.empty((nt, n_e + n_w))
    n_waq = np.empty(nt)
    qdef = np.empty(nt)
    qaw = np.empty(nt)
    for i, A in enumerate(As):
        qaq, qw, waq, waw = subspace_blocks(A, basis)
        s_qaq[i] = np.linalg.svd(qaq, compute_uv=False)
        s_waw[i] = np.linalg.svd(waw, compute_uv=False) if n_w else np.zeros(0)
        s_full[i] = np.linalg.svd(A, compute_uv=False)
        n_waq[i] = np.linalg.norm(waq, 2) if waq.size else 0.0
        qdef[i] = np.abs(qaq - np.eye(n_e)).max()
        qaw[i] = np.abs(qw).max() if qw.size else 0.0
    r_qaq = np.sum(s_qaq > threshold, axis=1)
    r_waw = np.sum(s_waw > threshold, axis=1)
    r_full = np.sum(s_full > threshold, axis=1)
    # prepend the t = 0 state (A = I) so that drops before the first grid time are caught
    t_ev = np.concatenate([[0.0], ts])
    ev = []
    for name, sig in (("QAQ", s_qaq), ("WAW", s_waw), ("A", s_full)):
        full = np.vstack([np.ones((1, sig.shape[1])), sig])
        # log interpolation needs t > 0; start the first interval one decade earlier
        if nt:
            t_ev[0] = ts[0] / 10.0
        ev += _events(name, t_ev, full, threshold)
    return RankReport(ts, threshold, s_qaq, s_waw, n_waq, s_full, r_qaq, r_waw, r_full,
                      ev, qdef, qaw)
