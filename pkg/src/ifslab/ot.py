"""Wasserstein-2 machinery: entropic Sinkhorn divergence and an exact oracle.

Conventions (pinned once, used everywhere):

* the ground cost is the **squared** Euclidean distance ``C[i,j] = ||a_i-b_j||^2``;
* the entropic temperature is ``eps = blur ** 2``;
* ``sinkhorn_divergence`` returns the debiased divergence
  ``S_eps(a,b) = OT_eps(a,b) - OT_eps(a,a)/2 - OT_eps(b,b)/2`` by default
  (plain ``OT_eps`` behind ``debiased=False``);
* ``TransportResult.cost`` lives on the squared-W2 scale, ``value`` is its
  square root, directly comparable to a distance.

Solver: a temperature-annealed warm start in the log domain (geometric
schedule from the cost diameter down to ``eps``), then scaled fixed-point
iterations in the exponential domain with periodic log-absorption, so small
blurs stay numerically safe while the tail iterations are plain mat-vecs.
Convergence is declared when the L-inf violation of the column marginal at
the target temperature drops below ``tol``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, NotConvergedError, NumericError, UnsupportedInstanceError
from .geometry import PointCloud, pairwise_sq_dists

_ANNEAL_SCALE = 0.5
_ABSORB_THRESHOLD = 25.0  # max |log scaling| before re-absorbing into potentials


@dataclass(frozen=True)
class SinkhornConfig:
    blur: float = 0.05
    max_iters: int = 500
    tol: float = 1e-6
    debiased: bool = True

    def __post_init__(self):
        if self.blur <= 0:
            raise ConfigError("blur must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ConfigError("tol must be > 0")

    @property
    def eps(self) -> float:
        """Entropic regularization on squared costs."""
        return self.blur * self.blur


@dataclass(frozen=True)
class TransportResult:
    cost: float
    value: float
    iterations_used: int
    converged: bool

    def __post_init__(self):
        assert abs(self.value - np.sqrt(max(self.cost, 0.0))) <= 1e-12


def _result(cost: float, iters: int, converged: bool) -> TransportResult:
    return TransportResult(cost, float(np.sqrt(max(cost, 0.0))), iters, converged)


class _Solve:
    """Dual state of one entropic OT problem (converged or not)."""

    __slots__ = ("f", "g", "cost", "iterations", "converged", "violations")

    def __init__(self, f, g, cost, iterations, converged, violations):
        self.f = f
        self.g = g
        self.cost = cost
        self.iterations = iterations
        self.converged = converged
        self.violations = np.asarray(violations)


def _lse_cols(shift: np.ndarray, C: np.ndarray, eps: float, buf: np.ndarray) -> np.ndarray:
    """log sum_i exp(shift_i - C[i, j]/eps) for every column j."""
    np.multiply(C, -1.0 / eps, out=buf)
    buf += shift[:, None]
    mx = buf.max(axis=0)
    buf -= mx
    np.exp(buf, out=buf)
    s = buf.sum(axis=0)
    np.log(s, out=s)
    s += mx
    return s


def _lse_rows(shift: np.ndarray, C: np.ndarray, eps: float, buf: np.ndarray) -> np.ndarray:
    np.multiply(C, -1.0 / eps, out=buf)
    buf += shift[None, :]
    mx = buf.max(axis=1)
    buf -= mx[:, None]
    np.exp(buf, out=buf)
    s = buf.sum(axis=1)
    np.log(s, out=s)
    s += mx
    return s


def _anneal_schedule(C: np.ndarray, eps: float) -> list[float]:
    top = float(C.max())
    levels = []
    cur = top
    while cur > eps * (1.0 + 1e-12):
        levels.append(cur)
        cur *= _ANNEAL_SCALE
    levels.append(eps)
    return levels


def _scaled_kernel(C, a, b, f, g, eps, buf) -> np.ndarray:
    """K[i,j] = a_i b_j exp((f_i + g_j - C_ij)/eps), into a fresh array."""
    np.multiply(C, -1.0 / eps, out=buf)
    buf += (f / eps)[:, None]
    buf += (g / eps)[None, :]
    K = np.exp(buf)
    K *= a[:, None]
    K *= b[None, :]
    return K


def _solve_asym(C, loga, logb, a, b, eps, max_iters, tol) -> _Solve:
    """OT_eps(a, b): annealed log-domain warmup, then scaled tail iterations."""
    f = np.zeros_like(loga)
    g = np.zeros_like(logb)
    buf = np.empty_like(C)
    warmup = 0
    for lv in _anneal_schedule(C, eps):
        g = -lv * _lse_cols(loga + f / lv, C, lv, buf)
        f = -lv * _lse_rows(logb + g / lv, C, lv, buf)
        warmup += 1

    # exponential-domain tail at the target temperature; max_iters budgets
    # these fixed-temperature rounds (the warm start always completes)
    rounds = 0
    K = _scaled_kernel(C, a, b, f, g, eps, buf)
    KT = np.ascontiguousarray(K.T)
    us = np.ones_like(a)
    vs = np.ones_like(b)
    viol = []
    converged = False
    since_check = 0
    damped = False  # half-steps once the alternating updates stop making progress
    with np.errstate(divide="ignore"):
        while True:
            m = KT @ us
            viol.append(float(np.abs(vs * m - b).max()))
            if viol[-1] <= tol:
                converged = True
                break
            if rounds >= max_iters:
                break
            if damped:
                vs = np.sqrt(vs * b / m)
                us = np.sqrt(us * a / (K @ vs))
            else:
                vs = b / m
                us = a / (K @ vs)
            rounds += 1
            since_check += 1
            if since_check >= 16 or not np.all(np.isfinite(us)):
                since_check = 0
                if not damped and len(viol) > 16 and viol[-1] > 0.97 * viol[-17]:
                    damped = True
                drift = max(np.abs(np.log(us)).max(), np.abs(np.log(vs)).max())
                if drift > _ABSORB_THRESHOLD or not np.isfinite(drift):
                    f = f + eps * np.log(us)
                    g = g + eps * np.log(vs)
                    K = _scaled_kernel(C, a, b, f, g, eps, buf)
                    KT = np.ascontiguousarray(K.T)
                    us = np.ones_like(a)
                    vs = np.ones_like(b)
    mass = float(us @ K @ vs)
    f = f + eps * np.log(us)
    g = g + eps * np.log(vs)
    # dual objective with feasibility correction (exact at convergence)
    cost = float(a @ f) + float(b @ g) - eps * (mass - 1.0)
    return _Solve(f, g, cost, warmup + rounds, converged, viol)


def _solve_sym(C, loga, a, eps, max_iters, tol) -> _Solve:
    """Self term OT_eps(a, a) via the averaged symmetric iteration."""
    p = np.zeros_like(loga)
    buf = np.empty_like(C)
    warmup = 0
    for lv in _anneal_schedule(C, eps):
        p = 0.5 * (p - lv * _lse_cols(loga + p / lv, C, lv, buf))
        warmup += 1

    rounds = 0
    K = _scaled_kernel(C, a, a, p, p, eps, buf)
    s = np.ones_like(a)
    viol = []
    converged = False
    since_check = 0
    with np.errstate(divide="ignore"):
        while True:
            r = K @ s
            viol.append(float(np.abs(s * r - a).max()))
            if viol[-1] <= tol:
                converged = True
                break
            if rounds >= max_iters:
                break
            s = np.sqrt(s * a / r)
            rounds += 1
            since_check += 1
            if since_check >= 8 or not np.all(np.isfinite(s)):
                since_check = 0
                drift = np.abs(np.log(s)).max()
                if drift > _ABSORB_THRESHOLD or not np.isfinite(drift):
                    p = p + eps * np.log(s)
                    K = _scaled_kernel(C, a, a, p, p, eps, buf)
                    s = np.ones_like(a)
    mass = float(s @ K @ s)
    p = p + eps * np.log(s)
    cost = 2.0 * float(a @ p) - eps * (mass - 1.0)
    return _Solve(p, p, cost, warmup + rounds, converged, viol)


def _cost_matrix(a: PointCloud, b: PointCloud) -> np.ndarray:
    C = pairwise_sq_dists(a, b)
    if not np.all(np.isfinite(C)):
        raise NumericError("NaN/Inf in transport cost matrix")
    return C


def _same_cloud(a: PointCloud, b: PointCloud) -> bool:
    return a is b or (
        a.n == b.n
        and np.array_equal(a.points, b.points)
        and np.array_equal(a.weights, b.weights)
    )


def _divergence(a: PointCloud, b: PointCloud, cfg: SinkhornConfig):
    """Returns (cost, iters, converged, parts) for S_eps or raw OT_eps.

    ``parts`` maps problem name to (solve state, cost matrix) so the gradient
    path can reuse the matrices.
    """
    eps = cfg.eps
    loga = np.log(a.weights)
    logb = np.log(b.weights)
    if cfg.debiased and _same_cloud(a, b):
        # the debiased self-divergence vanishes identically; one symmetric
        # solve supplies consistent potentials for value and gradient alike
        Caa = _cost_matrix(a, a)
        aa = _solve_sym(Caa, loga, a.weights, eps, cfg.max_iters, cfg.tol)
        parts = {"ab": (aa, Caa), "aa": (aa, Caa), "bb": (aa, Caa)}
        return 0.0, aa.iterations, aa.converged, parts
    Cab = _cost_matrix(a, b)
    ab = _solve_asym(Cab, loga, logb, a.weights, b.weights, eps, cfg.max_iters, cfg.tol)
    parts = {"ab": (ab, Cab)}
    if not cfg.debiased:
        return ab.cost, ab.iterations, ab.converged, parts
    Caa = _cost_matrix(a, a)
    Cbb = _cost_matrix(b, b)
    aa = _solve_sym(Caa, loga, a.weights, eps, cfg.max_iters, cfg.tol)
    bb = _solve_sym(Cbb, logb, b.weights, eps, cfg.max_iters, cfg.tol)
    parts["aa"] = (aa, Caa)
    parts["bb"] = (bb, Cbb)
    cost = ab.cost - 0.5 * aa.cost - 0.5 * bb.cost
    iters = max(ab.iterations, aa.iterations, bb.iterations)
    return cost, iters, ab.converged and aa.converged and bb.converged, parts


def sinkhorn_divergence(a: PointCloud, b: PointCloud, cfg: SinkhornConfig | None = None) -> TransportResult:
    """Entropic OT divergence between weighted clouds (debiased by default).

    Non-convergence within ``cfg.max_iters`` is reported through
    ``TransportResult.converged`` rather than raised.
    """
    cfg = cfg or SinkhornConfig()
    cost, iters, converged, _ = _divergence(a, b, cfg)
    return _result(cost, iters, converged)


def marginal_violations(a: PointCloud, b: PointCloud, cfg: SinkhornConfig | None = None) -> np.ndarray:
    """Per-iteration L-inf marginal violation of the fixed-temperature tail."""
    cfg = cfg or SinkhornConfig()
    solve = _solve_asym(_cost_matrix(a, b), np.log(a.weights), np.log(b.weights),
                        a.weights, b.weights, cfg.eps, cfg.max_iters, cfg.tol)
    return solve.violations


def _plan(C, a, b, f, g, eps) -> np.ndarray:
    return np.exp(np.log(np.outer(a, b)) + (f[:, None] + g[None, :] - C) / eps)


def divergence_and_grad(a: PointCloud, b: PointCloud, cfg: SinkhornConfig | None = None):
    """(TransportResult, dS/da_i) in one pass; tolerates non-convergence.

    The gradient is the envelope-theorem expression from the current dual
    potentials; it is exact when the solve converged.
    """
    cfg = cfg or SinkhornConfig()
    cost, iters, converged, parts = _divergence(a, b, cfg)
    ab, Cab = parts["ab"]
    P = _plan(Cab, a.weights, b.weights, ab.f, ab.g, cfg.eps)
    grad = 2.0 * (P.sum(axis=1)[:, None] * a.points - P @ b.points)
    if cfg.debiased:
        aa, Caa = parts["aa"]
        Paa = _plan(Caa, a.weights, a.weights, aa.f, aa.g, cfg.eps)
        grad -= 2.0 * (Paa.sum(axis=1)[:, None] * a.points - Paa @ a.points)
    return _result(cost, iters, converged), grad


def gradient_wrt_points(a: PointCloud, b: PointCloud, cfg: SinkhornConfig | None = None) -> np.ndarray:
    """dS_eps/da_i for every point of ``a``; requires a converged solve."""
    result, grad = divergence_and_grad(a, b, cfg)
    if not result.converged:
        raise NotConvergedError(
            "Sinkhorn did not converge; gradient from stale potentials refused"
        )
    return grad


def exact_w2(a: PointCloud, b: PointCloud) -> TransportResult:
    """Exact W2 for equal-size uniform clouds via the assignment problem."""
    if a.dim != b.dim:
        raise UnsupportedInstanceError("dimension mismatch")
    if a.n != b.n:
        raise UnsupportedInstanceError("exact_w2 needs equal point counts")
    if not (a.is_uniform() and b.is_uniform()):
        raise UnsupportedInstanceError("exact_w2 needs uniform weights")
    if a.n > 1024:
        raise UnsupportedInstanceError("exact_w2 capped at n=1024")
    C = pairwise_sq_dists(a, b)
    rows, cols = linear_sum_assignment(C)
    cost = float(C[rows, cols].sum()) / a.n
    return _result(cost, 0, True)
