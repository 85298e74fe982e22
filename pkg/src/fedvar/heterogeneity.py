"""Data-heterogeneity measures for federated problems.

The main quantity is the optimal-value gap ``σ_f* = f* - (1/n) Σ f_i*``. For
comparison the module also estimates the bounded-gradient-dissimilarity
constants (ζ², ψ²), checks the smoothness-based dissimilarity bound and the
PL sandwich, and computes the local-GD drift at the optimum.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .objectives import CertificationError, _golden, certified_infimum
from .oracles import CheckReport
from .problems import FederatedProblem

__all__ = [
    "EstimationError",
    "BgdEstimate",
    "HeterogeneityReport",
    "sigma_f_star",
    "gradient_dissimilarity",
    "check_dissimilarity_bound",
    "estimate_bgd",
    "drift_at_optimum",
    "pl_sandwich_check",
    "heterogeneity_report",
]


class EstimationError(RuntimeError):
    """The BGD subproblem has no finite solution on the probed range."""


def sigma_f_star(problem: FederatedProblem, tol: float = 1e-9) -> float:
    """``f* - (1/n) Σ f_i*``; certification error at most ``2 tol``."""
    f_star = certified_infimum(problem.average, problem.bracket, tol)
    gap = f_star - float(np.mean(problem.agent_infima))
    if gap < -2 * tol:
        raise CertificationError(f"f* below the mean agent infimum by {-gap:.3g}")
    return max(gap, 0.0)


def _grad_stats(problem: FederatedProblem, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # dissimilarity (1/n)Σ‖∇f_i − ∇f‖² and ‖∇f‖² at points X of shape (..., p)
    Xa = np.broadcast_to(X[..., None, :], X.shape[:-1] + (problem.n, problem.dim))
    G = problem.average.agent_gradients(Xa)
    g = G.mean(axis=-2)
    dis = np.mean(np.sum((G - g[..., None, :]) ** 2, axis=-1), axis=-1)
    return dis, np.sum(g**2, axis=-1)


def gradient_dissimilarity(problem: FederatedProblem, x) -> np.ndarray | float:
    """``(1/n) Σ_i ‖∇f_i(x) - ∇f(x)‖²`` from the analytic gradients."""
    xa = np.asarray(x, dtype=np.float64)
    scalar = xa.ndim == 0
    dis, _ = _grad_stats(problem, xa.reshape(1) if scalar else xa)
    return float(dis) if scalar else dis


def _probes(problem, probe_points):
    P = np.asarray(probe_points, dtype=np.float64)
    if P.ndim == 1 and problem.dim == 1:
        P = P[:, None]
    if P.ndim != 2 or P.shape[1] != problem.dim or not len(P):
        raise ValueError("probe points must be a non-empty (N, p) array")
    return P


def check_dissimilarity_bound(problem: FederatedProblem, probe_points, tol: float = 1e-9) -> CheckReport:
    """Check ``dissimilarity(x) ≤ 2L (f(x) - f*) + 2L σ_f*`` at every probe.

    ``L`` is the largest agent smoothness constant. Violations within the
    certification tolerance of ``f*`` are forgiven.
    """
    P = _probes(problem, probe_points)
    L = problem.L_max
    sigma = sigma_f_star(problem, tol)
    f_star = problem.f_star
    dis, _ = _grad_stats(problem, P)
    rhs = 2 * L * (problem.average._value(P) - f_star) + 2 * L * sigma
    slack = rhs - dis
    allowed = 8 * L * tol + 1e-12 * np.maximum(1.0, np.abs(rhs))
    fails = int(np.sum(slack < -allowed))
    k = int(np.argmin(slack))
    return CheckReport(
        name="dissimilarity <= 2L(f - f*) + 2L sigma_f*",
        passed=fails == 0,
        n_points=len(P),
        n_failures=fails,
        worst_slack=float(slack[k]),
        worst_point=float(P[k, 0]),
    )


@dataclass
class BgdEstimate:
    """Approximate minimiser of ζ² + ψ² subject to the dissimilarity constraint on a grid."""

    zeta2: float
    psi2: float
    residual: float
    x_range: tuple[float, float]
    grid: int

    @property
    def total(self) -> float:
        return self.zeta2 + self.psi2


def _refine_max(fun, xs, k):
    # golden-section ascent in the two grid cells around a grid maximiser
    lo = xs[max(k - 1, 0)]
    hi = xs[min(k + 1, len(xs) - 1)]
    _, _, x = _golden(lambda t: -fun(t), lo, hi, 100)
    return max(fun(x), fun(xs[k]))


def estimate_bgd(
    problem: FederatedProblem,
    x_range: tuple[float, float] = (-1000.0, 1000.0),
    grid: int = 100_001,
    psi2_range: tuple[float, float] = (0.0, 10.0),
    iters: int = 200,
) -> BgdEstimate:
    """Solve ``min ζ² + ψ²`` s.t. ``dissimilarity(x) - ψ² ‖∇f(x)‖² ≤ ζ²`` approximately.

    For fixed ψ² the smallest feasible ζ² is the maximum of the constraint
    residual over a uniform grid on ``x_range``, refined by golden-section
    around the grid maximiser. That function of ψ² is convex, so the outer
    problem is solved by golden-section on ``psi2_range``, expanding the upper
    end while the minimiser sits on it.
    """
    if problem.dim != 1:
        raise ValueError("BGD estimation is one-dimensional")
    if grid < 1000:
        raise ValueError("grid must have at least 1000 points")
    xs = np.linspace(float(x_range[0]), float(x_range[1]), grid)
    dis, g2 = _grad_stats(problem, xs[:, None])

    def point_stats(t):
        d, g = _grad_stats(problem, np.array([[t]]))
        return float(d[0]), float(g[0])

    def zeta2(psi2, refine=False):
        r = dis - psi2 * g2
        k = int(np.argmax(r))
        best = float(r[k])
        if refine:
            def fun(t):
                d, g = point_stats(t)
                return d - psi2 * g

            best = _refine_max(fun, xs, k)
        return max(best, 0.0), k

    def objective(psi2):
        return zeta2(psi2)[0] + psi2

    lo, hi = map(float, psi2_range)
    for _ in range(40):
        a, b, psi2 = _golden(objective, lo, hi, iters)
        if hi - psi2 > 1e-6 * max(1.0, hi):
            break
        lo, hi = hi * 0.5, hi * 4.0
    else:
        raise EstimationError("ψ² minimiser keeps escaping the search interval")
    if objective(lo) <= objective(psi2):
        psi2 = lo
    z2, k = zeta2(psi2, refine=True)
    if (k == 0 or k == grid - 1) and z2 > 0.0:
        # the binding point is on the truncation edge: check whether the sup grows
        wider = np.array([[xs[0] * 10.0], [xs[-1] * 10.0]])
        d_w, g_w = _grad_stats(problem, wider)
        if np.max(d_w - psi2 * g_w) > z2 * (1 + 1e-6):
            raise EstimationError("constraint residual grows with the x-range; no finite ζ²")
    residual = float(np.max(dis - z2 - psi2 * g2))
    return BgdEstimate(z2, float(psi2), residual, (float(xs[0]), float(xs[-1])), grid)


def drift_at_optimum(
    problem: FederatedProblem,
    Q: int,
    eta: float,
    x_star=None,
    stationarity_tol: float = 1e-8,
) -> float:
    """``‖(1/n) Σ_i (x* - x_i^(Q)) / (η Q)‖`` after ``Q`` local full-gradient steps from ``x*``.

    Only defined for a unique optimum: ``x*`` must be stationary and, in one
    dimension, the averaged gradient must be non-decreasing on the bracket.
    """
    if Q < 1 or eta <= 0:
        raise ValueError("need Q >= 1 and eta > 0")
    if x_star is None:
        x_star = problem.x_star
    xs = np.atleast_1d(np.asarray(x_star, dtype=np.float64))
    gnorm = float(np.linalg.norm(problem.average._gradient(xs)))
    if gnorm > stationarity_tol:
        raise ValueError(f"x_star is not stationary: ‖∇f‖ = {gnorm:.3g}")
    if problem.dim == 1:
        probe = np.linspace(*problem.bracket, 20_001)[:, None]
        gp = problem.average._gradient(probe)[:, 0]
        if np.any(np.diff(gp) < -1e-12):
            raise ValueError("averaged objective is not convex on the bracket; the optimum is ambiguous")
    X = np.broadcast_to(xs, (problem.n, problem.dim)).copy()
    for _ in range(Q):
        X = X - eta * problem.average.agent_gradients(X)
    G = np.mean(xs - X, axis=0) / (eta * Q)
    return float(np.linalg.norm(G))


def pl_sandwich_check(problem: FederatedProblem, mu: float, probe_points, tol: float = 1e-9) -> CheckReport:
    """Check ``2μ(f - f*) + 2μσ_f* ≤ (1/n) Σ‖∇f_i‖² ≤ 2L(f - f*) + 2Lσ_f*`` at every probe."""
    for a in problem.agents:
        if a.mu is None or a.mu < mu:
            raise ValueError(f"agent {a!r} does not carry a PL constant >= {mu}")
    P = _probes(problem, probe_points)
    L = problem.L_max
    sigma = sigma_f_star(problem, tol)
    gap = problem.average._value(P) - problem.f_star
    Xa = np.broadcast_to(P[:, None, :], (len(P), problem.n, problem.dim))
    mid = np.mean(np.sum(problem.average.agent_gradients(Xa) ** 2, axis=-1), axis=-1)
    lower = 2 * mu * (gap + sigma)
    upper = 2 * L * (gap + sigma)
    slack = np.minimum(mid - lower, upper - mid)
    allowed = 8 * L * tol + 1e-12 * np.maximum(1.0, np.abs(mid))
    fails = int(np.sum(slack < -allowed))
    k = int(np.argmin(slack))
    return CheckReport(
        name=f"PL sandwich (mu={mu:g}, L={L:g})",
        passed=fails == 0,
        n_points=len(P),
        n_failures=fails,
        worst_slack=float(slack[k]),
        worst_point=float(P[k, 0]),
    )


@dataclass
class HeterogeneityReport:
    sigma_f_star: float
    bgd: BgdEstimate | None = None
    rho: float | None = None
    bound_check: CheckReport | None = None

    def to_dict(self) -> dict:
        out: dict = {"sigma_f_star": self.sigma_f_star}
        if self.bgd is not None:
            out["bgd"] = {
                "zeta2": self.bgd.zeta2,
                "psi2": self.bgd.psi2,
                "zeta2_plus_psi2": self.bgd.total,
                "residual": self.bgd.residual,
                "x_range": list(self.bgd.x_range),
                "grid": self.bgd.grid,
            }
        if self.rho is not None:
            out["rho"] = self.rho
        if self.bound_check is not None:
            out["bound_check"] = asdict(self.bound_check)
        return out

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()}, indent=2, sort_keys=True)


def heterogeneity_report(
    problem: FederatedProblem,
    bgd: bool = True,
    rho: tuple[int, float] | None = None,
    probe_points=None,
    tol: float = 1e-9,
    bgd_grid: int = 100_001,
) -> HeterogeneityReport:
    """σ_f* plus, optionally, the BGD estimate, ρ for ``rho=(Q, eta)`` and the bound check."""
    sigma = sigma_f_star(problem, tol)
    est = estimate_bgd(problem, grid=bgd_grid) if bgd and problem.dim == 1 else None
    r = drift_at_optimum(problem, rho[0], rho[1]) if rho is not None else None
    if probe_points is None and problem.dim == 1:
        probe_points = np.linspace(-10.0, 10.0, 1000)
    check = check_dissimilarity_bound(problem, probe_points, tol) if probe_points is not None else None
    return HeterogeneityReport(sigma, est, r, check)
