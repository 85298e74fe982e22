"""FedAvg and SCAFFOLD rounds and the theory-driven stepsize policies.

Round functions accept iterates with arbitrary leading batch axes: ``x`` has
shape ``(..., p)`` and per-agent arrays ``(..., n, p)``. The harness uses this
to advance many independent trials in one call; a single trial is the case of
no leading axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .oracles import NoiseStream
from .problems import FederatedProblem

__all__ = [
    "DivergenceError",
    "FedAvgState",
    "ScaffoldState",
    "StepsizePolicy",
    "fedavg_round",
    "scaffold_round",
    "init_scaffold",
    "stepsize_theorem1",
    "theorem1_caps",
    "stepsize_corollary1",
    "stepsize_scaffold",
    "scaffold_caps",
    "diminishing_caps",
    "diminishing_policy",
    "caps_satisfied",
    "DIVERGENCE_THRESHOLD",
]

DIVERGENCE_THRESHOLD = 1e12


class DivergenceError(FloatingPointError):
    """An iterate became non-finite or exceeded the divergence threshold."""


def _diverged(x: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return ~np.all(np.isfinite(x) & (np.abs(x) <= DIVERGENCE_THRESHOLD), axis=-1)


def _check(x: np.ndarray, t: int) -> None:
    if np.any(_diverged(x)):
        raise DivergenceError(f"iterate diverged in round {t}")


@dataclass
class FedAvgState:
    """Server iterate ``x`` after ``t`` rounds.

    ``grad_sums`` holds each agent's ``Σ_ℓ g_i(x_i^ℓ)`` from the round that
    produced this state, which is what the aggregation identities are stated in.
    """

    x: np.ndarray
    t: int = 0
    grad_sums: np.ndarray | None = None


@dataclass
class ScaffoldState:
    """Server iterate, server control variate ``c`` and agent control variates ``c_agents``."""

    x: np.ndarray
    c: np.ndarray
    c_agents: np.ndarray
    t: int = 0
    grad_sums: np.ndarray | None = None


def _spread(x: np.ndarray, n: int) -> np.ndarray:
    return np.broadcast_to(x[..., None, :], x.shape[:-1] + (n, x.shape[-1])).copy()


def fedavg_round(
    state: FedAvgState,
    problem: FederatedProblem,
    alpha: float,
    Q: int,
    stream: NoiseStream,
    check: bool = True,
) -> FedAvgState:
    """One FedAvg round: ``Q`` local stochastic steps per agent, then averaging.

    Noise is drawn at coordinates ``(stream.seed, stream.trial, state.t, i, ℓ)``;
    the stream's own ``t``, ``agent`` and ``step`` are ignored.
    """
    if Q < 1:
        raise ValueError("Q must be at least 1")
    x = np.asarray(state.x, dtype=np.float64)
    X = _spread(x, problem.n)
    S = np.zeros_like(X)
    keys = None if problem.bank.deterministic else problem.bank.step_keys(stream.seed, stream.trial, state.t, Q)
    for ell in range(Q):
        g = problem.bank.draw(X, stream.seed, stream.trial, state.t, ell, None if keys is None else keys[ell])
        X = X - alpha * g
        S += g
    x_new = np.mean(X, axis=-2)
    if check:
        _check(x_new, state.t)
    return FedAvgState(x_new, state.t + 1, S)


def init_scaffold(
    x0,
    problem: FederatedProblem,
    c_agents=None,
    warm_start: NoiseStream | None = None,
) -> ScaffoldState:
    """Initial SCAFFOLD state; ``c_0`` is the mean of the agent control variates.

    Agent variates default to zero. With ``warm_start`` each agent instead uses
    one stochastic gradient at ``x0`` (drawn at round -1, step 0).
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 0:
        x0 = x0.reshape(1)
    if c_agents is None:
        if warm_start is not None:
            c_agents = problem.bank.draw(_spread(x0, problem.n), warm_start.seed, warm_start.trial, -1, 0)
        else:
            c_agents = np.zeros(x0.shape[:-1] + (problem.n, problem.dim))
    c_agents = np.asarray(c_agents, dtype=np.float64)
    return ScaffoldState(x0, np.mean(c_agents, axis=-2), c_agents, 0)


def scaffold_round(
    state: ScaffoldState,
    problem: FederatedProblem,
    eta_a: float,
    eta_s: float,
    Q: int,
    stream: NoiseStream,
    check: bool = True,
) -> ScaffoldState:
    """One SCAFFOLD round, written line for line from the algorithm.

    Local steps use ``g - c_i + c``; agents update ``c_i ← c_i - c + (x - x_i^Q)/(η_a Q)``;
    the server moves by ``η_s`` times the mean local displacement and adds the
    mean change of the agent variates to ``c``.
    """
    if Q < 1:
        raise ValueError("Q must be at least 1")
    if np.any(np.asarray(eta_a) <= 0) or eta_s <= 0:
        raise ValueError("stepsizes must be positive")
    n = problem.n
    x = np.asarray(state.x, dtype=np.float64)
    c = np.asarray(state.c, dtype=np.float64)
    ci = np.asarray(state.c_agents, dtype=np.float64)
    cs = c[..., None, :]
    X = _spread(x, n)
    S = np.zeros_like(X)
    keys = None if problem.bank.deterministic else problem.bank.step_keys(stream.seed, stream.trial, state.t, Q)
    for ell in range(Q):
        g = problem.bank.draw(X, stream.seed, stream.trial, state.t, ell, None if keys is None else keys[ell])
        X = X - eta_a * (g - ci + cs)
        S += g
    ci_new = ci - cs + (x[..., None, :] - X) / (eta_a * Q)
    x_new = x + (eta_s / n) * np.sum(X - x[..., None, :], axis=-2)
    c_new = c + (1.0 / n) * np.sum(ci_new - ci, axis=-2)
    if check:
        _check(x_new, state.t)
    return ScaffoldState(x_new, c_new, ci_new, state.t + 1, S)


# stepsizes ------------------------------------------------------------------


def _inv(v: float) -> float:
    return math.inf if v == 0 else 1.0 / v


def theorem1_caps(L: float, C: float, Q: int, T: int, n: int) -> dict[str, float]:
    """Upper limits a constant FedAvg stepsize must respect."""
    return {
        "sqrt(n/(Q(C^2+L^2)T))": math.sqrt(n / (Q * (C * C + L * L) * T)),
        "(1/(14Q^3L^2(2C+3L)T))^(1/3)": (1.0 / (14 * Q**3 * L * L * (2 * C + 3 * L) * T)) ** (1 / 3),
        "1/C": _inv(C),
        "1/(2sqrt(2QCL))": _inv(2 * math.sqrt(2 * Q * C * L)),
    }


def _validate(L, C, Q, T, n):
    if L <= 0 or Q < 1 or T < 1 or n < 1:
        raise ValueError("L must be positive and Q, T, n at least 1")
    if C < 0:
        raise ValueError("C must be non-negative")


def stepsize_theorem1(L: float, C: float, Q: int, T: int, n: int) -> float:
    """``1 / (sqrt(Q(L² + C²)T/n) + γ)`` with ``γ = C + (14Q³L²(2C+3L)T)^{1/3} + 2 sqrt(2QCL)``."""
    _validate(L, C, Q, T, n)
    gamma = C + (14 * Q**3 * L * L * (2 * C + 3 * L) * T) ** (1 / 3) + 2 * math.sqrt(2 * Q * C * L)
    return 1.0 / (math.sqrt(Q * (L * L + C * C) * T / n) + gamma)


def stepsize_corollary1(L: float, Q: int, T: int, n: int) -> float:
    """Bounded-variance (C = 0) FedAvg stepsize ``1 / (sqrt(QL²T/n) + (42T)^{1/3} Q L)``."""
    _validate(L, 0.0, Q, T, n)
    return 1.0 / (math.sqrt(Q * L * L * T / n) + (42 * T) ** (1 / 3) * Q * L)


@dataclass(frozen=True)
class ScaffoldStepsize:
    eta_tilde: float
    eta_a: float
    eta_s: float


def scaffold_caps(L: float, C: float, Q: int, T: int, n: int, eta_s: float) -> dict[str, float]:
    """Upper limits on SCAFFOLD's effective stepsize ``η_a η_s Q``."""
    return {
        "eta_s/sqrt(84L(L+C))": eta_s / math.sqrt(84 * L * (L + C)),
        "1/(12(L+C))": 1.0 / (12 * (L + C)),
        "sqrt(2nQ/((L^2+C^2)T))": math.sqrt(2 * n * Q / ((L * L + C * C) * T)),
        "(eta_s^2 Q/(560LC(L+C)T))^(1/3)": (eta_s**2 * Q * _inv(560 * L * C * (L + C) * T)) ** (1 / 3),
    }


def stepsize_scaffold(
    L: float, C: float, Q: int, T: int, n: int, eta_s: float = 1.0, variant: str = "theorem3"
) -> ScaffoldStepsize:
    """Effective SCAFFOLD stepsize and its split ``η_a = η̃ / (η_s Q)``.

    ``variant="theorem3"`` (default) uses
    ``1 / (sqrt((L²+C²)T/(2nQ)) + 12(L+C) + γ_s)`` with
    ``γ_s = sqrt(84L(L+C))/η_s + (560LC(L+C)T/(η_s Q))^{1/3}``.
    ``variant="corollary2"`` is the C = 0 statement with ``sqrt(70) L`` in place
    of ``12(L+C)``; the two constants disagree and both are offered.
    """
    _validate(L, C, Q, T, n)
    if eta_s <= 0:
        raise ValueError("eta_s must be positive")
    if variant == "theorem3":
        gamma_s = math.sqrt(84 * L * (L + C)) / eta_s + (560 * L * C * (L + C) * T / (eta_s * Q)) ** (1 / 3)
        et = 1.0 / (math.sqrt((L * L + C * C) * T / (2 * n * Q)) + 12 * (L + C) + gamma_s)
    elif variant == "corollary2":
        if C != 0:
            raise ValueError("the corollary2 variant assumes C = 0")
        gamma_s = math.sqrt(84 * L * L) / eta_s + math.sqrt(70) * L
        et = 1.0 / (math.sqrt(L * L * T / (2 * n * Q)) + gamma_s)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ScaffoldStepsize(et, et / (eta_s * Q), eta_s)


def diminishing_caps(L: float, C: float, Q: int) -> dict[str, float]:
    """Caps for a diminishing FedAvg policy (``1/0`` read as infinity)."""
    return {
        "1/C": _inv(C),
        "1/(2QL sqrt(3))": 1.0 / (2 * Q * L * math.sqrt(3)),
        "1/(2sqrt(2QCL))": _inv(2 * math.sqrt(2 * Q * C * L)),
    }


def caps_satisfied(value: float, caps: dict[str, float]) -> dict[str, bool]:
    return {name: value <= cap for name, cap in caps.items()}


@dataclass(frozen=True)
class StepsizePolicy:
    """Per-round stepsize.

    Kinds: ``manual`` (``alpha``), ``theorem1``, ``corollary1``, ``scaffold``,
    ``scaffold_c0`` (theory constants from ``L, C, Q, T, n, eta_s``) and
    ``diminishing`` (``min(cap, alpha0/(t+1)^q)``). For SCAFFOLD the value is
    the agent stepsize ``η_a``.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("manual", "theorem1", "corollary1", "scaffold", "scaffold_c0", "diminishing"):
            raise ValueError(f"unknown stepsize policy {self.kind!r}")
        if self.kind == "diminishing":
            q = float(self.params["q"])
            if not 0.5 < q <= 1.0:
                raise ValueError("exponent q must lie in (1/2, 1]")
            if float(self.params["alpha0"]) <= 0:
                raise ValueError("alpha0 must be positive")

    @property
    def constant(self) -> float | None:
        p = self.params
        if self.kind == "manual":
            return float(p["alpha"])
        if self.kind == "theorem1":
            return stepsize_theorem1(p["L"], p["C"], p["Q"], p["T"], p["n"])
        if self.kind == "corollary1":
            return stepsize_corollary1(p["L"], p["Q"], p["T"], p["n"])
        if self.kind in ("scaffold", "scaffold_c0"):
            variant = "theorem3" if self.kind == "scaffold" else "corollary2"
            return stepsize_scaffold(
                p["L"], p.get("C", 0.0), p["Q"], p["T"], p["n"], p.get("eta_s", 1.0), variant
            ).eta_a
        return None

    @property
    def cap(self) -> float:
        p = self.params
        if self.kind != "diminishing":
            return math.inf
        if "cap" in p:
            return float(p["cap"])
        return min(diminishing_caps(p["L"], p.get("C", 0.0), p["Q"]).values())

    def __call__(self, t):
        const = self.constant
        if const is not None:
            return const if np.ndim(t) == 0 else np.full(np.shape(t), const)
        a = float(self.params["alpha0"]) / (np.asarray(t, dtype=np.float64) + 1.0) ** float(self.params["q"])
        out = np.minimum(self.cap, a)
        return float(out) if np.ndim(out) == 0 else out

    def label(self) -> str:
        const = self.constant
        if const is not None:
            return repr(float(const))
        return f"{self.params['alpha0']!r}/(t+1)^{self.params['q']!r}"


def diminishing_policy(
    alpha0: float, q: float, L: float | None = None, C: float = 0.0, Q: int | None = None
) -> StepsizePolicy:
    """``α_t = min(cap, α0 / (t+1)^q)``; without ``L`` and ``Q`` the cap is infinite."""
    params: dict = {"alpha0": alpha0, "q": q}
    if L is None or Q is None:
        params["cap"] = math.inf
    else:
        params.update(L=L, C=C, Q=Q)
    return StepsizePolicy("diminishing", params)
