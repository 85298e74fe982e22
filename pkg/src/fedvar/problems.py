"""Federated problems: n agents, each an objective with a gradient oracle."""

from __future__ import annotations

from functools import cached_property
from typing import Sequence

import numpy as np

from .objectives import (
    AverageObjective,
    Huber,
    Objective,
    Quadratic,
    Softplus,
    StackedAverage,
    certified_minimizer,
    objective_from_spec,
)
from .oracles import ExactOracle, GradientOracle, OracleBank, SignPerturbationOracle, oracle_from_spec

__all__ = ["FederatedProblem", "ProblemStack", "StackError", "softplus_huber_problem", "quadratic_huber_problem", "problem_from_spec"]


class FederatedProblem:
    """Equal-weight federated objective ``f = (1/n) Σ f_i`` with one oracle per agent.

    ``f_star`` is certified numerically on ``bracket`` (1-D problems); ``labels``
    carries descriptive fields (e.g. ``family``, ``d``) for reports and CSVs.
    """

    def __init__(
        self,
        agents: Sequence[Objective],
        oracles: Sequence[GradientOracle] | None = None,
        bracket: tuple[float, float] = (-1e3, 1e3),
        tol: float = 1e-10,
        labels: dict | None = None,
    ):
        agents = tuple(agents)
        if oracles is None:
            oracles = tuple(ExactOracle(a) for a in agents)
        oracles = tuple(oracles)
        if len(oracles) != len(agents):
            raise ValueError("need exactly one oracle per agent")
        for a, o in zip(agents, oracles):
            if o.objective is not a:
                raise ValueError("each oracle must be attached to its agent's objective")
        self.agents = agents
        self.oracles = oracles
        self.bracket = (float(bracket[0]), float(bracket[1]))
        self.tol = tol
        self.labels = dict(labels or {})
        self.average = AverageObjective(agents, bracket=self.bracket, tol=tol)
        self.bank = OracleBank(oracles, self.average)

    @property
    def n(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.average.dim

    @property
    def L_max(self) -> float:
        return max(a.L for a in self.agents)

    @property
    def agent_infima(self) -> np.ndarray:
        return np.array([a.f_inf for a in self.agents])

    @cached_property
    def _minimum(self) -> tuple[float, float]:
        return certified_minimizer(self.average, self.bracket, self.tol)

    @property
    def x_star(self) -> float:
        return self._minimum[0]

    @property
    def f_star(self) -> float:
        return self._minimum[1]

    def value(self, x):
        return self.average.value(x)

    def gradient(self, x):
        return self.average.gradient(x)

    def with_oracles(self, oracles: Sequence[GradientOracle]) -> "FederatedProblem":
        return FederatedProblem(self.agents, oracles, self.bracket, self.tol, self.labels)

    def exact(self) -> "FederatedProblem":
        """Same agents with noiseless oracles."""
        return self.with_oracles([ExactOracle(a) for a in self.agents])


class StackError(ValueError):
    """The problems cannot be evaluated row-wise in one batch."""


class ProblemStack:
    """Problems with the same agent layout, evaluated side by side.

    Row ``r`` of a batch belongs to ``problems[rows[r]]``. Exposes the parts of
    :class:`FederatedProblem` the round functions use (``n``, ``dim``,
    ``average``, ``bank``), with batches of shape ``(R, n, p)``. Raises
    :class:`StackError` when the problems cannot share kernels.
    """

    def __init__(self, problems: Sequence[FederatedProblem], rows):
        problems = list(problems)
        if len({(p.n, p.dim) for p in problems}) != 1:
            raise StackError("problems differ in size")
        self.problems = problems
        self.rows = np.asarray(rows, dtype=np.int64)
        self.n, self.dim = problems[0].n, problems[0].dim
        try:
            self.average = StackedAverage([p.average for p in problems], self.rows)
            self.bank = OracleBank.stacked([p.bank for p in problems], self.rows, self.average)
        except ValueError as exc:
            raise StackError(str(exc)) from exc

    @property
    def f_star(self) -> np.ndarray:
        return np.array([p.f_star for p in self.problems])[self.rows]


def softplus_huber_problem(n: int = 16, noisy: bool = True) -> FederatedProblem:
    """Agent 1 is a unit Huber loss at 0; agents i = 2..n are ``ln(1 + e^{x - i + 1})``.

    With ``noisy`` every agent gets the sign-perturbation oracle: ``±sqrt|x|``
    for the Huber agent and ``±sqrt(f_i(x))`` for the softplus agents, all
    claimed to meet (C, D) = (1, 1).
    """
    agents = [Huber(0.0)] + [Softplus(float(i - 1)) for i in range(2, n + 1)]
    if noisy:
        oracles = [SignPerturbationOracle(a, claimed=(1.0, 1.0)) for a in agents]
    else:
        oracles = [ExactOracle(a) for a in agents]
    return FederatedProblem(agents, oracles, bracket=(-1e3, 1e3), labels={"family": "softplus_huber"})


def quadratic_huber_problem(d: float, noisy: bool = True) -> FederatedProblem:
    """Two agents: ``f_1 = x²`` and a unit Huber loss centred at ``d``.

    Noise mirrors the sign-perturbation pattern: ``±|x|`` (i.e. ``sqrt(f_1)``)
    for the quadratic and ``±sqrt|x - d|`` for the Huber agent.
    """
    agents = [Quadratic(2.0, 0.0), Huber(float(d))]
    if noisy:
        oracles = [
            SignPerturbationOracle(agents[0], magnitude="sqrt_value", claimed=(1.0, 0.0)),
            SignPerturbationOracle(agents[1], magnitude="sqrt_abs", claimed=(1.0, 1.0)),
        ]
    else:
        oracles = [ExactOracle(a) for a in agents]
    return FederatedProblem(agents, oracles, bracket=(-1e3, 1e3), labels={"family": "quadratic_huber", "d": float(d)})


def problem_from_spec(spec: dict) -> FederatedProblem:
    """Build a problem from a config mapping.

    Accepted forms::

        {"family": "softplus_huber", "n": 16, "noisy": true}
        {"family": "quadratic_huber", "d": -2, "noisy": true}
        {"agents": [{"kind": ..., "params": ..., "dimension": 1,
                     "oracle": {"noise_kind": ..., "params": ..., "C": 1, "D": 1}}, ...],
         "bracket": [-1000, 1000]}
    """
    spec = dict(spec)
    family = spec.get("family")
    noisy = bool(spec.get("noisy", True))
    if family == "softplus_huber":
        return softplus_huber_problem(int(spec.get("n", 16)), noisy)
    if family == "quadratic_huber":
        return quadratic_huber_problem(float(spec["d"]), noisy)
    if family is not None:
        raise ValueError(f"unknown problem family {family!r}")
    if not spec.get("agents"):
        raise ValueError("problem spec needs a family or a non-empty agents list")
    agents, oracles = [], []
    for a in spec["agents"]:
        obj = objective_from_spec(a)
        agents.append(obj)
        oracles.append(oracle_from_spec(obj, a.get("oracle")))
    # finite-sum oracles may have rebuilt their objective
    agents = [o.objective for o in oracles]
    bracket = tuple(spec.get("bracket", (-1e3, 1e3)))
    return FederatedProblem(agents, oracles, bracket=bracket, labels=dict(spec.get("labels", {})))
