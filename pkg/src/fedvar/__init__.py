"""Federated stochastic optimisation under the ABC variance condition.

FedAvg and SCAFFOLD simulators with counter-based noise, the optimal-value
heterogeneity measure ``σ_f*`` and the numerical checks that accompany them.
"""

from .algorithms import (
    FedAvgState,
    ScaffoldState,
    StepsizePolicy,
    fedavg_round,
    init_scaffold,
    scaffold_round,
    stepsize_corollary1,
    stepsize_scaffold,
    stepsize_theorem1,
)
from .heterogeneity import drift_at_optimum, estimate_bgd, heterogeneity_report, sigma_f_star
from .objectives import Huber, Quadratic, Scaled, Softplus
from .oracles import NoiseStream, SignPerturbationOracle, verify_abc
from .problems import FederatedProblem, problem_from_spec, quadratic_huber_problem, softplus_huber_problem

__version__ = "0.1.0"

__all__ = [
    "FedAvgState",
    "ScaffoldState",
    "StepsizePolicy",
    "fedavg_round",
    "init_scaffold",
    "scaffold_round",
    "stepsize_corollary1",
    "stepsize_scaffold",
    "stepsize_theorem1",
    "drift_at_optimum",
    "estimate_bgd",
    "heterogeneity_report",
    "sigma_f_star",
    "Huber",
    "Quadratic",
    "Scaled",
    "Softplus",
    "NoiseStream",
    "SignPerturbationOracle",
    "verify_abc",
    "FederatedProblem",
    "problem_from_spec",
    "quadratic_huber_problem",
    "softplus_huber_problem",
]
