import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedvar.heterogeneity import (
    check_dissimilarity_bound,
    drift_at_optimum,
    estimate_bgd,
    gradient_dissimilarity,
    heterogeneity_report,
    pl_sandwich_check,
    sigma_f_star,
)
from fedvar.objectives import Huber, Quadratic, Scaled, Softplus
from fedvar.problems import FederatedProblem, quadratic_huber_problem, softplus_huber_problem

SIGMA = {-100.0: 49.625, -50.0: 24.625, -20.0: 9.625, -2.0: 0.625}


def two_quadratics():
    # x² and (x - 1)²
    return FederatedProblem([Quadratic(2.0, 0.0), Quadratic(2.0, 1.0)])


@pytest.mark.parametrize("d", list(SIGMA))
def test_sigma_f_star_two_agent_values(d):
    assert sigma_f_star(quadratic_huber_problem(d)) == pytest.approx(SIGMA[d], abs=1e-6)


def test_sigma_f_star_identical_agents_is_zero():
    p = FederatedProblem([Softplus(2.0), Softplus(2.0), Softplus(2.0)])
    assert sigma_f_star(p) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(-50.0, 50.0), d=st.floats(-30.0, 30.0))
def test_sigma_f_star_invariant_under_common_offset(c, d):
    base = quadratic_huber_problem(d)
    shifted = FederatedProblem([Scaled(a, 1.0, c) for a in base.agents])
    assert sigma_f_star(shifted) == pytest.approx(sigma_f_star(base), abs=1e-8)


def test_sigma_f_star_nonnegative_on_softplus_huber():
    assert sigma_f_star(softplus_huber_problem()) >= 0.0


def test_dissimilarity_examples():
    assert gradient_dissimilarity(two_quadratics(), 0.0) == 1.0
    same = FederatedProblem([Huber(1.0), Huber(1.0)])
    np.testing.assert_array_equal(gradient_dissimilarity(same, np.linspace(-5, 5, 11)[:, None]), 0.0)


def test_dissimilarity_identity():
    p = softplus_huber_problem()
    x = np.linspace(-10, 30, 401)[:, None]
    G = np.stack([a.gradient(x)[:, 0] for a in p.agents])
    rhs = np.mean(G**2, axis=0) - G.mean(axis=0) ** 2
    np.testing.assert_allclose(gradient_dissimilarity(p, x), rhs, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize(
    "problem",
    [quadratic_huber_problem(-2.0), quadratic_huber_problem(-100.0), softplus_huber_problem(), two_quadratics()],
    ids=["d=-2", "d=-100", "softplus_huber", "quadratics"],
)
def test_dissimilarity_bound_holds(problem):
    rep = check_dissimilarity_bound(problem, np.linspace(-10.0, 10.0, 1000))
    assert rep.passed, rep.line()
    at_opt = check_dissimilarity_bound(problem, [problem.x_star])
    assert at_opt.passed


def test_dissimilarity_bound_catches_wrong_smoothness():
    class Understated(Quadratic):
        @property
        def L(self):
            return 0.1

    p = FederatedProblem([Understated(2.0, 0.0), Understated(2.0, 1.0)])
    assert not check_dissimilarity_bound(p, np.linspace(-10, 10, 100)).passed


def test_bgd_identical_agents_is_zero():
    est = estimate_bgd(FederatedProblem([Huber(3.0), Huber(3.0)]), grid=10_001)
    assert est.zeta2 == 0.0 and est.psi2 == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("d, exact", [(-100.0, 4.0), (-20.0, 4.0), (-2.0, 3.0)])
def test_bgd_matches_exact_minimum(d, exact):
    # the exact minimum of ζ² + ψ² for this pair is 4 when |d| is large and 3 at d = -2
    est = estimate_bgd(quadratic_huber_problem(d))
    assert est.total == pytest.approx(exact, abs=2e-3)
    assert est.residual <= 1e-9


def test_bgd_rejects_small_grid_and_higher_dimensions():
    with pytest.raises(ValueError):
        estimate_bgd(quadratic_huber_problem(-2.0), grid=10)
    with pytest.raises(ValueError):
        estimate_bgd(FederatedProblem([Quadratic(1.0, dim=2)]))


def test_drift_regression_value():
    rho = drift_at_optimum(quadratic_huber_problem(-2.0), 17, 0.00046)
    assert rho > 0
    assert rho == pytest.approx(0.00366312637803479, rel=1e-9)


def test_drift_single_step_vanishes():
    assert drift_at_optimum(quadratic_huber_problem(-2.0), 1, 0.00046) <= 1e-8


def test_drift_identical_agents_vanishes():
    p = FederatedProblem([Quadratic(2.0, 1.0), Quadratic(2.0, 1.0)])
    assert drift_at_optimum(p, 10, 0.1) <= 1e-12


def test_drift_rejects_non_stationary_point():
    with pytest.raises(ValueError):
        drift_at_optimum(quadratic_huber_problem(-2.0), 5, 0.01, x_star=3.0)


def test_drift_refuses_nonconvex_average():
    # cos(x) + 2 is stationary at π but not convex on the bracket
    class Bump(Quadratic):
        def _value(self, x):
            return np.sum(np.cos(x), axis=-1) + 2.0

        def _gradient(self, x):
            return -np.sin(x)

    p = FederatedProblem([Bump(1.0), Bump(1.0)], bracket=(-4.0, 4.0))
    with pytest.raises(ValueError):
        drift_at_optimum(p, 3, 0.1, x_star=np.pi)


def test_pl_sandwich_tight_example():
    p = two_quadratics()
    rep = pl_sandwich_check(p, 2.0, [0.5])
    assert rep.passed
    assert rep.worst_slack == pytest.approx(0.0, abs=1e-9)


def test_pl_sandwich_identical_quadratics():
    p = FederatedProblem([Quadratic(3.0, 1.0), Quadratic(3.0, 1.0)])
    assert pl_sandwich_check(p, 3.0, np.linspace(-5, 5, 101)).passed


@settings(max_examples=30, deadline=None)
@given(
    a1=st.floats(0.2, 5.0),
    a2=st.floats(0.2, 5.0),
    c1=st.floats(-10.0, 10.0),
    c2=st.floats(-10.0, 10.0),
)
def test_pl_sandwich_random_quadratic_pairs(a1, a2, c1, c2):
    p = FederatedProblem([Quadratic(a1, c1), Quadratic(a2, c2)])
    assert pl_sandwich_check(p, min(a1, a2), np.linspace(-20, 20, 1000)).passed


def test_pl_sandwich_requires_pl_agents():
    with pytest.raises(ValueError):
        pl_sandwich_check(quadratic_huber_problem(-2.0), 1.0, [0.0])


def test_report_serialises_table_fields():
    rep = heterogeneity_report(quadratic_huber_problem(-2.0), rho=(17, 0.00046), bgd_grid=10_001)
    doc = json.loads(rep.to_json(labels={"d": -2.0}))
    assert doc["sigma_f_star"] == pytest.approx(0.625, abs=1e-9)
    assert set(doc["bgd"]) >= {"zeta2", "psi2", "zeta2_plus_psi2", "residual"}
    assert doc["rho"] > 0 and doc["bound_check"]["passed"]
