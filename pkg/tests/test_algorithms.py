import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedvar.algorithms import (
    DivergenceError,
    FedAvgState,
    StepsizePolicy,
    caps_satisfied,
    diminishing_caps,
    diminishing_policy,
    fedavg_round,
    init_scaffold,
    scaffold_caps,
    scaffold_round,
    stepsize_corollary1,
    stepsize_scaffold,
    stepsize_theorem1,
    theorem1_caps,
)
from fedvar.objectives import Huber, Quadratic, Softplus
from fedvar.oracles import NoiseStream, SignPerturbationOracle, sample_gradient
from fedvar.problems import FederatedProblem, softplus_huber_problem

S = NoiseStream(seed=7)


def two_quadratics():
    return FederatedProblem([Quadratic(2.0, 0.0), Quadratic(2.0, 1.0)])


# hand examples ---------------------------------------------------------------


def test_fedavg_single_step():
    p = FederatedProblem([Quadratic(1.0)])
    st1 = fedavg_round(FedAvgState(np.array([1.0])), p, 0.1, 1, S)
    assert st1.x[0] == pytest.approx(0.9, abs=1e-15) and st1.t == 1


def test_fedavg_two_local_steps():
    p = FederatedProblem([Quadratic(1.0)])
    st1 = fedavg_round(FedAvgState(np.array([1.0])), p, 0.1, 2, S)
    assert st1.x[0] == pytest.approx(0.81, abs=1e-15)
    np.testing.assert_allclose(st1.grad_sums, [[1.0 + 0.9]])


def test_fedavg_two_agents():
    st1 = fedavg_round(FedAvgState(np.array([0.0])), two_quadratics(), 0.1, 1, S)
    assert st1.x[0] == pytest.approx(0.1, abs=1e-15)


def test_scaffold_two_agents_hand_trace():
    # agent 2 moves to 0 - 0.1·(-2) = 0.2, so x₁ = 0.1·(0 + 0.2)/2 = 0.01
    p = two_quadratics()
    s0 = init_scaffold(0.0, p)
    s1 = scaffold_round(s0, p, 0.1, 0.1, 1, S)
    assert s1.x[0] == pytest.approx(0.01, abs=1e-15)
    np.testing.assert_allclose(s1.c_agents[:, 0], [0.0, -2.0], atol=1e-15)
    assert s1.c[0] == pytest.approx(-1.0, abs=1e-15)


def test_round_argument_checks():
    p = two_quadratics()
    with pytest.raises(ValueError):
        fedavg_round(FedAvgState(np.array([0.0])), p, 0.1, 0, S)
    with pytest.raises(ValueError):
        scaffold_round(init_scaffold(0.0, p), p, 0.0, 1.0, 1, S)
    with pytest.raises(ValueError):
        scaffold_round(init_scaffold(0.0, p), p, 0.1, -1.0, 1, S)


def test_divergence_is_detected():
    p = FederatedProblem([Quadratic(2.0)])
    state = FedAvgState(np.array([1.0]))
    with pytest.raises(DivergenceError):
        for _ in range(200):
            state = fedavg_round(state, p, 5.0, 1, S)


def test_scaffold_warm_start_uses_one_draw_per_agent():
    p = softplus_huber_problem()
    s0 = init_scaffold(3.0, p, warm_start=NoiseStream(seed=9, trial=1))
    expected = [sample_gradient(o, 3.0, NoiseStream(seed=9, trial=1, t=-1, agent=i)) for i, o in enumerate(p.oracles)]
    np.testing.assert_array_equal(s0.c_agents[:, 0], expected)
    assert s0.c[0] == pytest.approx(np.mean(expected), rel=1e-15)


# update identities -------------------------------------------------------------


def _close(a, b, scale):
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) <= 1e-12 * (1.0 + np.max(np.abs(scale)))


def test_fedavg_aggregation_identity():
    p = softplus_huber_problem()
    state, alpha = FedAvgState(np.array([10.0])), 0.016
    for t in range(300):
        new = fedavg_round(state, p, alpha, 17, NoiseStream(seed=3))
        assert _close(new.x, state.x - alpha / p.n * new.grad_sums.sum(axis=-2), state.x), t
        state = new


def test_scaffold_state_identities():
    p = softplus_huber_problem()
    eta_a, eta_s, Q = 0.004, 2.0, 5
    state = init_scaffold(10.0, p, warm_start=NoiseStream(seed=4))
    for t in range(300):
        new = scaffold_round(state, p, eta_a, eta_s, Q, NoiseStream(seed=4))
        mean_g = new.grad_sums / Q
        assert _close(new.c_agents, mean_g, mean_g), t
        assert _close(new.c, new.c_agents.mean(axis=-2), new.c), t
        assert _close(new.x, state.x - eta_s * eta_a / p.n * new.grad_sums.sum(axis=-2), state.x), t
        state = new


# reductions --------------------------------------------------------------------


def test_single_agent_single_step_is_sgd():
    agent = Softplus(2.0)
    oracle = SignPerturbationOracle(agent)
    p = FederatedProblem([agent], [oracle])
    state, x = FedAvgState(np.array([5.0])), 5.0
    for t in range(1000):
        state = fedavg_round(state, p, 0.05, 1, NoiseStream(seed=11, trial=3))
        x = x - 0.05 * sample_gradient(oracle, x, NoiseStream(seed=11, trial=3, t=t))
        assert state.x[0] == x


@pytest.mark.parametrize("n", [2, 4, 16])
@pytest.mark.parametrize("agent", [Quadratic(1.5, 2.0), Huber(-1.0), Softplus(3.0)], ids=repr)
def test_homogeneous_exact_fedavg_is_gradient_descent(n, agent):
    p = FederatedProblem([agent] * n)
    alpha, Q = 0.1, 3
    state, x = FedAvgState(np.array([4.0])), np.array([4.0])
    for _ in range(50):
        state = fedavg_round(state, p, alpha, Q, S)
        for _ in range(Q):
            x = x - alpha * agent.gradient(x)
        np.testing.assert_array_equal(state.x, x)


@pytest.mark.parametrize("Q, eta_s", [(1, 0.5), (1, 2.0), (4, 1.0)])
def test_homogeneous_scaffold_matches_fedavg(Q, eta_s):
    agent = Huber(2.0)
    p = FederatedProblem([agent] * 4)
    eta_a = 0.05
    sc = init_scaffold(-3.0, p, c_agents=np.full((4, 1), 0.7))
    fa = FedAvgState(np.array([-3.0]))
    for _ in range(100):
        sc = scaffold_round(sc, p, eta_a, eta_s, Q, S)
        fa = fedavg_round(fa, p, eta_a * eta_s, Q, S)
        assert _close(sc.x, fa.x, fa.x)


def test_single_agent_scaffold_matches_fedavg():
    p = FederatedProblem([Quadratic(2.0, 1.0)])
    sc = init_scaffold(5.0, p, c_agents=np.array([[3.0]]))
    fa = FedAvgState(np.array([5.0]))
    for _ in range(50):
        sc = scaffold_round(sc, p, 0.05, 1.0, 3, S)
        fa = fedavg_round(fa, p, 0.05, 3, S)
        assert _close(sc.x, fa.x, fa.x)
        np.testing.assert_array_equal(sc.c, sc.c_agents[0])


# stepsizes -------------------------------------------------------------------


def test_fedavg_stepsize_example():
    assert stepsize_theorem1(1, 0, 1, 100, 1) == pytest.approx(0.0382646, abs=1e-6)
    assert stepsize_theorem1(1, 0, 1, 100, 1) == pytest.approx(1 / (10 + 4200 ** (1 / 3)), rel=1e-15)


def test_bounded_variance_stepsize_is_general_one_at_zero_variance():
    for L, Q, T, n in [(1, 1, 100, 1), (2.5, 17, 4000, 16), (0.3, 4, 10**6, 3)]:
        assert stepsize_corollary1(L, Q, T, n) == pytest.approx(stepsize_theorem1(L, 0, Q, T, n), rel=1e-14)


def test_fedavg_stepsize_leading_term_asymptotics():
    # α(4T)/α(T) tends to 1/2; at T = 10⁶ the √T term dominates once C is large
    r = stepsize_theorem1(1, 10, 1, 4 * 10**6, 1) / stepsize_theorem1(1, 10, 1, 10**6, 1)
    assert r == pytest.approx(0.5, rel=0.05)
    ratios = [stepsize_theorem1(1, 0, 1, 4 * T, 1) / stepsize_theorem1(1, 0, 1, T, 1) for T in (10**6, 10**9, 10**12)]
    assert ratios[0] > ratios[1] > ratios[2] > 0.5
    assert ratios[2] == pytest.approx(0.5, rel=0.01)


def test_scaffold_example():
    s = stepsize_scaffold(1, 0, 1, 100, 1, 1)
    assert s.eta_tilde == pytest.approx(0.0354155, abs=1e-6)
    assert s.eta_tilde == pytest.approx(1 / (math.sqrt(50) + 12 + math.sqrt(84)), rel=1e-15)
    assert s.eta_a == s.eta_tilde


def test_scaffold_split_into_agent_stepsize():
    s = stepsize_scaffold(2.0, 1.0, 5, 1000, 8, eta_s=4.0)
    assert s.eta_a * s.eta_s * 5 == pytest.approx(s.eta_tilde, rel=1e-15)


def test_scaffold_large_server_stepsize_limit():
    L, C, Q, T, n = 1.0, 0.5, 3, 200, 4
    limit = 1 / (math.sqrt((L * L + C * C) * T / (2 * n * Q)) + 12 * (L + C))
    assert stepsize_scaffold(L, C, Q, T, n, eta_s=1e15).eta_tilde == pytest.approx(limit, rel=1e-4)


def test_scaffold_variant_at_zero_variance():
    s = stepsize_scaffold(1, 0, 1, 100, 1, 1, variant="corollary2")
    assert s.eta_tilde == pytest.approx(1 / (math.sqrt(50) + math.sqrt(84) + math.sqrt(70)), rel=1e-15)
    with pytest.raises(ValueError):
        stepsize_scaffold(1, 1, 1, 100, 1, 1, variant="corollary2")


def test_stepsize_argument_checks():
    with pytest.raises(ValueError):
        stepsize_theorem1(1, -1, 1, 100, 1)
    with pytest.raises(ValueError):
        stepsize_theorem1(0, 0, 1, 100, 1)
    with pytest.raises(ValueError):
        stepsize_scaffold(1, 0, 1, 100, 1, eta_s=0)


params = st.tuples(
    st.floats(0.01, 100.0),  # L
    st.floats(0.0, 100.0),  # C
    st.integers(1, 64),  # Q
    st.integers(1, 10**7),  # T
    st.integers(1, 1000),  # n
)


@settings(max_examples=1000, deadline=None)
@given(params)
def test_fedavg_stepsizes_respect_every_cap(p):
    L, C, Q, T, n = p
    ok = caps_satisfied(stepsize_theorem1(L, C, Q, T, n), theorem1_caps(L, C, Q, T, n))
    assert all(ok.values()), ok
    ok = caps_satisfied(stepsize_corollary1(L, Q, T, n), theorem1_caps(L, 0.0, Q, T, n))
    assert all(ok.values()), ok


@settings(max_examples=1000, deadline=None)
@given(params, st.floats(1.0, 100.0))
def test_scaffold_respects_every_cap(p, eta_s):
    # the cube-root cap only follows from the formula when η_s ≥ 1
    L, C, Q, T, n = p
    s = stepsize_scaffold(L, C, Q, T, n, eta_s)
    ok = caps_satisfied(s.eta_tilde, scaffold_caps(L, C, Q, T, n, eta_s))
    assert all(ok.values()), ok


def test_diminishing_cap_example():
    caps = diminishing_caps(1.0, 0.0, 2)
    assert caps["1/C"] == math.inf
    assert min(caps.values()) == pytest.approx(0.144338, abs=1e-6)
    pol = diminishing_policy(10.0, 0.6, L=1.0, C=0.0, Q=2)
    a = pol(np.arange(5000))
    assert np.all(a <= pol.cap)
    # clipped while 10/(t+1)^0.6 ≥ cap, i.e. t + 1 ≤ (10/cap)^(5/3) ≈ 1168.4
    first = math.floor((10.0 / pol.cap) ** (1 / 0.6))
    assert first == 1168
    assert np.all(a[:first] == pol.cap) and a[first] < pol.cap


def test_harmonic_policy():
    pol = diminishing_policy(1.0, 1.0)
    np.testing.assert_array_equal(pol(np.arange(10)), 1.0 / np.arange(1, 11))
    assert pol(4) == 0.2


@pytest.mark.parametrize("q", [0.5, 0.3, 1.2])
def test_diminishing_exponent_range(q):
    with pytest.raises(ValueError):
        diminishing_policy(1.0, q)


def test_policy_kinds():
    assert StepsizePolicy("manual", {"alpha": 0.3})(17) == 0.3
    p = {"L": 1, "C": 0, "Q": 1, "T": 100, "n": 1}
    assert StepsizePolicy("theorem1", p)(0) == stepsize_theorem1(1, 0, 1, 100, 1)
    assert StepsizePolicy("scaffold", {**p, "eta_s": 1.0})(0) == stepsize_scaffold(1, 0, 1, 100, 1, 1).eta_a
    with pytest.raises(ValueError):
        StepsizePolicy("adaptive", {})
