"""Stochastic gradient oracles and the checks that certify or refute variance conditions.

An oracle pairs an objective with a noise construction. Draws are addressed by
a :class:`NoiseStream` coordinate ``(seed, trial, t, agent, step)`` so that a
simulation can be split across trials or workers without changing any value.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import rng
from .objectives import AverageObjective, FiniteSum, StackedAverage, group_index, index_key, Huber, Objective, Softplus, objective_from_spec

__all__ = [
    "NoiseStream",
    "GradientOracle",
    "ExactOracle",
    "SignPerturbationOracle",
    "FiniteSumOracle",
    "AdditiveGaussianOracle",
    "OracleBank",
    "NotFiniteSupportError",
    "RefutationError",
    "CheckReport",
    "make_finite_sum_oracle",
    "sample_gradient",
    "exact_second_moment",
    "conditional_variance",
    "verify_abc",
    "check_unbiasedness",
    "refute_relaxed_growth",
    "oracle_from_spec",
]


class NotFiniteSupportError(TypeError):
    """The oracle's noise has no finite support, so exact enumeration is impossible."""


class RefutationError(RuntimeError):
    """No witness violating the relaxed growth condition was found."""


@dataclass(frozen=True)
class NoiseStream:
    """Coordinates of one draw. Identical coordinates give identical draws."""

    seed: int
    trial: int = 0
    t: int = 0
    agent: int = 0
    step: int = 0

    def at(self, **kw) -> "NoiseStream":
        return NoiseStream(**{**self.__dict__, **kw})


def _agent_coords(stream: NoiseStream):
    return (stream.seed, stream.trial, stream.t, np.array([stream.agent]), stream.step)


class GradientOracle:
    """Base oracle. ``claimed`` optionally holds the (C, D) envelope the oracle is said to meet."""

    noise_kind = "abstract"
    finite_support = False
    objective: Objective
    claimed: tuple[float, float] | None

    def stack_key(self) -> tuple:
        return (id(self),)

    @classmethod
    def _constants(cls, oracles: tuple) -> np.ndarray | None:
        """Per-oracle parameters a stacked draw needs, first axis ``k``."""
        return None

    @classmethod
    def _stack_draw(cls, oracles, X, G, values, coords, const=None):
        """Draws for ``k`` same-kind oracles at points ``X`` of shape ``(..., k, p)``.

        ``G`` holds the exact gradients at ``X``; ``values`` is a zero-argument
        callable returning agent values ``(..., k)`` when a draw needs them.
        ``const`` overrides :meth:`_constants` (row-wise stacks pass one set per
        leading index).
        """
        raise NotImplementedError

    def support(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Probabilities ``(K,)`` and draws ``(K, ..., p)`` of a finite-support oracle."""
        raise NotFiniteSupportError(f"{self.noise_kind} noise has no finite support")


@dataclass(frozen=True, eq=False)
class ExactOracle(GradientOracle):
    objective: Objective
    claimed: tuple[float, float] | None = None
    noise_kind = "exact"
    finite_support = True

    def stack_key(self) -> tuple:
        return ("exact",)

    @classmethod
    def _stack_draw(cls, oracles, X, G, values, coords, const=None):
        return G

    def support(self, x):
        return np.ones(1), self.objective._gradient(x)[None]


@dataclass(frozen=True, eq=False)
class SignPerturbationOracle(GradientOracle):
    """``∇f(x) ± m(x)`` with a fair sign; bit 0 adds, bit 1 subtracts.

    ``magnitude`` is ``"sqrt_abs"`` for ``m(x) = sqrt(‖x - center‖)`` or
    ``"sqrt_value"`` for ``m(x) = sqrt(f(x) - f_inf)``. In ``p`` dimensions the
    perturbation is spread evenly over the coordinates, so its squared norm is
    ``m(x)²`` either way.
    """

    objective: Objective
    magnitude: str | None = None
    center: np.ndarray | float | None = None
    claimed: tuple[float, float] | None = None
    noise_kind = "sign_perturbation"
    finite_support = True

    def __post_init__(self):
        mag = self.magnitude
        if mag is None:
            mag = "sqrt_abs" if isinstance(self.objective, Huber) else "sqrt_value"
        if mag not in ("sqrt_abs", "sqrt_value"):
            raise ValueError(f"unknown magnitude rule {mag!r}")
        object.__setattr__(self, "magnitude", mag)
        c = self.center
        if c is None:
            c = getattr(self.objective, "center", 0.0)
        c = np.broadcast_to(np.asarray(c, dtype=np.float64), (self.objective.dim,)).copy()
        object.__setattr__(self, "center", c)

    def stack_key(self) -> tuple:
        return ("sign", self.magnitude)

    @classmethod
    def _constants(cls, oracles: tuple) -> np.ndarray:
        return _sign_constants(tuple(oracles))

    @classmethod
    def _magnitudes(cls, oracles, X, values, const=None):
        if const is None:
            const = cls._constants(oracles)
        if oracles[0].magnitude == "sqrt_abs":
            if X.shape[-1] == 1:
                return np.sqrt(np.abs(X[..., 0] - const[..., 0]))
            return np.sqrt(np.sqrt(np.sum((X - const) ** 2, axis=-1)))
        return np.sqrt(np.maximum(values() - const, 0.0))

    @classmethod
    def _stack_draw(cls, oracles, X, G, values, coords, const=None):
        m = cls._magnitudes(oracles, X, values, const)
        p = X.shape[-1]
        if p > 1:
            m = m / np.sqrt(p)
        bit = rng.fair_bit(*coords)
        signed = np.where(bit == 0, m, -m)
        return G + signed[..., None]

    def support(self, x):
        x = np.asarray(x, dtype=np.float64)
        g = self.objective._gradient(x)
        vals = lambda: self.objective._value(x)[..., None]  # noqa: E731
        m = self._magnitudes([self], x[..., None, :], vals)[..., 0]
        if x.shape[-1] > 1:
            m = m / np.sqrt(x.shape[-1])
        return np.array([0.5, 0.5]), np.stack([g + m[..., None], g - m[..., None]])


@functools.lru_cache(maxsize=256)
def _sign_constants(oracles: tuple) -> np.ndarray:
    if oracles[0].magnitude == "sqrt_abs":
        return np.stack([o.center for o in oracles])
    return np.array([o.objective.f_inf for o in oracles])


@dataclass(frozen=True, eq=False)
class FiniteSumOracle(GradientOracle):
    """Subsampled gradient of a finite sum ``(1/m) Σ_j f_j``.

    With replacement, ``b`` indices are drawn uniformly and independently;
    without replacement, a uniform ``b``-subset is drawn. Either way the draw is
    the mean component gradient over the sample, i.e. weights ``ξ_j`` with
    ``E ξ_j = 1``.
    """

    objective: FiniteSum
    strategy: str = "with_replacement"
    b: int = 1
    claimed: tuple[float, float] | None = None
    finite_support = True

    def __post_init__(self):
        m = len(self.objective.components)
        if self.strategy not in ("with_replacement", "without_replacement"):
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")
        if not 1 <= self.b <= m:
            raise ValueError(f"batch size b={self.b} outside [1, {m}]")

    @property
    def noise_kind(self) -> str:
        return f"finite_sum_{self.strategy}"

    @property
    def m(self) -> int:
        return len(self.objective.components)

    def _component_grads(self, x):
        return np.stack([c._gradient(x) for c in self.objective.components])

    def _draw_one(self, x, coords):
        comp = self._component_grads(x)  # (m, ..., p)
        m, b = self.m, self.b
        lead = x.shape[:-1]

        def u(lane):
            return np.broadcast_to(rng.uniform(*coords, lane), lead)

        if self.strategy == "with_replacement":
            idx = np.stack([np.minimum((u(k) * m).astype(np.int64), m - 1) for k in range(b)])
        else:
            keys = np.stack([u(j) for j in range(m)])
            idx = np.argsort(keys, axis=0, kind="stable")[:b]
        picked = np.take_along_axis(comp, idx[..., None], axis=0)
        return np.sum(picked, axis=0) / b

    @classmethod
    def _stack_draw(cls, oracles, X, G, values, coords, const=None):
        (o,) = oracles
        shape = X.shape[:-1]

        def squeeze(c):
            if isinstance(c, rng.Prefix):
                return rng.Prefix(np.broadcast_to(c.h, shape)[..., 0], c.depth)
            return np.broadcast_to(np.asarray(c), shape)[..., 0]

        co = tuple(squeeze(c) for c in coords)
        return o._draw_one(X[..., 0, :], co)[..., None, :]

    def support(self, x):
        x = np.asarray(x, dtype=np.float64)
        comp = self._component_grads(x)
        m, b = self.m, self.b
        if self.strategy == "with_replacement":
            tuples = list(itertools.product(range(m), repeat=b))
        else:
            tuples = list(itertools.combinations(range(m), b))
        draws = np.stack([np.sum(comp[list(s)], axis=0) / b for s in tuples])
        return np.full(len(tuples), 1.0 / len(tuples)), draws


@dataclass(frozen=True, eq=False)
class AdditiveGaussianOracle(GradientOracle):
    """``∇f(x) + sqrt(var) · z`` with ``z`` standard normal per coordinate."""

    objective: Objective
    var: float = 1.0
    claimed: tuple[float, float] | None = None
    noise_kind = "additive_gaussian"
    finite_support = False

    def stack_key(self) -> tuple:
        return ("gauss",)

    @classmethod
    def _constants(cls, oracles: tuple) -> np.ndarray:
        return np.sqrt(np.array([o.var for o in oracles]))

    @classmethod
    def _stack_draw(cls, oracles, X, G, values, coords, const=None):
        std = cls._constants(oracles) if const is None else const
        p = X.shape[-1]
        z = np.stack([rng.standard_normal(*coords, j) for j in range(p)], axis=-1)
        return G + std[..., None] * z

    def analytic_variance(self, x) -> float:
        return self.objective.dim * self.var


def make_finite_sum_oracle(
    components: Sequence[Objective], strategy: str = "with_replacement", b: int = 1, **kw
) -> FiniteSumOracle:
    return FiniteSumOracle(FiniteSum(tuple(components), **kw), strategy=strategy, b=b)


# coordinates after the seed: (trial, t, agent) for a round key, plus step
_STEP_DEPTH = 4
_S63 = np.uint64(63)


def _agent_ids(idx) -> np.ndarray:
    return np.arange(idx.start, idx.stop) if isinstance(idx, slice) else idx


class OracleBank:
    """Draws for all agents of a problem at once.

    Oracles of the same kind are sampled together; the exact agent gradients
    come from the grouped evaluation of the averaged objective.
    """

    def __init__(self, oracles: Sequence[GradientOracle], average):
        self.oracles = tuple(oracles)
        self.average = average
        groups: dict[tuple, list[int]] = {}
        for i, o in enumerate(self.oracles):
            groups.setdefault(o.stack_key(), []).append(i)
        built = []
        for idx in groups.values():
            group = tuple(self.oracles[i] for i in idx)
            # a per-group evaluator so a draw only computes the values it needs
            sub = AverageObjective(tuple(o.objective for o in group))
            built.append((group_index(idx), group, type(group[0])._constants(group), sub))
        self._groups = built
        self._finish()

    def _finish(self):
        self.deterministic = all(isinstance(o, ExactOracle) for o in self.oracles)
        self._sign_only = all(type(g[0]) is SignPerturbationOracle for _, g, _, _ in self._groups)
        self._sign_parts = self._plan_sign_parts() if self._sign_only else None

    def _plan_sign_parts(self) -> list:
        # per group, the cheapest route to gradients and magnitudes that keeps the arithmetic unchanged
        dim = self.oracles[0].objective.dim
        parts = []
        for idx, group, const, sub in self._groups:
            single = len(sub._groups) == 1 and sub._groups[0][2] is not None
            grad = sub._groups[0][1:] if single else None
            if dim == 1 and group[0].magnitude == "sqrt_abs":
                parts.append((idx, "abs", grad, const[..., 0], group, sub))
            elif group[0].magnitude == "sqrt_value" and single:
                parts.append((idx, "value", grad, const, group, sub))
            else:
                parts.append((idx, "generic", grad, const, group, sub))
        return parts

    @classmethod
    def stacked(cls, banks: Sequence["OracleBank"], rows, average) -> "OracleBank":
        """Row-wise bank: row ``r`` draws like ``banks[rows[r]]``; ``average`` must be stacked the same way."""
        first = banks[0]
        def layout(b):
            return [(index_key(idx), tuple(o.stack_key() for o in g)) for idx, g, _, _ in b._groups]

        for b in banks[1:]:
            if layout(b) != layout(first):
                raise ValueError("oracle banks differ in layout and cannot be stacked")
        out = cls.__new__(cls)
        out.oracles = first.oracles
        out.average = average
        out._groups = []
        for g, (idx, group, const, sub) in enumerate(first._groups):
            if const is not None:
                const = np.stack([b._groups[g][2] for b in banks])[rows]
            sub = StackedAverage([b._groups[g][3] for b in banks], rows)
            out._groups.append((idx, group, const, sub))
        out._finish()
        return out

    def round_key(self, seed, trial, t) -> rng.Prefix:
        """Hash prefix over ``(seed, trial, t, agent)`` for all agents, shape ``(..., n)``."""
        # the (seed, trial) part is fixed for a whole run; reuse it while the same arrays come back
        cached = getattr(self, "_trial_key", None)
        if cached is None or cached[0] is not seed or cached[1] is not trial:
            cached = (seed, trial, rng.prefix(seed, trial))
            self._trial_key = cached
        return rng.prefix(cached[2], t, np.arange(len(self.oracles)))

    def step_keys(self, seed, trial, t, Q: int) -> rng.Prefix:
        """Hash prefixes for local steps ``0..Q-1`` of one round, shape ``(Q, ..., n)``.

        ``step_keys(...)[ell]`` may be passed as ``key`` to :meth:`draw` for step ``ell``.
        """
        rk = self.round_key(seed, trial, t)
        steps = np.arange(Q, dtype=np.uint64).reshape((Q,) + (1,) * rk.h.ndim)
        return rng.prefix(rk, steps)

    def draw(self, X: np.ndarray, seed, trial, t, step, key: rng.Prefix | None = None) -> np.ndarray:
        """Stochastic gradients at agent points ``X`` of shape ``(..., n, p)``.

        ``key`` may carry :meth:`round_key` for the same ``(seed, trial, t)``
        or one entry of :meth:`step_keys`; the draws are identical, only cheaper.
        """
        if key is not None and self._sign_only:
            # one hash per step for every agent; groups take their columns
            return self._sign_draw(X, key if key.depth == _STEP_DEPTH else rng.prefix(key, step))
        G = self.average.agent_gradients(X)
        if self.deterministic:
            return G
        if key is not None:
            h = key if key.depth == _STEP_DEPTH else rng.prefix(key, step)
        if len(self._groups) == 1:
            idx, group, const, sub = self._groups[0]
            coords = (seed, trial, t, np.arange(len(self.oracles)), step) if key is None else (h,)
            return type(group[0])._stack_draw(group, X, G, lambda: sub.agent_values(X), coords, const)
        out = np.empty_like(G)
        for idx, group, const, sub in self._groups:
            coords = (seed, trial, t, _agent_ids(idx), step) if key is None else (h[..., idx],)
            Xi = X[..., idx, :]
            vals = lambda sub=sub, Xi=Xi: sub.agent_values(Xi)  # noqa: E731
            out[..., idx, :] = type(group[0])._stack_draw(group, Xi, G[..., idx, :], vals, coords, const)
        return out

    def _sign_draw(self, X, h):
        # all agents sign-perturbed: gradient plus a signed magnitude, group by group
        out = np.empty(X.shape)
        sign = np.where((h.h >> _S63) == 0, 1.0, -1.0)
        scale = np.sqrt(X.shape[-1]) if X.shape[-1] > 1 else None
        for idx, mode, grad, const, group, sub in self._sign_parts:
            Xi = X[..., idx, :]
            G = sub.agent_gradients(Xi) if grad is None else grad[0]._stack_gradient(grad[1], Xi)
            if mode == "abs":
                M = np.sqrt(np.abs(Xi[..., 0] - const))
            elif mode == "value":
                M = np.sqrt(np.maximum(grad[0]._stack_value(grad[1], Xi) - const, 0.0))
            else:
                M = SignPerturbationOracle._magnitudes(group, Xi, lambda: sub.agent_values(Xi), const)
            if scale is not None:
                M = M / scale
            out[..., idx, :] = G + (M * sign[..., idx])[..., None]
        return out


def sample_gradient(oracle: GradientOracle, x, stream: NoiseStream) -> np.ndarray:
    """One draw ``g(x; ξ)`` at the stream coordinates; ``E g = ∇f(x)``."""
    obj = oracle.objective
    xa = np.asarray(x, dtype=np.float64)
    scalar = xa.ndim == 0
    if scalar:
        xa = xa.reshape(1)
    if xa.shape[-1] != obj.dim:
        raise ValueError("point dimension does not match the oracle's objective")
    X = xa[..., None, :]
    G = obj._gradient(xa)[..., None, :]
    vals = lambda: obj._value(xa)[..., None]  # noqa: E731
    g = type(oracle)._stack_draw([oracle], X, G, vals, _agent_coords(stream))[..., 0, :]
    return float(g[0]) if scalar else g


def _point(x, dim):
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(1) if a.ndim == 0 else a


def exact_second_moment(oracle: GradientOracle, x) -> np.ndarray | float:
    """``E‖g(x; ξ)‖²`` by enumerating the noise support."""
    xa = _point(x, oracle.objective.dim)
    probs, draws = oracle.support(xa)
    out = np.tensordot(probs, np.sum(draws**2, axis=-1), axes=1)
    return float(out) if np.ndim(out) == 0 else out


def conditional_variance(oracle: GradientOracle, x) -> np.ndarray | float:
    """``E‖g(x; ξ) - ∇f(x)‖²`` exactly (finite support or analytic Gaussian)."""
    xa = _point(x, oracle.objective.dim)
    if isinstance(oracle, AdditiveGaussianOracle):
        out = np.full(xa.shape[:-1], oracle.analytic_variance(xa))
    else:
        probs, draws = oracle.support(xa)
        g = oracle.objective._gradient(xa)
        out = np.tensordot(probs, np.sum((draws - g) ** 2, axis=-1), axes=1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class CheckReport:
    """Outcome of a pointwise check over probe points."""

    name: str
    passed: bool
    n_points: int
    n_failures: int
    worst_slack: float
    worst_point: float | None = None
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.n_points} points, {self.n_failures} failures, worst slack {self.worst_slack:.6g}"


def _probes(probe_points, dim) -> np.ndarray:
    P = np.asarray(probe_points, dtype=np.float64)
    if P.ndim == 1 and dim == 1:
        P = P[:, None]
    if P.ndim != 2 or P.shape[1] != dim or P.shape[0] == 0:
        raise ValueError("probe points must be a non-empty (N, p) array")
    return P


def _sampled_draws(oracle, P, n_samples, stream):
    steps = np.arange(n_samples)
    X = np.broadcast_to(P[None, :, None, :], (n_samples, P.shape[0], 1, P.shape[1]))
    G = oracle.objective._gradient(P)[None, :, None, :]
    G = np.broadcast_to(G, X.shape)
    vals = lambda: np.broadcast_to(oracle.objective._value(P)[None, :, None], X.shape[:-1])  # noqa: E731
    probe_ids = np.arange(P.shape[0])[None, :, None]
    coords = (stream.seed, stream.trial, probe_ids, np.array([stream.agent]), steps[:, None, None])
    draws = type(oracle)._stack_draw([oracle], X, G, vals, coords)[..., 0, :]
    return draws, G[..., 0, :]


def verify_abc(
    oracle: GradientOracle,
    C: float,
    D: float,
    probe_points,
    n_samples: int | None = None,
    stream: NoiseStream | None = None,
) -> CheckReport:
    """Check ``E‖g - ∇f‖² ≤ C (f(x) - f_inf) + D`` at every probe point.

    Finite-support oracles are checked exactly. Otherwise the variance is
    estimated from ``n_samples`` draws and a 4-sigma margin is allowed.
    """
    if C < 0 or D < 0:
        raise ValueError("C and D must be non-negative")
    obj = oracle.objective
    P = _probes(probe_points, obj.dim)
    bound = C * (obj._value(P) - obj.f_inf) + D
    if oracle.finite_support:
        var = conditional_variance(oracle, P)
        margin = np.zeros_like(var)
    else:
        if n_samples is None or n_samples < 100:
            raise ValueError("sampled ABC verification needs n_samples >= 100")
        stream = stream or NoiseStream(seed=0)
        draws, G = _sampled_draws(oracle, P, n_samples, stream)
        sq = np.sum((draws - G) ** 2, axis=-1)  # (n_samples, N)
        var = sq.mean(axis=0)
        margin = 4.0 * sq.std(axis=0, ddof=1) / np.sqrt(n_samples)
    slack = bound + margin - var
    fails = int(np.sum(slack < 0))
    k = int(np.argmin(slack))
    return CheckReport(
        name=f"ABC(C={C:g}, D={D:g}) {oracle.noise_kind}",
        passed=fails == 0,
        n_points=P.shape[0],
        n_failures=fails,
        worst_slack=float(slack[k]),
        worst_point=float(P[k, 0]),
    )


def check_unbiasedness(
    oracle: GradientOracle,
    x,
    n_samples: int = 1000,
    stream: NoiseStream | None = None,
) -> CheckReport:
    """Exact support mean for finite-support oracles, a 4-sigma Monte Carlo test otherwise."""
    if n_samples < 1000:
        raise ValueError("unbiasedness check needs n_samples >= 1000")
    obj = oracle.objective
    P = _probes(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1, obj.dim), obj.dim)
    G = obj._gradient(P)
    if oracle.finite_support:
        probs, draws = oracle.support(P)
        mean = np.tensordot(probs, draws, axes=1)
        tol = 1e-12 * np.maximum(1.0, np.abs(G))
        err = np.abs(mean - G)
    else:
        stream = stream or NoiseStream(seed=0)
        draws, _ = _sampled_draws(oracle, P, n_samples, stream)
        mean = draws.mean(axis=0)
        tol = 4.0 * draws.std(axis=0, ddof=1) / np.sqrt(n_samples)
        err = np.abs(mean - G)
    slack = (tol - err).min(axis=-1)
    fails = int(np.sum(slack < 0))
    k = int(np.argmin(slack))
    return CheckReport(
        name=f"unbiased {oracle.noise_kind}",
        passed=fails == 0,
        n_points=P.shape[0],
        n_failures=fails,
        worst_slack=float(slack[k]),
        worst_point=float(P[k, 0]),
        detail={"mean": mean.tolist(), "gradient": G.tolist()},
    )


def _violates_relaxed_growth(oracle, x, sigma2, eta2):
    second = exact_second_moment(oracle, x)
    g = oracle.objective._gradient(_point(x, oracle.objective.dim))
    rhs = sigma2 + (eta2 + 1.0) * np.sum(g**2, axis=-1)
    return np.asarray(second > rhs)


def softplus_threshold(shift: float, sigma2: float, eta2: float) -> float:
    """Point beyond which the softplus sign-perturbation oracle breaks relaxed growth.

    ``ln(e^{σ²+η²} - 1) + shift``, written to stay finite for large arguments.
    """
    s = sigma2 + eta2
    return s + np.log(-np.expm1(-s)) + shift


def refute_relaxed_growth(oracle: GradientOracle, sigma2: float, eta2: float) -> float:
    """Return a point where ``E‖g‖² > σ² + (η² + 1)‖∇f‖²``.

    Softplus sign-perturbation oracles use the closed-form threshold plus one;
    other finite-support oracles are searched on a log-spaced grid reaching
    ``10⁶`` on both sides of the perturbation centre. The inequality is checked
    exactly before the point is returned.
    """
    if sigma2 < 0 or eta2 < 0 or (sigma2 == 0 and eta2 == 0):
        raise ValueError("sigma2, eta2 must be non-negative and not both zero")
    obj = oracle.objective
    if obj.dim != 1:
        raise ValueError("relaxed-growth refutation is implemented in one dimension")
    if not oracle.finite_support:
        raise NotFiniteSupportError("refutation needs an exactly enumerable oracle")
    if (
        isinstance(oracle, SignPerturbationOracle)
        and isinstance(obj, Softplus)
        and oracle.magnitude == "sqrt_value"
    ):
        x_w = softplus_threshold(obj.shift, sigma2, eta2) + 1.0
        if bool(_violates_relaxed_growth(oracle, x_w, sigma2, eta2)):
            return float(x_w)
        raise RefutationError(f"closed-form witness {x_w:g} failed the exact check")
    center = float(oracle.center[0]) if isinstance(oracle, SignPerturbationOracle) else 0.0
    mags = np.logspace(-6, 6, 4001)
    cands = np.concatenate([mags, -mags]) + center
    order = np.argsort(np.abs(cands - center), kind="stable")
    cands = cands[order]
    hits = np.flatnonzero(_violates_relaxed_growth(oracle, cands[:, None], sigma2, eta2))
    if hits.size == 0:
        raise RefutationError("no relaxed-growth violation found on |x| <= 1e6")
    return float(cands[hits[0]])


def oracle_from_spec(objective: Objective, spec: dict | None) -> GradientOracle:
    """Build an oracle from ``{noise_kind, params, C, D}``."""
    spec = dict(spec or {"noise_kind": "exact"})
    kind = str(spec.get("noise_kind", "exact")).lower()
    params = dict(spec.get("params", {}))
    claimed = None
    if "C" in spec or "D" in spec:
        claimed = (float(spec.get("C", 0.0)), float(spec.get("D", 0.0)))
    if kind == "exact":
        return ExactOracle(objective, claimed=claimed)
    if kind == "sign_perturbation":
        return SignPerturbationOracle(objective, claimed=claimed, **params)
    if kind == "additive_gaussian":
        return AdditiveGaussianOracle(objective, claimed=claimed, **params)
    if kind in ("finite_sum_with_replacement", "finite_sum_without_replacement"):
        strategy = kind.removeprefix("finite_sum_")
        if not isinstance(objective, FiniteSum):
            comps = params.pop("components", None)
            if comps is None:
                raise ValueError("finite-sum oracle needs a finite_sum objective or components")
            objective = FiniteSum(tuple(objective_from_spec(c) for c in comps))
        return FiniteSumOracle(objective, strategy=strategy, b=int(params.get("b", 1)), claimed=claimed)
    raise ValueError(f"unknown noise kind {spec.get('noise_kind')!r}")
