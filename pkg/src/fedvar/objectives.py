"""Differentiable objective families with exact values, gradients and infima.

Points are numpy arrays whose last axis is the problem dimension ``p``; every
method broadcasts over leading axes. One-dimensional objectives also accept
plain scalars and return scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

__all__ = [
    "CertificationError",
    "Objective",
    "Huber",
    "Softplus",
    "Quadratic",
    "Scaled",
    "FiniteSum",
    "AverageObjective",
    "StackedAverage",
    "certified_infimum",
    "certified_minimizer",
    "objective_from_spec",
]

_PHI = (np.sqrt(5.0) - 1.0) / 2.0


class CertificationError(RuntimeError):
    """Raised when an infimum cannot be certified to the requested tolerance."""


def _as_point(x, dim: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        if dim != 1:
            raise ValueError(f"scalar point given to a {dim}-dimensional objective")
        return a.reshape(1), True
    if a.shape[-1] != dim:
        raise ValueError(f"point has dimension {a.shape[-1]}, objective has {dim}")
    return a, False


class Objective:
    """Base class. Subclasses provide ``_value`` and ``_gradient`` on shaped arrays.

    Families that can be evaluated as a stack (one parameter row per agent)
    set ``stackable = True`` and implement ``_stack_value``/``_stack_gradient``
    taking parameters of shape ``(k, m)`` (or ``(..., k, m)``, one set per
    leading index) and points of shape ``(..., k, p)``.
    Single-object evaluation routes through the same kernels so that batched
    and unbatched results agree bit for bit.
    """

    dim: int = 1
    stackable = False

    @property
    def f_inf(self) -> float:
        raise NotImplementedError

    @property
    def L(self) -> float:
        raise NotImplementedError

    @property
    def mu(self) -> float | None:
        return None

    def value(self, x):
        a, scalar = _as_point(x, self.dim)
        out = self._value(a)
        return float(out) if scalar else out

    def gradient(self, x):
        a, scalar = _as_point(x, self.dim)
        out = self._gradient(a)
        return float(out[0]) if scalar else out

    # stackable families override these two
    def params(self) -> np.ndarray:
        raise NotImplementedError

    def stack_key(self) -> tuple:
        return (type(self).__name__, self.dim) if self.stackable else (id(self),)

    def _value(self, x: np.ndarray) -> np.ndarray:
        P = self.params()[None, :]
        return type(self)._stack_value(P, x[..., None, :])[..., 0]

    def _gradient(self, x: np.ndarray) -> np.ndarray:
        P = self.params()[None, :]
        return type(self)._stack_gradient(P, x[..., None, :])[..., 0, :]


@dataclass(frozen=True, eq=False)
class Huber(Objective):
    """Huber loss with unit radius centred at ``center``.

    ``‖x-c‖²/2`` inside the unit ball and ``‖x-c‖ - 1/2`` outside; C¹ with L=1.
    """

    center: np.ndarray | float = 0.0
    dim: int = 1
    stackable = True

    def __post_init__(self):
        c = np.broadcast_to(np.asarray(self.center, dtype=np.float64), (self.dim,)).copy()
        object.__setattr__(self, "center", c)

    @property
    def f_inf(self) -> float:
        return 0.0

    @property
    def L(self) -> float:
        return 1.0

    def params(self) -> np.ndarray:
        return self.center

    @staticmethod
    def _stack_value(P, X):
        if X.shape[-1] == 1:
            r = np.abs(X[..., 0] - P[..., 0])
        else:
            r = np.sqrt(np.add.reduce((X - P) ** 2, axis=-1))
        return np.where(r < 1.0, 0.5 * r * r, r - 0.5)

    @staticmethod
    def _stack_gradient(P, X):
        diff = X - P
        if X.shape[-1] == 1:
            return diff / np.maximum(np.abs(diff), 1.0)
        r = np.sqrt(np.add.reduce(diff**2, axis=-1, keepdims=True))
        return diff / np.maximum(r, 1.0)


@dataclass(frozen=True, eq=False)
class Softplus(Objective):
    """Coordinate-sum softplus ``Σ_k ln(1 + exp(x_k - shift))``; L=1/4, infimum 0 (not attained)."""

    shift: float = 0.0
    dim: int = 1
    stackable = True

    @property
    def f_inf(self) -> float:
        return 0.0

    @property
    def L(self) -> float:
        return 0.25

    def params(self) -> np.ndarray:
        return np.array([float(self.shift)])

    @staticmethod
    def _stack_value(P, X):
        return np.add.reduce(np.logaddexp(0.0, X - P[..., :1]), axis=-1)

    @staticmethod
    def _stack_gradient(P, X):
        return 0.5 * (1.0 + np.tanh(0.5 * (X - P[..., :1])))


@dataclass(frozen=True, eq=False)
class Quadratic(Objective):
    """``(a/2)‖x - c‖²`` with L = mu = a."""

    a: float = 1.0
    center: np.ndarray | float = 0.0
    dim: int = 1
    stackable = True

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("curvature a must be positive")
        c = np.broadcast_to(np.asarray(self.center, dtype=np.float64), (self.dim,)).copy()
        object.__setattr__(self, "center", c)

    @property
    def f_inf(self) -> float:
        return 0.0

    @property
    def L(self) -> float:
        return float(self.a)

    @property
    def mu(self) -> float:
        return float(self.a)

    def params(self) -> np.ndarray:
        return np.concatenate([[float(self.a)], self.center])

    @staticmethod
    def _stack_value(P, X):
        if X.shape[-1] == 1:
            d = X[..., 0] - P[..., 1]
            return 0.5 * P[..., 0] * (d * d)
        return 0.5 * P[..., 0] * np.add.reduce((X - P[..., 1:]) ** 2, axis=-1)

    @staticmethod
    def _stack_gradient(P, X):
        return P[..., :1] * (X - P[..., 1:])


@dataclass(frozen=True, eq=False)
class Scaled(Objective):
    """``scale * base(x) + offset`` (scale > 0)."""

    base: Objective
    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "dim", self.base.dim)

    @property
    def f_inf(self) -> float:
        return self.scale * self.base.f_inf + self.offset

    @property
    def L(self) -> float:
        return self.scale * self.base.L

    @property
    def mu(self) -> float | None:
        m = self.base.mu
        return None if m is None else self.scale * m

    def _value(self, x):
        return self.scale * self.base._value(x) + self.offset

    def _gradient(self, x):
        return self.scale * self.base._gradient(x)


@dataclass(frozen=True, eq=False)
class FiniteSum(Objective):
    """Mean of component objectives, ``(1/m) Σ_j f_j``.

    ``f_inf`` is taken from the constructor when given, otherwise certified
    numerically over ``bracket`` (1-D only).
    """

    components: tuple
    known_f_inf: float | None = None
    bracket: tuple[float, float] = (-1e3, 1e3)

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("a finite sum needs at least one component")
        dims = {c.dim for c in comps}
        if len(dims) != 1:
            raise ValueError("components must share a dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "dim", dims.pop())

    @cached_property
    def f_inf(self) -> float:
        if self.known_f_inf is not None:
            return float(self.known_f_inf)
        return certified_infimum(self, self.bracket, 1e-10)

    @property
    def L(self) -> float:
        return float(np.mean([c.L for c in self.components]))

    def _value(self, x):
        return np.mean([c._value(x) for c in self.components], axis=0)

    def _gradient(self, x):
        return np.mean([c._gradient(x) for c in self.components], axis=0)


@dataclass(frozen=True, eq=False)
class AverageObjective(Objective):
    """Equal-weight average ``f = (1/n) Σ_i f_i`` of agent objectives.

    Agents of a stackable family are evaluated together, so the average of
    many agents costs a handful of array operations.
    """

    agents: tuple
    bracket: tuple[float, float] = (-1e3, 1e3)
    tol: float = 1e-10
    _groups: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        agents = tuple(self.agents)
        if not agents:
            raise ValueError("need at least one agent")
        dims = {a.dim for a in agents}
        if len(dims) != 1:
            raise ValueError("all agents must share a dimension")
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "dim", dims.pop())
        groups: dict[tuple, list[int]] = {}
        for i, a in enumerate(agents):
            groups.setdefault(a.stack_key(), []).append(i)
        built = []
        for idx in groups.values():
            first = agents[idx[0]]
            if first.stackable:
                P = np.stack([agents[i].params() for i in idx])
                built.append((group_index(idx), type(first), P))
            else:
                built.append((group_index(idx), first, None))
        object.__setattr__(self, "_groups", built)

    @property
    def n(self) -> int:
        return len(self.agents)

    @cached_property
    def f_inf(self) -> float:
        return certified_infimum(self, self.bracket, self.tol)

    @property
    def L(self) -> float:
        return float(np.mean([a.L for a in self.agents]))

    def agent_values(self, X: np.ndarray) -> np.ndarray:
        """Values of every agent; ``X`` has shape ``(..., n, p)``, result ``(..., n)``."""
        out = np.empty(X.shape[:-1])
        for idx, kind, P in self._groups:
            Xi = X[..., idx, :]
            if P is not None:
                out[..., idx] = kind._stack_value(P, Xi)
            else:
                out[..., idx] = kind._value(Xi[..., 0, :])[..., None]
        return out

    def agent_gradients(self, X: np.ndarray) -> np.ndarray:
        """Gradients of every agent; ``X`` has shape ``(..., n, p)``."""
        out = np.empty(X.shape)
        for idx, kind, P in self._groups:
            Xi = X[..., idx, :]
            if P is not None:
                out[..., idx, :] = kind._stack_gradient(P, Xi)
            else:
                out[..., idx, :] = kind._gradient(Xi[..., 0, :])[..., None, :]
        return out

    def _replicate(self, x):
        return np.broadcast_to(x[..., None, :], x.shape[:-1] + (self.n, self.dim))

    def _value(self, x):
        return np.mean(self.agent_values(self._replicate(x)), axis=-1)

    def _gradient(self, x):
        return np.mean(self.agent_gradients(self._replicate(x)), axis=-2)


class StackedAverage:
    """Several structurally identical averages evaluated side by side.

    Row ``r`` of every input uses the parameters of ``averages[rows[r]]``;
    inputs have shape ``(R, n, p)`` (or ``(R, p)`` for ``_value``/``_gradient``).
    The arithmetic per row is that of the underlying average, so results match
    it bit for bit.
    """

    def __init__(self, averages: Sequence[AverageObjective], rows):
        first = averages[0]
        sig = _signature(first)
        for a in averages[1:]:
            if _signature(a) != sig:
                raise ValueError("averages differ in agent layout and cannot be stacked")
        if any(P is None for _, _, P in first._groups):
            raise ValueError("only stackable agent families can be evaluated row-wise")
        rows = np.asarray(rows, dtype=np.int64)
        self.n, self.dim = first.n, first.dim
        self._groups = [
            (idx, kind, np.stack([a._groups[g][2] for a in averages])[rows])
            for g, (idx, kind, _) in enumerate(first._groups)
        ]

    agent_values = AverageObjective.agent_values
    agent_gradients = AverageObjective.agent_gradients
    _replicate = AverageObjective._replicate
    _value = AverageObjective._value
    _gradient = AverageObjective._gradient


def group_index(idx: Sequence[int]):
    """Agent selector for a group: a slice when contiguous (cheap views), else an index array."""
    idx = list(idx)
    if idx == list(range(idx[0], idx[-1] + 1)):
        return slice(idx[0], idx[-1] + 1)
    return np.array(idx)


def index_key(idx) -> tuple:
    if isinstance(idx, slice):
        return tuple(range(idx.start, idx.stop))
    return tuple(int(i) for i in idx)


def _signature(avg: AverageObjective) -> list:
    return [
        (index_key(idx), kind if P is not None else id(kind), None if P is None else P.shape)
        for idx, kind, P in avg._groups
    ]


def _golden(fun, a: float, b: float, iters: int) -> tuple[float, float, float]:
    c = b - _PHI * (b - a)
    d = a + _PHI * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if b - a <= 4.0 * np.finfo(float).eps * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _PHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _PHI * (b - a)
            fd = fun(d)
    return a, b, (c if fc <= fd else d)


def _polish(obj: Objective, a: float, b: float, x_hat: float, iters: int) -> float:
    # bisection on the sign of the derivative when the cell brackets a stationary point
    def grad(t):
        return float(obj._gradient(np.array([t]))[0])

    ga, gb = grad(a), grad(b)
    if not (ga <= 0.0 <= gb):
        return x_hat
    for _ in range(iters):
        m = 0.5 * (a + b)
        if m <= a or m >= b:
            break
        if grad(m) > 0.0:
            b = m
        else:
            a = m
    x_new = a if abs(grad(a)) <= abs(grad(b)) else b
    if float(obj._value(np.array([x_new]))) <= float(obj._value(np.array([x_hat]))):
        return x_new
    return x_hat


def certified_minimizer(
    obj: Objective,
    bracket: tuple[float, float],
    tol: float = 1e-10,
    grid: int = 10_000,
    iters: int = 200,
    starts: int = 8,
) -> tuple[float, float]:
    """Locate the minimiser of a 1-D objective on ``bracket``.

    A uniform grid localises the best few grid-local minima; each is refined
    by golden-section search. The returned value is certified by the residual
    ``L w²/2 + |f'(x)| w`` of the final bracket width ``w``; a minimiser on the
    bracket edge means the bracket was exhausted.

    Returns ``(x_min, f_min)``.
    """
    if obj.dim != 1:
        raise ValueError("certified minimisation is one-dimensional")
    lo, hi = map(float, bracket)
    if not lo < hi:
        raise ValueError("empty bracket")
    xs = np.linspace(lo, hi, grid)
    vals = obj._value(xs[:, None])
    if not np.all(np.isfinite(vals)):
        raise CertificationError("objective is not finite on the bracket")
    interior = np.ones(grid, dtype=bool)
    interior[1:] &= vals[1:] <= vals[:-1]
    interior[:-1] &= vals[:-1] <= vals[1:]
    cand = np.flatnonzero(interior)
    cand = cand[np.argsort(vals[cand], kind="stable")][:starts]

    def fun(t):
        return float(obj._value(np.array([t])))

    best = None
    for k in cand:
        if k == 0 or k == grid - 1:
            g = float(obj._gradient(np.array([xs[k]]))[0])
            # the descent direction points out of the bracket
            if (k == 0 and g > 0) or (k == grid - 1 and g < 0) or g == 0.0:
                x_hat = xs[k]
                if g != 0.0:
                    raise CertificationError(
                        f"minimiser lies on the bracket edge {xs[k]:g}; widen the bracket"
                    )
                cert = 0.0
            else:
                continue
        else:
            a, b, x_hat = _golden(fun, xs[k - 1], xs[k + 1], iters)
            x_hat = _polish(obj, xs[k - 1], xs[k + 1], x_hat, iters)
            w = b - a
            g = float(obj._gradient(np.array([x_hat]))[0])
            w = min(w, abs(g) / obj.L) if g != 0.0 else 0.0
            cert = 0.5 * obj.L * w * w + abs(g) * w
        f_hat = fun(x_hat)
        if best is None or f_hat < best[1]:
            best = (float(x_hat), f_hat, cert)
    if best is None:
        raise CertificationError("no interior minimiser found on the bracket")
    if best[2] > tol:
        raise CertificationError(f"certificate {best[2]:.3g} exceeds tolerance {tol:.3g}")
    return best[0], best[1]


def certified_infimum(obj: Objective, bracket: tuple[float, float], tol: float = 1e-10) -> float:
    """Infimum of a 1-D objective on ``bracket`` certified to ``tol``."""
    return certified_minimizer(obj, bracket, tol)[1]


_KINDS = {
    "huber": Huber,
    "softplus": Softplus,
    "quadratic": Quadratic,
}


def objective_from_spec(spec: dict) -> Objective:
    """Build an objective from ``{kind, params, dimension}``."""
    kind = str(spec["kind"]).lower()
    params = dict(spec.get("params", {}))
    dim = int(spec.get("dimension", 1))
    if kind in _KINDS:
        return _KINDS[kind](dim=dim, **params)
    if kind == "scaled":
        base = objective_from_spec(params.pop("base"))
        return Scaled(base, **params)
    if kind == "finite_sum":
        comps = tuple(objective_from_spec(c) for c in params.pop("components"))
        return FiniteSum(comps, **params)
    raise ValueError(f"unknown objective kind {spec['kind']!r}")
