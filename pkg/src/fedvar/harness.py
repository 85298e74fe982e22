"""Deterministic experiment runner.

A :class:`RunConfig` fixes everything about an experiment. Trials are
independent; each trial's noise is addressed by its own derived seed and
index, so splitting trials over workers or batches leaves every number
unchanged. Aggregates use exactly rounded sums, so they do not depend on the
order in which trials finish.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng
from .algorithms import (
    DIVERGENCE_THRESHOLD,
    FedAvgState,
    StepsizePolicy,
    fedavg_round,
    init_scaffold,
    scaffold_round,
)
from .heterogeneity import estimate_bgd, sigma_f_star
from .oracles import NoiseStream
from .problems import FederatedProblem, ProblemStack, StackError, problem_from_spec

__all__ = [
    "RunConfig",
    "TrajectoryRecord",
    "AggregateResult",
    "ExperimentFailure",
    "simulate",
    "simulate_batch",
    "run_many",
    "run_trials",
    "run_trial",
    "run_experiment",
    "aggregate",
    "reproduce_table2",
    "reproduce_fig1",
    "diminishing_decay_check",
    "export_csv",
    "read_csv",
    "export_aggregate_csv",
    "read_aggregate_csv",
    "TRAJECTORY_HEADER",
    "AGGREGATE_HEADER",
]

TRAJECTORY_HEADER = [
    "algorithm", "d", "stepsize", "Q", "T", "seed", "t", "gap", "grad_norm_sq", "running_min_grad_norm_sq",
]
AGGREGATE_HEADER = [
    "algorithm", "d", "stepsize", "Q", "T", "t", "mean_gap", "se_gap", "mean_grad_norm_sq", "n_effective",
]

# trials advanced together in one vectorised batch; fixed so results never depend on --jobs
CHUNK = 512


class ExperimentFailure(RuntimeError):
    """Every trial of an experiment diverged."""


@dataclass(frozen=True)
class RunConfig:
    """Complete description of an experiment.

    ``problem`` is a problem spec (see :func:`problem_from_spec`), ``stepsize``
    a policy spec ``{"kind": ..., **params}``. For SCAFFOLD the stepsize is the
    agent stepsize ``η_a`` and ``eta_s`` the server stepsize.
    """

    problem: dict
    algorithm: str = "fedavg"
    stepsize: dict = field(default_factory=lambda: {"kind": "manual", "alpha": 0.01})
    Q: int = 1
    T: int = 100
    n_runs: int = 1
    x0: float | list = 0.0
    base_seed: int = 42
    record_every: int = 10
    eta_s: float = 1.0
    c0: str = "zero"

    def __post_init__(self):
        if self.algorithm not in ("fedavg", "scaffold"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.T < 1 or self.n_runs < 1 or self.Q < 1 or self.record_every < 1:
            raise ValueError("T, n_runs, Q and record_every must be at least 1")
        if not 0 <= int(self.base_seed) < 2**64:
            raise ValueError("base_seed must be an unsigned 64-bit integer")
        if self.c0 not in ("zero", "warm"):
            raise ValueError("c0 must be 'zero' or 'warm'")
        if self.eta_s <= 0:
            raise ValueError("eta_s must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        return cls.from_dict(load_document(path))

    def policy(self) -> StepsizePolicy:
        spec = dict(self.stepsize)
        kind = spec.pop("kind", "manual")
        return StepsizePolicy(kind, spec)

    def build_problem(self) -> FederatedProblem:
        return problem_from_spec(self.problem)


def load_document(path: str | os.PathLike) -> dict:
    """Read a JSON or TOML config document."""
    p = Path(path)
    text = p.read_bytes()
    if p.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text.decode())
    return json.loads(text)


@dataclass
class TrajectoryRecord:
    """Metrics of one trial at the recorded rounds."""

    algorithm: str
    d: float | None
    stepsize: str
    Q: int
    T: int
    seed: int
    trial: int
    t: np.ndarray
    gap: np.ndarray
    grad_norm_sq: np.ndarray
    running_min: np.ndarray
    diverged: bool = False

    @property
    def final_gap(self) -> float:
        return float(self.gap[-1]) if len(self.gap) else math.nan

    def equals(self, other: "TrajectoryRecord") -> bool:
        """Bit-level equality of every field."""
        scalars = ("algorithm", "d", "stepsize", "Q", "T", "seed", "trial", "diverged")
        if any(getattr(self, k) != getattr(other, k) for k in scalars):
            return False
        return all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
            for k in ("t", "gap", "grad_norm_sq", "running_min")
        )


def _x0_array(x0, dim: int) -> np.ndarray:
    a = np.asarray(x0, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.full(dim, a[0])
    if a.size != dim:
        raise ValueError(f"x0 has {a.size} coordinates, problem dimension is {dim}")
    return a


def _recorded_rounds(T: int, every: int) -> np.ndarray:
    ts = list(range(0, T + 1, every))
    if ts[-1] != T:
        ts.append(T)
    return np.array(ts)


def _batch_key(c: RunConfig) -> tuple:
    # configs agreeing on these can advance in one vectorised batch
    return (c.algorithm, c.Q, c.T, c.record_every, c.eta_s, c.c0)


def simulate(
    problem: FederatedProblem,
    config: RunConfig,
    trials: Sequence[int],
) -> list[TrajectoryRecord]:
    """Run the given trial indices of ``config`` as one vectorised batch."""
    return simulate_batch([(problem, config, list(trials))])


def simulate_batch(items: Sequence[tuple[FederatedProblem, RunConfig, Sequence[int]]]) -> list[TrajectoryRecord]:
    """Advance the trials of several configs together.

    ``items`` holds ``(problem, config, trial_indices)``; the configs must agree
    on algorithm, ``Q``, ``T``, ``record_every``, ``eta_s`` and ``c0``, and the
    problems must share an agent layout. Each row is computed exactly as it
    would be on its own, so the batch composition never changes a result.
    """
    items = [(p, c, list(tr)) for p, c, tr in items if len(tr)]
    if not items:
        return []
    base = items[0][1]
    if any(_batch_key(c) != _batch_key(base) for _, c, _ in items):
        raise ValueError("configs in one batch must share algorithm, Q, T, record_every, eta_s and c0")
    problems: list[FederatedProblem] = []
    row_prob, row_cfg, trial_list = [], [], []
    for k, (p, c, tr) in enumerate(items):
        if not any(p is q for q in problems):
            problems.append(p)
        j = next(i for i, q in enumerate(problems) if q is p)
        row_prob += [j] * len(tr)
        row_cfg += [k] * len(tr)
        trial_list += tr
    row_cfg = np.array(row_cfg)
    trials = np.asarray(trial_list, dtype=np.int64)
    R = len(trials)
    if len(problems) == 1:
        sim = problems[0]
        f_star = np.full(R, problems[0].f_star)
    else:
        sim = ProblemStack(problems, row_prob)
        f_star = sim.f_star
    dim = problems[0].dim
    configs = [c for _, c, _ in items]
    seeds = np.array(
        [rng.derive_seed(configs[k].base_seed, int(i)) for k, i in zip(row_cfg, trials)], dtype=np.uint64
    )
    stream = NoiseStream(seed=seeds[:, None], trial=trials[:, None])
    policies = [c.policy() for c in configs]
    x0 = np.stack([_x0_array(configs[k].x0, dim) for k in row_cfg])
    avg = sim.average
    rec_t = _recorded_rounds(base.T, base.record_every)
    rec_set = set(rec_t.tolist())
    gaps = np.empty((len(rec_t), R))
    gns = np.empty((len(rec_t), R))
    mins = np.empty((len(rec_t), R))
    running = np.full(R, np.inf)
    diverged = np.zeros(R, dtype=bool)

    shared = all(c.stepsize == configs[0].stepsize for c in configs)

    def stepsize(t):
        if shared:
            return policies[0](t)
        return np.array([pol(t) for pol in policies])[row_cfg][:, None, None]

    if base.algorithm == "fedavg":
        state = FedAvgState(x0, 0)
    else:
        warm = stream if base.c0 == "warm" else None
        state = init_scaffold(x0, sim, warm_start=warm)

    k = 0
    with np.errstate(all="ignore"):
        for t in range(base.T + 1):
            x = state.x
            gn = np.sum(avg._gradient(x) ** 2, axis=-1)
            diverged |= ~np.all(np.isfinite(x) & (np.abs(x) <= DIVERGENCE_THRESHOLD), axis=-1)
            gn = np.where(diverged, np.nan, gn)
            running = np.where(diverged, np.nan, np.fmin(running, gn))
            if t in rec_set:
                gaps[k] = np.where(diverged, np.nan, avg._value(x) - f_star)
                gns[k] = gn
                mins[k] = running
                k += 1
            if t == base.T:
                break
            a = stepsize(t)
            if base.algorithm == "fedavg":
                state = fedavg_round(state, sim, a, base.Q, stream, check=False)
            else:
                state = scaffold_round(state, sim, a, base.eta_s, base.Q, stream, check=False)

    labels = [pol.label() for pol in policies]
    out = []
    for r in range(R):
        c = int(row_cfg[r])
        d = items[c][0].labels.get("d")
        out.append(
            TrajectoryRecord(
                algorithm=base.algorithm,
                d=None if d is None else float(d),
                stepsize=labels[c],
                Q=base.Q,
                T=base.T,
                seed=int(seeds[r]),
                trial=int(trials[r]),
                t=rec_t.copy(),
                gap=gaps[:, r].copy(),
                grad_norm_sq=gns[:, r].copy(),
                running_min=mins[:, r].copy(),
                diverged=bool(diverged[r]),
            )
        )
    return out


def run_trial(config: RunConfig, trial_index: int, problem: FederatedProblem | None = None) -> TrajectoryRecord:
    """One trial; deterministic in ``(config, trial_index)``."""
    problem = problem or config.build_problem()
    return simulate(problem, config, [trial_index])[0]


def _units(configs: Sequence[RunConfig]) -> list[list[tuple[int, list[int]]]]:
    # fixed work units of at most CHUNK rows; each unit only mixes batch-compatible configs
    order: dict[tuple, list[int]] = {}
    for k, c in enumerate(configs):
        order.setdefault(_batch_key(c), []).append(k)
    units = []
    for ks in order.values():
        rows = [(k, i) for k in ks for i in range(configs[k].n_runs)]
        for s in range(0, len(rows), CHUNK):
            unit: dict[int, list[int]] = {}
            for k, i in rows[s : s + CHUNK]:
                unit.setdefault(k, []).append(i)
            units.append(list(unit.items()))
    return units


def _run_unit(configs, unit, problems) -> dict[int, list[TrajectoryRecord]]:
    items = [(problems[k], configs[k], trials) for k, trials in unit]
    try:
        recs = simulate_batch(items)
    except StackError:
        recs = [r for item in items for r in simulate_batch([item])]
    out: dict[int, list[TrajectoryRecord]] = {}
    pos = 0
    for k, trials in unit:
        out[k] = recs[pos : pos + len(trials)]
        pos += len(trials)
    return out


def _build_problems(configs: Sequence[RunConfig]) -> list[FederatedProblem]:
    cache: dict[str, FederatedProblem] = {}
    out = []
    for c in configs:
        key = json.dumps(c.problem, sort_keys=True)
        if key not in cache:
            cache[key] = c.build_problem()
        out.append(cache[key])
    return out


def _worker(args):
    configs, unit = args
    return _run_unit(configs, unit, _build_problems(configs))


def run_many(configs: Sequence[RunConfig], jobs: int = 1) -> list[list[TrajectoryRecord]]:
    """Trials of several configs, batched where compatible; records per config in trial order.

    Work is split into fixed units, so neither ``jobs`` nor the grouping
    changes any number.
    """
    configs = list(configs)
    units = _units(configs)
    if jobs <= 1 or len(units) == 1:
        problems = _build_problems(configs)
        parts = [_run_unit(configs, u, problems) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_worker, [(configs, u) for u in units]))
    out: list[list[TrajectoryRecord]] = [[] for _ in configs]
    for part in parts:
        for k, recs in part.items():
            out[k].extend(recs)
    for recs in out:
        recs.sort(key=lambda r: r.trial)
    return out


def run_trials(config: RunConfig, jobs: int = 1) -> list[TrajectoryRecord]:
    """All trials of ``config`` in index order."""
    return run_many([config], jobs)[0]


@dataclass
class AggregateResult:
    """Per-round means over the non-diverged trials of one experiment."""

    algorithm: str
    d: float | None
    stepsize: str
    Q: int
    T: int
    t: np.ndarray
    mean_gap: np.ndarray
    se_gap: np.ndarray
    mean_grad_norm_sq: np.ndarray
    mean_running_min: np.ndarray
    n_effective: int
    n_diverged: int

    @property
    def final_mean_gap(self) -> float:
        return float(self.mean_gap[-1])


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values.tolist()) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum(((values - mean) ** 2).tolist()) / (n - 1)
    return mean, math.sqrt(var / n)


def aggregate(records: Sequence[TrajectoryRecord]) -> AggregateResult:
    """Mean and standard error across non-diverged trials, independent of record order."""
    if not records:
        raise ValueError("nothing to aggregate")
    kept = [r for r in records if not r.diverged]
    first = records[0]
    if not kept:
        raise ExperimentFailure(f"all {len(records)} trials diverged")
    gaps = np.stack([r.gap for r in kept])
    gns = np.stack([r.grad_norm_sq for r in kept])
    mins = np.stack([r.running_min for r in kept])
    m_gap, se_gap, m_gn, m_min = [], [], [], []
    for j in range(gaps.shape[1]):
        mg, sg = _mean_se(gaps[:, j])
        m_gap.append(mg)
        se_gap.append(sg)
        m_gn.append(math.fsum(gns[:, j].tolist()) / len(kept))
        m_min.append(math.fsum(mins[:, j].tolist()) / len(kept))
    return AggregateResult(
        algorithm=first.algorithm,
        d=first.d,
        stepsize=first.stepsize,
        Q=first.Q,
        T=first.T,
        t=first.t.copy(),
        mean_gap=np.array(m_gap),
        se_gap=np.array(se_gap),
        mean_grad_norm_sq=np.array(m_gn),
        mean_running_min=np.array(m_min),
        n_effective=len(kept),
        n_diverged=len(records) - len(kept),
    )


def run_experiment(config: RunConfig, jobs: int = 1):
    """Run every trial and aggregate. Returns ``(records, aggregate)``."""
    records = run_trials(config, jobs)
    return records, aggregate(records)


# reproductions --------------------------------------------------------------


def reproduce_table2(
    d_values: Sequence[float] = (-100, -50, -20, -2),
    T: int = 4000,
    Q: int = 17,
    alpha: float = 0.00046,
    n_runs: int = 100,
    x0: float = 0.0,
    base_seed: int = 42,
    jobs: int = 1,
    record_every: int = 10,
    bgd_grid: int = 100_001,
) -> tuple[list[dict], list[TrajectoryRecord], list[AggregateResult]]:
    """Heterogeneity measures and final gaps of both algorithms for each ``d``.

    SCAFFOLD runs with ``η_a = alpha`` and ``η_s = 1``. Returns the table rows,
    all trajectory records and the aggregates.
    """
    configs = []
    for d in d_values:
        for alg in ("fedavg", "scaffold"):
            configs.append(
                RunConfig(
                    problem={"family": "quadratic_huber", "d": float(d)},
                    algorithm=alg,
                    stepsize={"kind": "manual", "alpha": alpha},
                    Q=Q,
                    T=T,
                    n_runs=n_runs,
                    x0=x0,
                    base_seed=base_seed,
                    record_every=record_every,
                )
            )
    results = run_many(configs, jobs)
    rows, records, aggs = [], [], []
    for j, d in enumerate(d_values):
        problem = problem_from_spec(configs[2 * j].problem)
        bgd = estimate_bgd(problem, grid=bgd_grid)
        row = {"d": float(d), "zeta2_plus_psi2": float(bgd.total), "sigma_f_star": sigma_f_star(problem)}
        for cfg, recs in zip(configs[2 * j : 2 * j + 2], results[2 * j : 2 * j + 2]):
            agg = aggregate(recs)
            records.extend(recs)
            aggs.append(agg)
            row[f"{cfg.algorithm}_gap"] = agg.final_mean_gap
            row[f"{cfg.algorithm}_se"] = float(agg.se_gap[-1])
            row[f"{cfg.algorithm}_diverged"] = agg.n_diverged
        rows.append(row)
    return rows, records, aggs


def reproduce_fig1(
    stepsizes: Sequence[float] = (0.008, 0.016, 0.032),
    T: int = 1000,
    n_runs: int = 100,
    Q: int = 17,
    x0: float = 10.0,
    base_seed: int = 42,
    jobs: int = 1,
    record_every: int = 10,
    control: bool = True,
) -> tuple[list[TrajectoryRecord], list[AggregateResult]]:
    """Gap curves for FedAvg and SCAFFOLD on the 16-agent softplus/Huber problem.

    One curve per (algorithm, stepsize). With ``control`` an exact-oracle
    FedAvg run at the smallest stepsize is added under the algorithm name
    ``fedavg_exact`` (one trial; it is deterministic).
    """
    configs = [
        RunConfig(
            problem={"family": "softplus_huber", "n": 16},
            algorithm=alg,
            stepsize={"kind": "manual", "alpha": float(alpha)},
            Q=Q,
            T=T,
            n_runs=n_runs,
            x0=x0,
            base_seed=base_seed,
            record_every=record_every,
        )
        for alpha in stepsizes
        for alg in ("fedavg", "scaffold")
    ]
    if control:
        configs.append(
            RunConfig(
                problem={"family": "softplus_huber", "n": 16, "noisy": False},
                algorithm="fedavg",
                stepsize={"kind": "manual", "alpha": float(min(stepsizes))},
                Q=Q,
                T=T,
                n_runs=1,
                x0=x0,
                base_seed=base_seed,
                record_every=record_every,
            )
        )
    results = run_many(configs, jobs)
    if control:
        for r in results[-1]:
            r.algorithm = "fedavg_exact"
    records = [r for recs in results for r in recs]
    return records, [aggregate(recs) for recs in results]


@dataclass
class DecayReport:
    ratios: np.ndarray
    early: np.ndarray
    late: np.ndarray
    threshold: float
    n_pass: int
    n_seeds: int


def diminishing_decay_check(
    n_seeds: int = 20,
    T: int = 100_000,
    t_early: int = 100,
    q: float = 0.6,
    Q: int = 2,
    x0: float = 10.0,
    base_seed: int = 42,
    threshold: float = 0.1,
) -> DecayReport:
    """Running-min ``‖∇f(x_t)‖²`` at ``T`` versus at ``t_early`` under a diminishing policy.

    FedAvg on the 16-agent softplus/Huber problem with ``α_t = min(cap, cap/(t+1)^q)``,
    where ``cap`` is the diminishing-regime cap for L = 1, C = 1.
    """
    from .algorithms import diminishing_caps

    cap = min(diminishing_caps(1.0, 1.0, Q).values())
    cfg = RunConfig(
        problem={"family": "softplus_huber", "n": 16},
        algorithm="fedavg",
        stepsize={"kind": "diminishing", "alpha0": cap, "q": q, "L": 1.0, "C": 1.0, "Q": Q},
        Q=Q,
        T=T,
        n_runs=n_seeds,
        x0=x0,
        base_seed=base_seed,
        record_every=t_early,
    )
    problem = cfg.build_problem()
    recs = simulate(problem, cfg, range(n_seeds))
    j_early = int(np.searchsorted(recs[0].t, t_early))
    early = np.array([r.running_min[j_early] for r in recs])
    late = np.array([r.running_min[-1] for r in recs])
    ratios = late / early
    return DecayReport(ratios, early, late, threshold, int(np.sum(ratios < threshold)), n_seeds)


# CSV ------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def export_csv(records: Iterable[TrajectoryRecord], path: str | os.PathLike) -> None:
    """Write one row per recorded round of every trial, floats at full precision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for r in records:
            head = [r.algorithm, _fmt(r.d), r.stepsize, r.Q, r.T, r.seed]
            for j in range(len(r.t)):
                w.writerow(head + [int(r.t[j]), _fmt(r.gap[j]), _fmt(r.grad_norm_sq[j]), _fmt(r.running_min[j])])


def _parse(v: str, kind):
    if v == "":
        return None
    return kind(v)


def read_csv(path: str | os.PathLike) -> list[dict]:
    """Read a trajectory CSV back into typed rows."""
    types = {
        "algorithm": str, "d": float, "stepsize": str, "Q": int, "T": int, "seed": int, "t": int,
        "gap": float, "grad_norm_sq": float, "running_min_grad_norm_sq": float,
    }
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected header {rd.fieldnames}")
        return [{k: _parse(row[k], types[k]) for k in TRAJECTORY_HEADER} for row in rd]


def export_aggregate_csv(aggs: Iterable[AggregateResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_HEADER)
        for a in aggs:
            head = [a.algorithm, _fmt(a.d), a.stepsize, a.Q, a.T]
            for j in range(len(a.t)):
                w.writerow(
                    head
                    + [int(a.t[j]), _fmt(a.mean_gap[j]), _fmt(a.se_gap[j]), _fmt(a.mean_grad_norm_sq[j]), a.n_effective]
                )


def read_aggregate_csv(path: str | os.PathLike) -> list[dict]:
    types = {
        "algorithm": str, "d": float, "stepsize": str, "Q": int, "T": int, "t": int,
        "mean_gap": float, "se_gap": float, "mean_grad_norm_sq": float, "n_effective": int,
    }
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != AGGREGATE_HEADER:
            raise ValueError(f"unexpected header {rd.fieldnames}")
        return [{k: _parse(row[k], types[k]) for k in AGGREGATE_HEADER} for row in rd]
