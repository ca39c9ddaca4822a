"""Constraint-filtered genetic adaptation.

Each iteration draws a fresh task slice, scores the pool by mean loss on it,
keeps the best ``ceil(elite_fraction * P)`` members and refills the pool with
feasible mutants of uniformly chosen elites.  Elites are also scored on one
fixed audit slice; the best architecture on that slice is the result, so the
reported best-so-far never gets worse.
"""

from __future__ import annotations

import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

from .cost_model import count_macs, count_params
from .latency import LatencyTable, MissingEntriesError, compose
from .oracle import OracleProtocolError, TaskSet, check_losses
from .search_space import Architecture, Backbone, mutate, sample_uniform
from .systolic_sim import ArrayConfig, network_cycles

METRICS = ("params", "macs", "latency", "cycles")
UNITS = {"params": "params", "macs": "MACs", "latency": "us", "cycles": "cycles"}


class InfeasibleConstraintError(ValueError):
    def __init__(self, message: str, tightest: float | None = None):
        self.tightest = tightest
        super().__init__(message)


class AdaptationAborted(RuntimeError):
    """The oracle failed mid-run; ``audit`` holds every completed iteration."""

    def __init__(self, message: str, audit: list, query=None):
        self.audit = audit
        self.query = query
        super().__init__(message)


@dataclass(frozen=True)
class Constraint:
    metric: str
    bound: float
    table: LatencyTable | None = field(default=None, repr=False)
    array: ArrayConfig | None = None
    device: str | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown constraint metric {self.metric!r}; expected one of {METRICS}")
        if not self.bound > 0:
            raise ValueError(f"constraint bound must be > 0, got {self.bound}")
        if self.metric == "latency" and self.table is None:
            raise ValueError("a latency constraint needs a latency table")

    @classmethod
    def parse(cls, text: str, **kw) -> "Constraint":
        """``metric:bound``, e.g. ``macs:24090000`` or ``params:inf``."""
        metric, sep, bound = text.partition(":")
        if not sep:
            raise ValueError(f"constraint {text!r} is not of the form metric:bound")
        try:
            value = float(bound)
        except ValueError:
            raise ValueError(f"constraint bound {bound!r} is not a number") from None
        return cls(metric.strip(), value, **kw)

    def value(self, arch: Architecture) -> float:
        if self.metric == "params":
            return count_params(arch)
        if self.metric == "macs":
            return count_macs(arch)
        if self.metric == "latency":
            return compose(arch, self.table)
        return network_cycles(arch, self.array or ArrayConfig()).compute_cycles

    def satisfied(self, arch: Architecture) -> bool:
        return self.value(arch) <= self.bound

    def prepare(self, backbone: Backbone) -> list[str]:
        """Refuse unusable tables; return warnings for suspicious ones."""
        warnings = []
        if self.metric != "latency":
            return warnings
        if self.table.missing:
            raise MissingEntriesError(self.table.missing)
        absent = self.table.missing_for(backbone)
        if absent:
            raise MissingEntriesError(absent)
        if self.device is not None and self.table.device_name != self.device:
            warnings.append(
                f"latency table was profiled on {self.table.device_name!r} but the constraint targets {self.device!r}"
            )
        if self.table.backbone is not None and self.table.backbone != backbone.name:
            warnings.append(f"latency table was profiled for backbone {self.table.backbone!r}, not {backbone.name!r}")
        return warnings

    def describe(self) -> dict:
        out = {"metric": self.metric, "bound": _num(self.bound), "unit": UNITS[self.metric]}
        if self.table is not None:
            out["table_device"] = self.table.device_name
            out["table_method"] = self.table.method
        if self.array is not None:
            out["array"] = asdict(self.array)
        if self.device is not None:
            out["device"] = self.device
        return out


def _num(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, float) and x.is_integer():
        return int(x)
    return x


@dataclass(frozen=True)
class AdaptationConfig:
    """``slice_size`` of None uses the task set's own slice size."""

    pool_size: int = 100
    iterations: int = 200
    elite_fraction: float = 0.10
    moves: int = 2
    slice_size: int | None = None
    rng_seed: int = 0
    workers: int = 1
    attempt_factor: int = 1000

    def __post_init__(self):
        if self.pool_size < 2:
            raise ValueError("pool_size must be >= 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.elite_fraction <= 1:
            raise ValueError("elite_fraction must be in (0, 1]")
        if self.moves < 1:
            raise ValueError("moves must be >= 1")
        if self.slice_size is not None and self.slice_size < 1:
            raise ValueError("slice_size must be >= 1")
        if self.workers < 1 or self.attempt_factor < 1:
            raise ValueError("workers and attempt_factor must be >= 1")

    @property
    def n_elite(self) -> int:
        return max(1, math.ceil(self.elite_fraction * self.pool_size - 1e-9))

    @classmethod
    def from_dict(cls, data: Mapping) -> "AdaptationConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown adaptation keys {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class AuditEntry:
    iteration: int
    pool_mean_loss: float  # over the pool, on this iteration's slice
    feasible: int
    best_so_far_loss: float  # on the fixed audit slice
    best_so_far: str
    rejected_mutants: int = 0
    padded: int = 0


@dataclass
class AdaptationResult:
    best: Architecture
    mean_loss: float
    metric_value: float
    constraint: dict
    audit: list[AuditEntry]
    config: dict
    task_set: dict
    audit_slice: list[int]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "best": self.best.encode(),
            "mean_loss": self.mean_loss,
            "metric_value": _num(self.metric_value),
            "constraint": self.constraint,
            "audit": [asdict(a) for a in self.audit],
            "config": self.config,
            "task_set": self.task_set,
            "audit_slice": self.audit_slice,
            "warnings": self.warnings,
        }


# --------------------------------------------------------------------------


def _rng(seed, stream: str) -> random.Random:
    # independent, reproducible streams per purpose
    return random.Random(f"{seed}/{stream}")


def init_pool(backbone: Backbone, constraint: Constraint, config: AdaptationConfig, rng=None,
              metric_cache: dict | None = None) -> list[Architecture]:
    """P feasible uniform samples, drawn with at most ``attempt_factor * P`` tries."""
    rng = rng or _rng(config.rng_seed, "init")
    cache = metric_cache if metric_cache is not None else {}
    budget = config.attempt_factor * config.pool_size
    pool, tightest = [], math.inf
    for _ in range(budget):
        arch = sample_uniform(backbone, rng)
        v = _metric(constraint, arch, cache)
        tightest = min(tightest, v)
        if v <= constraint.bound:
            pool.append(arch)
            if len(pool) == config.pool_size:
                return pool
    raise InfeasibleConstraintError(
        f"constraint infeasible or too tight: {constraint.metric} <= {_num(constraint.bound)} "
        f"admitted {len(pool)} of {config.pool_size} after {budget} draws; "
        f"tightest {constraint.metric} seen {_num(tightest)}",
        tightest,
    )


def _metric(constraint: Constraint, arch: Architecture, cache: dict) -> float:
    v = cache.get(arch)
    if v is None:
        v = cache[arch] = constraint.value(arch)
    return v


class _Evaluator:
    def __init__(self, oracle, workers: int):
        self.oracle = oracle
        self.workers = workers

    def mean_losses(self, archs: Sequence[Architecture], tasks: Sequence[int]) -> list[float]:
        if hasattr(self.oracle, "evaluate_many") and self.workers == 1:
            raw = self.oracle.evaluate_many(archs, tasks)
        elif self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                # map keeps pool order regardless of completion order
                raw = list(ex.map(lambda a: self.oracle.losses(a, tasks), archs))
        else:
            raw = [self.oracle.losses(a, tasks) for a in archs]
        out = []
        for arch, losses in zip(archs, raw):
            query = {"arch": arch.encode(), "tasks": list(tasks)}
            losses = check_losses(list(losses), len(tasks), query)
            out.append(math.fsum(losses) / len(losses))
        return out


def adapt(backbone: Backbone, constraint: Constraint, oracle, task_set: TaskSet,
          config: AdaptationConfig = AdaptationConfig()) -> AdaptationResult:
    warnings = constraint.prepare(backbone)
    slice_size = config.slice_size or task_set.slice_size
    if slice_size > task_set.n_tasks:
        raise ValueError(f"slice_size {slice_size} exceeds the {task_set.n_tasks} tasks available")

    metrics: dict = {}
    pool = init_pool(backbone, constraint, config, _rng(config.rng_seed, "init"), metrics)
    task_rng = _rng(f"{config.rng_seed}/{task_set.rng_seed}", "tasks")
    mut_rng = _rng(config.rng_seed, "mutate")
    pad_rng = _rng(config.rng_seed, "pad")
    audit_slice = task_set.draw_slice(task_rng, slice_size)
    evaluator = _Evaluator(oracle, config.workers)
    audit: list[AuditEntry] = []

    audit_scores: dict = {}
    best = None  # (loss, metric, encoding, arch)

    def rank_key(loss, arch):
        return (loss, metrics[arch], arch.encode())

    def score_on_audit(archs):
        nonlocal best
        fresh = list(dict.fromkeys(a for a in archs if a not in audit_scores))
        if fresh:
            for a, loss in zip(fresh, evaluator.mean_losses(fresh, audit_slice)):
                audit_scores[a] = loss
        for a in archs:
            key = rank_key(audit_scores[a], a)
            if best is None or key < best[:3]:
                best = (*key, a)
        return [audit_scores[a] for a in archs]

    try:
        initial = score_on_audit(pool)
        audit.append(AuditEntry(0, math.fsum(initial) / len(initial), len(pool), best[0], best[2]))

        for it in range(1, config.iterations + 1):
            tasks = task_set.draw_slice(task_rng, slice_size)
            losses = evaluator.mean_losses(pool, tasks)
            order = sorted(range(len(pool)), key=lambda i: rank_key(losses[i], pool[i]))
            feasible = [i for i in order if metrics[pool[i]] <= constraint.bound]
            elites = [pool[i] for i in feasible[: config.n_elite]]
            score_on_audit(pool)

            rejected = padded = 0
            if it < config.iterations:
                pool, rejected, padded = _refill(backbone, constraint, config, elites, metrics, mut_rng, pad_rng)
            audit.append(AuditEntry(
                it, math.fsum(losses) / len(losses), len(feasible), best[0], best[2], rejected, padded,
            ))
    except OracleProtocolError as exc:
        raise AdaptationAborted(str(exc), audit, exc.query) from exc

    loss, metric, _, arch = best
    assert metric <= constraint.bound
    return AdaptationResult(
        best=arch,
        mean_loss=loss,
        metric_value=metric,
        constraint=constraint.describe(),
        audit=audit,
        config=asdict(config),
        task_set=asdict(task_set),
        audit_slice=list(audit_slice),
        warnings=warnings,
    )


def _refill(backbone, constraint, config, elites, metrics, mut_rng, pad_rng):
    pool = list(elites)
    budget = config.attempt_factor * config.pool_size
    rejected = 0
    while len(pool) < config.pool_size and rejected < budget:
        child = mutate(mut_rng.choice(elites), mut_rng, config.moves)
        if _metric(constraint, child, metrics) <= constraint.bound:
            pool.append(child)
        else:
            rejected += 1
    padded = 0
    if len(pool) < config.pool_size:
        need = config.pool_size - len(pool)
        try:
            extra = init_pool(backbone, constraint, AdaptationConfig(
                pool_size=max(2, need), attempt_factor=config.attempt_factor), pad_rng, metrics)[:need]
        except InfeasibleConstraintError:
            extra = [pad_rng.choice(elites) for _ in range(need)]
        pool.extend(extra)
        padded = need
    return pool, rejected, padded


@dataclass
class SweepPoint:
    bound: float
    result: AdaptationResult | None
    error: str | None = None

    def row(self) -> dict:
        r = self.result
        return {
            "bound": _num(self.bound),
            "metric_value": _num(r.metric_value) if r else None,
            "mean_loss": r.mean_loss if r else None,
            "best": r.best.encode() if r else None,
            "error": self.error,
        }


def pareto_sweep(backbone: Backbone, constraint_metric: str, bounds: Sequence[float], oracle,
                 task_set: TaskSet, config: AdaptationConfig = AdaptationConfig(), *,
                 table: LatencyTable | None = None, array: ArrayConfig | None = None,
                 device: str | None = None) -> list[SweepPoint]:
    """One ``adapt`` run per bound, all sharing one table and the same seed."""
    bounds = list(bounds)
    if bounds != sorted(bounds):
        raise ValueError("bounds must be sorted ascending")
    points = []
    for b in bounds:
        constraint = Constraint(constraint_metric, b, table=table, array=array, device=device)
        try:
            points.append(SweepPoint(b, adapt(backbone, constraint, oracle, task_set, config)))
        except InfeasibleConstraintError as exc:
            points.append(SweepPoint(b, None, str(exc)))
    return points


def pareto_frontier(points: Sequence[SweepPoint]) -> list[SweepPoint]:
    """Points not dominated in (metric value, mean loss), by increasing metric."""
    ok = sorted((p for p in points if p.result is not None),
                key=lambda p: (p.result.metric_value, p.result.mean_loss))
    front, best_loss = [], math.inf
    for p in ok:
        if p.result.mean_loss < best_loss:
            front.append(p)
            best_loss = p.result.mean_loss
    return front
