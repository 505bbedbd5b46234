"""Bound-derived meta-learning objectives and their complexity terms.

Each task term is a function of the task's empirical error and of
``kl_hyper + kl_task``; the partial-derivative helpers (``*_parts``) return
the value together with d/d(emp_err) and d/d(kl) so the trainer can chain
them through the network and the KL closed forms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum


class Kind(str, Enum):
    MCALLESTER = "mcallester"
    SEEGER = "seeger"
    PENTINA_LAMPERT = "pentina_lampert"
    VB = "vb"
    NONE = "none"


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: Kind = Kind.MCALLESTER
    delta: float = 0.1
    n_tasks: int = 1
    kappa_q: float = 1e-3
    kappa_p: float = 2000.0
    # count the hyper-KL per-dimension constants once instead of N_P times
    hyper_kl_constants_once: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if self.n_tasks < 1:
            raise ValueError(f"n_tasks must be >= 1, got {self.n_tasks}")
        if not (self.kappa_q > 0 and self.kappa_p > 0):
            raise ValueError("kappa_q and kappa_p must be positive")

    @property
    def min_samples(self) -> int:
        return 8 if self.kind == Kind.SEEGER else 2

    def with_tasks(self, n: int) -> "ObjectiveSpec":
        return ObjectiveSpec(self.kind, self.delta, n, self.kappa_q, self.kappa_p, self.hyper_kl_constants_once)


@dataclass(frozen=True)
class TaskStats:
    m: int
    emp_err: float
    kl_task: float
    kl_hyper: float


def _check_m(ts: TaskStats, minimum: int):
    if ts.m < minimum:
        raise ValueError(f"sample count {ts.m} below the minimum of {minimum}")


def mcallester_parts(ts: TaskStats, spec: ObjectiveSpec):
    _check_m(ts, 2)
    arg = (ts.kl_hyper + ts.kl_task + math.log(2 * spec.n_tasks * ts.m / spec.delta)) / (2 * (ts.m - 1))
    assert arg > 0, "complexity argument must be positive"
    val = math.sqrt(arg)
    return val, 0.0, 1.0 / (2 * val * 2 * (ts.m - 1))


def seeger_parts(ts: TaskStats, spec: ObjectiveSpec):
    _check_m(ts, 8)
    delta_i = spec.delta / (2 * spec.n_tasks)
    eps = (ts.kl_hyper + ts.kl_task + math.log(2 * math.sqrt(ts.m) / delta_i)) / ts.m
    emp = max(ts.emp_err, 0.0)
    root = math.sqrt(2 * eps * emp)
    val = 2 * eps + root
    d_eps = 2.0 + (emp / root if root > 0 else 0.0)
    d_emp = eps / root if root > 0 else 0.0
    return val, d_emp, d_eps / ts.m


def pl_parts(ts: TaskStats, spec: ObjectiveSpec):
    _check_m(ts, 2)
    denom = math.sqrt(2 * (ts.m - 1))
    val = (ts.kl_hyper + ts.kl_task + math.log(2 * spec.n_tasks * ts.m / spec.delta)) / denom
    return val, 0.0, 1.0 / denom


def complexity_mcallester(ts: TaskStats, spec: ObjectiveSpec) -> float:
    return mcallester_parts(ts, spec)[0]


def complexity_seeger(ts: TaskStats, spec: ObjectiveSpec) -> float:
    return seeger_parts(ts, spec)[0]


def complexity_pl(ts: TaskStats, spec: ObjectiveSpec) -> float:
    return pl_parts(ts, spec)[0]


def env_parts(spec: ObjectiveSpec, kl_hyper: float):
    n = spec.n_tasks
    if n < 2:
        raise ValueError("the environment term needs at least 2 tasks")
    if spec.kind == Kind.PENTINA_LAMPERT:
        denom = math.sqrt(2 * (n - 1))
        return (kl_hyper + math.log(2 * n / spec.delta)) / denom, 1.0 / denom
    val = math.sqrt((kl_hyper + math.log(2 * n / spec.delta)) / (2 * (n - 1)))
    return val, 1.0 / (2 * val * 2 * (n - 1))


def env_complexity(spec: ObjectiveSpec, kl_hyper: float) -> float:
    """Environment-level term (McAllester form unless ``spec`` is Pentina-Lampert)."""
    return env_parts(spec, kl_hyper)[0]


_TASK_PARTS = {
    Kind.MCALLESTER: mcallester_parts,
    Kind.SEEGER: seeger_parts,
    Kind.PENTINA_LAMPERT: pl_parts,
}


def vb_objective(tasks, kl_hyper: float) -> float:
    """``sum_i (sum_nll_i + kl_task_i) + kl_hyper``; ``tasks`` yields ``(sum_nll, kl_task)``."""
    total = float(kl_hyper)
    for sum_nll, kl_task in tasks:
        if kl_task < 0:
            raise ValueError("negative KL")
        total += sum_nll + kl_task
    if kl_hyper < 0:
        raise ValueError("negative KL")
    return total


@dataclass
class ObjectiveValue:
    value: float
    d_emp: list
    d_kl_task: list
    d_kl_hyper: float
    task_terms: list
    env_term: float


def objective_parts(stats, spec: ObjectiveSpec, include_env: bool = True,
                    n_scale: float | None = None, m_total: float | None = None) -> ObjectiveValue:
    """Value and partial derivatives of the joint objective.

    ``stats`` may be a subset of the ``spec.n_tasks`` tasks (meta mini-batch);
    the per-task average then runs over that subset.  For the VB objective
    the summed form is divided by ``m_total`` (total sample count over all
    tasks) so that it lives on the same per-sample scale as the bounds.
    """
    stats = list(stats)
    if not stats:
        raise ValueError("no task statistics")
    kl_hyper = stats[0].kl_hyper
    b = len(stats)
    kind = spec.kind
    if kind == Kind.VB:
        scale = spec.n_tasks / b if n_scale is None else n_scale
        m_total = sum(ts.m for ts in stats) * scale if m_total is None else m_total
        sums = [(ts.m * ts.emp_err, ts.kl_task) for ts in stats]
        val = (scale * (vb_objective(sums, 0.0)) + kl_hyper) / m_total
        d_emp = [scale * ts.m / m_total for ts in stats]
        d_kl = [scale / m_total] * b
        return ObjectiveValue(val, d_emp, d_kl, 1.0 / m_total,
                              [ts.kl_task * scale / m_total for ts in stats], kl_hyper / m_total)

    value = 0.0
    d_emp, d_kl, terms = [], [], []
    d_hyper = 0.0
    for ts in stats:
        if kind == Kind.NONE:
            c, ce, ck = 0.0, 0.0, 0.0
        else:
            c, ce, ck = _TASK_PARTS[kind](ts, spec)
        terms.append(c)
        value += (ts.emp_err + c) / b
        d_emp.append((1.0 + ce) / b)
        d_kl.append(ck / b)
        d_hyper += ck / b
    env = 0.0
    if include_env and kind != Kind.NONE:
        if spec.n_tasks < 2:
            warnings.warn("environment term disabled with a single task; the bound is not valid", stacklevel=2)
        else:
            env, de = env_parts(spec, kl_hyper)
            d_hyper += de
    return ObjectiveValue(value + env, d_emp, d_kl, d_hyper, terms, env)


def total_objective(stats, spec: ObjectiveSpec) -> float:
    stats = list(stats)
    if len(stats) != spec.n_tasks:
        raise ValueError(f"expected {spec.n_tasks} task stats, got {len(stats)}")
    return objective_parts(stats, spec).value
