"""Finite-difference check of the joint meta-objective gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objectives import Kind, ObjectiveSpec
from .stochnet import Batch, NetworkArch
from .trainer import joint_objective


@dataclass
class GradCheckResult:
    kind: str
    n_weights: int
    objective: float
    max_rel_err: float


def relative_error(num, ana, floor: float = 1e-6) -> np.ndarray:
    """``|num - ana| / max(|num|, |ana|, floor)`` elementwise."""
    num, ana = np.asarray(num), np.asarray(ana)
    return np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), floor)


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Five-point central difference of a scalar function."""
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h)
    return g


def ladder_diff(f, x: np.ndarray, h0: float = 1e-3, factor: float = 4.0, n_steps: int = 5) -> np.ndarray:
    """Five-point differences over shrinking steps, keeping per coordinate the
    estimate whose neighbour on the ladder agrees with it best.

    Large steps straddle ELU kinks, small ones drown in rounding; the most
    stable neighbouring pair sits between the two regimes.
    """
    hs = h0 / factor ** np.arange(n_steps)
    est = np.stack([central_diff(f, x, h) for h in hs])
    gaps = np.abs(np.diff(est, axis=0))
    return est[gaps.argmin(axis=0), np.arange(x.size)]


def random_instance(rng: np.random.Generator, arch: NetworkArch, n_tasks: int = 2, batch: int = 16):
    d = arch.n_params

    def flat():
        return np.concatenate([rng.normal(0, 0.5, d), rng.uniform(-3, 0, d)])

    batches = [Batch(rng.uniform(0, 1, (batch, arch.input_dim)), rng.integers(0, arch.n_classes, batch))
               for _ in range(n_tasks)]
    return flat(), [flat() for _ in range(n_tasks)], batches


def check_instance(arch, prior, posts, batches, spec: ObjectiveSpec, seed=0, floor=1e-5) -> GradCheckResult:
    d2 = 2 * arch.n_params
    n = len(posts)
    J, gp, gq = joint_objective(arch, prior, posts, batches, spec, seed=seed)
    x = np.concatenate([prior, *posts])
    ana = np.concatenate([gp, *gq])

    def f(v):
        return joint_objective(arch, v[:d2], [v[d2 * (i + 1):d2 * (i + 2)] for i in range(n)],
                               batches, spec, seed=seed, with_grad=False)[0]

    num = ladder_diff(f, x)
    return GradCheckResult(spec.kind.value, arch.n_params, J, float(relative_error(num, ana, floor).max()))


def run_gradcheck(n_instances: int = 20, seed=0, arch: NetworkArch | None = None) -> list:
    """Random small instances cycling through every objective kind."""
    arch = arch or NetworkArch((5, 6, 3))
    rng = np.random.default_rng(seed)
    kinds = list(Kind)
    out = []
    for i in range(n_instances):
        prior, posts, batches = random_instance(rng, arch)
        spec = ObjectiveSpec(kinds[i % len(kinds)], n_tasks=len(posts), kappa_p=2.0, kappa_q=0.1)
        out.append(check_instance(arch, prior, posts, batches, spec, seed=int(rng.integers(2**31))))
    return out
