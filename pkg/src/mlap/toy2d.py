"""2-D mean estimation with squared Euclidean loss.

Hypotheses are points ``h`` in the plane; every task is a cloud of samples
around its own center.  Because the expected loss under a Gaussian posterior
and the expected KL under the noisy prior both have closed forms, the whole
meta-training objective is deterministic here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gauss import (RHO_MAX, RHO_MIN, DiagGaussian, HyperPosterior, expected_kl_noisy_prior,
                    expected_kl_noisy_prior_grad, hyper_kl, hyper_kl_grad)
from .objectives import Kind, ObjectiveSpec, TaskStats, objective_parts
from .optim import OptimizerState, adam_step


@dataclass
class ToyTask:
    center: np.ndarray
    noise_sd: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != 2 or self.samples.shape[0] < 2:
            raise ValueError("need at least 2 samples in the plane")

    @property
    def m(self) -> int:
        return self.samples.shape[0]


@dataclass
class ToyConfig:
    centers: tuple = ((2.0, 1.0), (4.0, 1.0))
    noise_sd: float = 0.1
    m: int = 50
    seed: int = 0
    steps: int = 4000
    lr: float = 0.02
    objective: ObjectiveSpec = field(default_factory=lambda: ObjectiveSpec(Kind.MCALLESTER, n_tasks=2))


@dataclass
class ToyResult:
    prior: DiagGaussian
    posteriors: list
    tasks: list
    history: list


def toy_expected_loss(q: DiagGaussian, z) -> float:
    """``E_{h~q} ||h - z||^2``."""
    if q.dim != 2:
        raise ValueError("toy hypotheses are 2-D")
    z = np.asarray(z, dtype=float)
    return float(np.sum((q.mu - z) ** 2) + np.sum(np.exp(q.rho)))


def toy_empirical_loss(q: DiagGaussian, samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=float)
    return float(np.mean(np.sum((q.mu - samples) ** 2, axis=1)) + np.sum(np.exp(q.rho)))


def make_toy_tasks(cfg: ToyConfig) -> list:
    rng = np.random.default_rng(cfg.seed)
    tasks = []
    for c in cfg.centers:
        c = np.asarray(c, dtype=float)
        tasks.append(ToyTask(c, cfg.noise_sd, c + cfg.noise_sd * rng.standard_normal((cfg.m, 2))))
    return tasks


def toy_objective(prior_flat, post_flats, tasks, spec: ObjectiveSpec):
    """Exact objective value and gradients ``(J, grad_prior, [grad_post_i])``."""
    prior_flat = np.asarray(prior_flat, dtype=float)
    spec = spec.with_tasks(len(tasks))
    hyper = HyperPosterior(prior_flat, spec.kappa_q, spec.kappa_p)
    kl_h = hyper_kl(hyper, spec.hyper_kl_constants_once)
    qs = [DiagGaussian.from_flat(p) for p in post_flats]
    stats = []
    for q, t in zip(qs, tasks):
        stats.append(TaskStats(t.m, toy_empirical_loss(q, t.samples),
                               expected_kl_noisy_prior(q, prior_flat, spec.kappa_q), kl_h))
    parts = objective_parts(stats, spec)
    g_prior = parts.d_kl_hyper * hyper_kl_grad(hyper)
    g_posts = []
    for i, (q, t) in enumerate(zip(qs, tasks)):
        gmq, grq, gp = expected_kl_noisy_prior_grad(q, prior_flat, spec.kappa_q)
        g_emp = np.concatenate([2.0 * (q.mu - t.samples.mean(axis=0)), np.exp(q.rho)])
        g_posts.append(parts.d_emp[i] * g_emp + parts.d_kl_task[i] * np.concatenate([gmq, grq]))
        g_prior = g_prior + parts.d_kl_task[i] * gp
    return parts.value, g_prior, g_posts


def run_toy(cfg: ToyConfig | None = None, tasks=None) -> ToyResult:
    """Meta-train a 2-D prior and one posterior per toy task with Adam."""
    cfg = cfg or ToyConfig()
    tasks = tasks if tasks is not None else make_toy_tasks(cfg)
    spec = cfg.objective.with_tasks(len(tasks))
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    params = {"prior": np.concatenate([rng.normal(0, 0.1, 2), np.zeros(2)])}
    for i in range(len(tasks)):
        params[f"post{i}"] = np.concatenate([rng.normal(0, 0.1, 2), np.zeros(2)])
    state = OptimizerState()
    history = []
    keys = [f"post{i}" for i in range(len(tasks))]
    for step in range(cfg.steps):
        val, gp, gq = toy_objective(params["prior"], [params[k] for k in keys], tasks, spec)
        grads = {"prior": gp, **dict(zip(keys, gq))}
        adam_step(params, grads, state, cfg.lr)
        for p in params.values():
            np.clip(p[2:], RHO_MIN, RHO_MAX, out=p[2:])
        history.append(val)
    return ToyResult(DiagGaussian.from_flat(params["prior"]),
                     [DiagGaussian.from_flat(params[k]) for k in keys], tasks, history)


def toy_bound(result: ToyResult, spec: ObjectiveSpec, seed=0, n_samples: int = 20000) -> float:
    """Meta bound with ``min(1, ||h - z||^2)`` as the loss (Monte-Carlo over ``h``)."""
    rng = np.random.default_rng(seed)
    spec = spec.with_tasks(len(result.tasks))
    prior_flat = result.prior.flat()
    kl_h = hyper_kl(HyperPosterior(prior_flat, spec.kappa_q, spec.kappa_p), spec.hyper_kl_constants_once)
    stats = []
    for q, t in zip(result.posteriors, result.tasks):
        h = q.mu + q.std * rng.standard_normal((n_samples, 2))
        loss = np.minimum(((h[:, None, :] - t.samples[None, :, :]) ** 2).sum(-1), 1.0)
        stats.append(TaskStats(t.m, float(loss.mean()),
                               expected_kl_noisy_prior(q, prior_flat, spec.kappa_q), kl_h))
    return objective_parts(stats, spec).value


def ellipse_rows(result: ToyResult) -> list:
    """One row per distribution: name, mean and per-axis standard deviation."""
    rows = [("prior", *result.prior.mu, *result.prior.std)]
    for i, q in enumerate(result.posteriors):
        rows.append((f"posterior{i}", *q.mu, *q.std))
    return rows


def ellipse_svg(result: ToyResult, scale: float = 60.0) -> str:
    rows = ellipse_rows(result)
    colors = {"prior": "blue"}
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="420" height="240" viewBox="0 0 420 240">']
    for t, color in zip(result.tasks, ("orange", "red", "gray", "black")):
        for x, y in t.samples:
            parts.append(f'<circle cx="{x * scale + 30:.2f}" cy="{210 - y * scale:.2f}" r="1.5" fill="{color}"/>')
    for name, mx, my, sx, sy in rows:
        c = colors.get(name, "green" if name.endswith("0") else "purple")
        cx, cy = mx * scale + 30, 210 - my * scale
        parts.append(f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{max(sx * scale, 0.5):.2f}" '
                     f'ry="{max(sy * scale, 0.5):.2f}" fill="none" stroke="{c}"/>')
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{c}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
