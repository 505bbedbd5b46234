"""Joint meta-training of a shared prior and per-task posteriors, and
adaptation of a learned prior to a new task.

The prior and each posterior are factorized Gaussians over the weights of
the same :class:`~mlap.stochnet.NetworkArch`.  The hyper-posterior is an
isotropic Gaussian centered at the prior's flat ``(mu, rho)`` vector; every
step draws one noisy copy of the prior from it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .gauss import (DiagGaussian, HyperPosterior, hyper_kl, hyper_kl_grad,
                    kl_diag_gaussian, kl_diag_gaussian_grad)
from .objectives import Kind, ObjectiveSpec, TaskStats, objective_parts
from .optim import OptimizerState, adam_step
from .stochnet import (Batch, NetworkArch, StochasticNet, backward, bounded_loss,
                       ce_grad, forward_mean, forward_stochastic, init_params,
                       loss_terms, predict)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    mc_samples: int = 1
    meta_batch: int | None = None
    seed: int = 0
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    eval_mc_samples: int = 8
    bounded_loss: str = "clipped_ce"
    # meta-test: draw the prior from the hyper-posterior instead of using its center
    sampled_prior: bool = False
    # meta-train posterior start: "independent" fresh draws, or "prior" (copies of the prior)
    posterior_init: str = "independent"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.mc_samples < 1 or self.epochs < 0:
            raise ValueError("batch_size and mc_samples must be >= 1, epochs >= 0")
        if self.meta_batch is not None and self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.posterior_init not in ("independent", "prior"):
            raise ValueError(f"unknown posterior_init {self.posterior_init!r}")


@dataclass
class MetaTrainResult:
    prior: DiagGaussian
    posteriors: list
    history: list


@dataclass
class MetaTestResult:
    posterior: DiagGaussian
    test_error: float
    history: list


class _BatchStream:
    """Reshuffled mini-batches over one task's training set."""

    def __init__(self, batch: Batch, size: int, rng: np.random.Generator):
        self.batch = batch
        self.size = min(size, len(batch))
        self.rng = rng
        self._order = None
        self._pos = 0

    def next(self) -> Batch:
        n = len(self.batch)
        if self._order is None or self._pos + self.size > n:
            self._order = self.rng.permutation(n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.size]
        self._pos += self.size
        return Batch(self.batch.inputs[idx], self.batch.labels[idx])


def _stats_and_grads(arch, prior_flat, posts, batches, ms, spec, rng, mc_samples,
                     include_env=True, n_scale=None, m_total=None, prior_noise=True, with_grad=True):
    """Monte-Carlo estimate of the joint objective and its exact gradient.

    ``posts`` are the flat posterior vectors of the tasks in ``batches``.
    All noise (hyper-posterior draws, then per-task activation noise) is
    taken from ``rng`` in a fixed order, so re-seeding freezes it.
    """
    d = arch.n_params
    b = len(posts)
    hyper = HyperPosterior(prior_flat, spec.kappa_q, spec.kappa_p)
    kl_h = hyper_kl(hyper, spec.hyper_kl_constants_once)
    emp = np.zeros(b)
    kls = np.zeros(b)
    d_ce, d_kl_post, d_kl_prior = [], [], []
    for _ in range(mc_samples):
        noisy = hyper.sample(rng) if prior_noise else prior_flat
        p = DiagGaussian(noisy[:d], noisy[d:])
        per_ce, per_kq, per_kp = [], [], []
        for i in range(b):
            q = DiagGaussian(posts[i][:d], posts[i][d:])
            net = StochasticNet(arch, q)
            logits, rec = forward_stochastic(net, batches[i], rng)
            ce, _ = loss_terms(logits, batches[i].labels)
            emp[i] += ce / mc_samples
            kls[i] += kl_diag_gaussian(q, p) / mc_samples
            if not with_grad:
                continue
            per_ce.append((net, rec, logits))
            gmq, grq, gmp, grp = kl_diag_gaussian_grad(q, p)
            per_kq.append(np.concatenate([gmq, grq]))
            per_kp.append(np.concatenate([gmp, grp]))
        d_ce.append(per_ce)
        d_kl_post.append(per_kq)
        d_kl_prior.append(per_kp)

    if not (np.all(np.isfinite(emp)) and np.all(np.isfinite(kls)) and math.isfinite(kl_h)):
        raise FloatingPointError(
            f"non-finite statistics: emp={emp.tolist()} kl_task={kls.tolist()} kl_hyper={kl_h}")
    stats = [TaskStats(ms[i], float(emp[i]), float(kls[i]), kl_h) for i in range(b)]
    parts = objective_parts(stats, spec, include_env=include_env, n_scale=n_scale, m_total=m_total)
    if not math.isfinite(parts.value):
        raise FloatingPointError(
            f"non-finite objective: emp={emp.tolist()} kl_task={kls.tolist()} kl_hyper={kl_h}")

    info = {"objective": parts.value, "emp_err": float(emp.mean()), "kl_task": float(kls.mean()),
            "kl_hyper": kl_h, "env_term": parts.env_term,
            "task_term": float(np.mean(parts.task_terms))}
    if not with_grad:
        return parts.value, None, None, info
    g_prior = parts.d_kl_hyper * hyper_kl_grad(hyper)
    g_posts = []
    for i in range(b):
        g = np.zeros(2 * d)
        for s in range(mc_samples):
            net, rec, logits = d_ce[s][i]
            up = ce_grad(logits, batches[i].labels) * (parts.d_emp[i] / mc_samples)
            gm, gr = backward(net, batches[i], rec, up)
            g[:d] += gm
            g[d:] += gr
            w = parts.d_kl_task[i] / mc_samples
            g += w * d_kl_post[s][i]
            g_prior += w * d_kl_prior[s][i]
        g_posts.append(g)
    return parts.value, g_prior, g_posts, info


def joint_objective(arch: NetworkArch, prior_flat, posts, batches, spec: ObjectiveSpec,
                    seed, mc_samples: int = 1, with_grad: bool = True):
    """Objective value and gradients with noise frozen by ``seed``.

    Returns ``(J, grad_prior, [grad_posterior_i])``; used for gradient checks.
    The gradients are ``None`` when ``with_grad`` is false.
    """
    rng = np.random.default_rng(seed)
    ms = [len(bt) for bt in batches]
    val, gp, gq, _ = _stats_and_grads(arch, np.asarray(prior_flat, float),
                                      [np.asarray(p, float) for p in posts], batches, ms,
                                      spec, rng, mc_samples, with_grad=with_grad)
    return val, gp, gq


def _check_tasks(tasks, spec: ObjectiveSpec):
    if not tasks:
        raise ValueError("meta-training needs at least one task")
    for t in tasks:
        if t.m < spec.min_samples:
            raise ValueError(f"task with {t.m} samples; {spec.kind.value} needs >= {spec.min_samples}")


def meta_train(tasks, arch: NetworkArch, cfg: TrainConfig, init_prior: DiagGaussian | None = None,
               callback=None) -> MetaTrainResult:
    """Jointly optimize the prior center and all task posteriors."""
    spec = cfg.objective
    if spec.n_tasks != len(tasks):
        spec = spec.with_tasks(len(tasks))
    _check_tasks(tasks, spec)
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, batch_ss, noise_ss, meta_ss = ss.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    prior = init_prior.copy() if init_prior is not None else init_params(arch, init_rng)
    params = {"prior": prior.flat()}
    for i in range(len(tasks)):
        fresh = init_params(arch, init_rng).flat()
        params[f"post{i}"] = fresh if cfg.posterior_init == "independent" else prior.flat()
    streams = [_BatchStream(t.train, cfg.batch_size, np.random.default_rng(s))
               for t, s in zip(tasks, batch_ss.spawn(len(tasks)))]
    noise_rng = np.random.default_rng(noise_ss)
    meta_rng = np.random.default_rng(meta_ss)
    state = OptimizerState()
    n = len(tasks)
    ms = [t.m for t in tasks]
    m_total = float(sum(ms))
    iters = max(math.ceil(m / min(cfg.batch_size, m)) for m in ms)
    history = []
    for epoch in range(cfg.epochs):
        acc = {}
        for _ in range(iters):
            if cfg.meta_batch is not None and cfg.meta_batch < n:
                chosen = np.sort(meta_rng.choice(n, size=cfg.meta_batch, replace=False))
            else:
                chosen = np.arange(n)
            batches = [streams[i].next() for i in chosen]
            posts = [params[f"post{i}"] for i in chosen]
            val, gp, gq, info = _stats_and_grads(
                arch, params["prior"], posts, batches, [ms[i] for i in chosen], spec,
                noise_rng, cfg.mc_samples, n_scale=n / len(chosen), m_total=m_total)
            grads = {"prior": gp}
            for i, g in zip(chosen, gq):
                grads[f"post{i}"] = g
            adam_step(params, grads, state, cfg.lr, cfg.adam_betas, cfg.adam_eps)
            for k, v in info.items():
                acc[k] = acc.get(k, 0.0) + v / iters
        acc["epoch"] = epoch
        history.append(acc)
        if callback is not None:
            callback(acc)
    posts = [DiagGaussian.from_flat(params[f"post{i}"]) for i in range(n)]
    return MetaTrainResult(DiagGaussian.from_flat(params["prior"]), posts, history)


def meta_test(prior: DiagGaussian, task, arch: NetworkArch, cfg: TrainConfig) -> MetaTestResult:
    """Learn a new task starting from (and regularized towards) a fixed prior.

    The posterior is initialized at the prior.  Task-count constants use a
    single task and the environment term, constant here, is left out.
    """
    spec = cfg.objective.with_tasks(1)
    _check_tasks([task], spec)
    if prior.dim != arch.n_params:
        raise ValueError(f"prior has {prior.dim} parameters, arch needs {arch.n_params}")
    ss = np.random.SeedSequence(cfg.seed)
    batch_ss, noise_ss, prior_ss = ss.spawn(3)
    prior_flat = prior.flat()
    if cfg.sampled_prior:
        hyper = HyperPosterior(prior_flat, spec.kappa_q, spec.kappa_p)
        prior_flat = hyper.sample(np.random.default_rng(prior_ss))
    params = {"post": prior_flat.copy()}
    stream = _BatchStream(task.train, cfg.batch_size, np.random.default_rng(batch_ss))
    noise_rng = np.random.default_rng(noise_ss)
    state = OptimizerState()
    iters = math.ceil(task.m / min(cfg.batch_size, task.m))
    history = []
    for epoch in range(cfg.epochs):
        acc = {}
        for _ in range(iters):
            batch = stream.next()
            val, _, gq, info = _stats_and_grads(
                arch, prior_flat, [params["post"]], [batch], [task.m], spec, noise_rng,
                cfg.mc_samples, include_env=False, prior_noise=False)
            adam_step(params, {"post": gq[0]}, state, cfg.lr, cfg.adam_betas, cfg.adam_eps)
            for k, v in info.items():
                acc[k] = acc.get(k, 0.0) + v / iters
        acc["epoch"] = epoch
        history.append(acc)
    post = DiagGaussian.from_flat(params["post"])
    return MetaTestResult(post, test_error(post, task.test, arch), history)


def test_error(dist: DiagGaussian, batch: Batch, arch: NetworkArch) -> float:
    """0-1 error of the mean network."""
    logits = forward_mean(StochasticNet(arch, dist), batch)
    return float(np.mean(predict(logits) != batch.labels))


test_error.__test__ = False


def expected_bounded_loss(dist: DiagGaussian, batch: Batch, arch: NetworkArch, rng,
                          n_samples: int = 8, kind: str = "clipped_ce") -> float:
    """Monte-Carlo mean of the bounded loss of the stochastic network."""
    net = StochasticNet(arch, dist)
    vals = [bounded_loss(forward_stochastic(net, batch, rng)[0], batch.labels, kind)
            for _ in range(n_samples)]
    return float(np.mean(vals))


def evaluate_bound(prior: DiagGaussian, posteriors, tasks, arch: NetworkArch, cfg: TrainConfig,
                   kind: Kind | str | None = None, seed=None) -> dict:
    """Evaluate the meta-learning bound with the bounded loss as empirical term.

    Hyper-posterior expectations use ``cfg.eval_mc_samples`` draws; the
    empirical term uses the full training sets.
    """
    spec = cfg.objective.with_tasks(len(tasks))
    if kind is not None:
        spec = replace(spec, kind=Kind(kind))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    hyper = HyperPosterior(prior.flat(), spec.kappa_q, spec.kappa_p)
    kl_h = hyper_kl(hyper, spec.hyper_kl_constants_once)
    d = arch.n_params
    k = cfg.eval_mc_samples
    kls = np.zeros(len(tasks))
    for _ in range(k):
        noisy = hyper.sample(rng)
        p = DiagGaussian(noisy[:d], noisy[d:])
        for i, q in enumerate(posteriors):
            kls[i] += kl_diag_gaussian(q, p) / k
    emp = np.array([expected_bounded_loss(q, t.train, arch, rng, k, cfg.bounded_loss)
                    for q, t in zip(posteriors, tasks)])
    stats = [TaskStats(t.m, float(e), float(kl), kl_h) for t, e, kl in zip(tasks, emp, kls)]
    parts = objective_parts(stats, spec)
    return {"bound": parts.value, "emp_err": emp.tolist(), "kl_task": kls.tolist(),
            "kl_hyper": kl_h, "task_terms": parts.task_terms, "env_term": parts.env_term,
            "kind": spec.kind.value}
