"""Reference learners for comparison with meta-learned priors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .gauss import DiagGaussian
from .objectives import Kind
from .optim import OptimizerState, adam_step
from .stochnet import (NetworkArch, StochasticNet, backward, ce_grad, forward_mean, init_params,
                       loss_terms)
from .trainer import TrainConfig, _BatchStream, meta_test, test_error


class BaselineKind(str, Enum):
    SCRATCH_D = "scratch_d"
    SCRATCH_S = "scratch_s"
    WARM_START = "warm_start"
    ORACLE = "oracle"
    AVERAGED = "averaged"


@dataclass
class BaselineResult:
    test_error: float
    weights: np.ndarray
    history: list = field(default_factory=list)


def oracle_frozen_layers(family: str, arch: NetworkArch) -> tuple:
    """Layers held fixed by the oracle: all but the output for permuted labels,
    all but the input layer for permuted pixels."""
    if family == "permuted_labels":
        return tuple(range(arch.n_layers - 1))
    if family == "permuted_pixels":
        return tuple(range(1, arch.n_layers))
    raise ValueError(f"unknown environment family {family!r}")


def train_deterministic(task, arch: NetworkArch, cfg: TrainConfig, init_mu=None,
                        frozen_layers=()) -> BaselineResult:
    """Plain cross-entropy training of the mean network with Adam."""
    frozen_layers = tuple(frozen_layers)
    if any(k < 0 or k >= arch.n_layers for k in frozen_layers):
        raise ValueError(f"frozen layer index out of range for {arch.n_layers} layers")
    batch_ss, init_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    if init_mu is None:
        mu = init_params(arch, np.random.default_rng(init_ss)).mu
    else:
        mu = np.array(init_mu, dtype=float, copy=True)
    trainable = np.ones(arch.n_params)
    for k, (w, _, b) in enumerate(arch.layer_slices()):
        if k in frozen_layers:
            trainable[w] = 0.0
            trainable[b] = 0.0
    zeros = np.zeros(arch.n_params)
    params = {"w": mu}
    state = OptimizerState()
    stream = _BatchStream(task.train, cfg.batch_size, np.random.default_rng(batch_ss))
    iters = math.ceil(task.m / min(cfg.batch_size, task.m))
    history = []
    for _ in range(cfg.epochs):
        total = 0.0
        for _ in range(iters):
            batch = stream.next()
            net = StochasticNet(arch, DiagGaussian(params["w"], zeros))
            logits, rec = forward_mean(net, batch, with_record=True)
            g, _ = backward(net, batch, rec, ce_grad(logits, batch.labels))
            total += loss_terms(logits, batch.labels)[0] / iters
            adam_step(params, {"w": g * trainable}, state, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        history.append(total)
    w = params["w"]
    err = test_error(DiagGaussian(w, zeros), task.test, arch)
    return BaselineResult(err, w, history)


def flat_prior(arch: NetworkArch, seed) -> DiagGaussian:
    """Fresh initialization used as the starting point of stochastic scratch learning."""
    return init_params(arch, np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2]))


def run_baseline(kind, train_tasks, new_task, arch: NetworkArch, cfg: TrainConfig,
                 family: str = "permuted_labels", frozen_layers=None) -> BaselineResult:
    kind = BaselineKind(kind)
    if kind == BaselineKind.SCRATCH_D:
        return train_deterministic(new_task, arch, cfg)
    if kind == BaselineKind.SCRATCH_S:
        scfg = replace(cfg, objective=replace(cfg.objective, kind=Kind.NONE))
        res = meta_test(flat_prior(arch, cfg.seed), new_task, arch, scfg)
        return BaselineResult(res.test_error, res.posterior.flat(), res.history)
    if not train_tasks:
        raise ValueError(f"{kind.value} needs at least one training task")
    if kind in (BaselineKind.WARM_START, BaselineKind.ORACLE):
        # warm start comes from the first training task
        src = train_deterministic(train_tasks[0], arch, cfg)
        frozen = ()
        if kind == BaselineKind.ORACLE:
            frozen = oracle_frozen_layers(family, arch) if frozen_layers is None else frozen_layers
        return train_deterministic(new_task, arch, cfg, init_mu=src.weights, frozen_layers=frozen)
    if kind == BaselineKind.AVERAGED:
        ws = [train_deterministic(t, arch, cfg).weights for t in train_tasks]
        prior = averaged_prior(ws)
        scfg = replace(cfg, objective=replace(cfg.objective, kind=Kind.SEEGER))
        res = meta_test(prior, new_task, arch, scfg)
        return BaselineResult(res.test_error, res.posterior.flat(), res.history)
    raise ValueError(kind)


def averaged_prior(weight_vectors) -> DiagGaussian:
    """Mean of the per-task weight vectors with unit variances."""
    mu = np.mean(np.stack(weight_vectors), axis=0)
    return DiagGaussian(mu, np.zeros_like(mu))
