from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float = 1e-3,
              betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    Only keys present in ``grads`` are touched, so tasks left out of a meta
    mini-batch keep both their parameters and their moment estimates.
    """
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        p = params[k]
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {k!r}: {p.shape} vs {g.shape}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
