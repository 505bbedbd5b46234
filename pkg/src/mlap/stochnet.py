"""Fully connected networks with factorized Gaussian weights.

Parameters of a network live in one flat ``(mu, rho)`` pair.  The layout is
layer by layer: the weight matrix (``fan_in x fan_out``, row-major) followed
by the bias vector.  Forward passes sample pre-activations with the local
reparametrization trick, and :func:`backward` returns exact gradients of the
sampled loss with respect to every mean and log-variance entry.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .gauss import DiagGaussian, clamp_rho, rho_mask


def elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z):
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass(frozen=True)
class NetworkArch:
    layer_sizes: tuple
    activation: str = "elu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer_sizes needs >= 2 positive entries, got {sizes}")
        if self.activation != "elu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    def layer_slices(self):
        """``[(weight_slice, (fan_in, fan_out), bias_slice), ...]`` into the flat vector."""
        out = []
        off = 0
        for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(off, off + fi * fo)
            off += fi * fo
            b = slice(off, off + fo)
            off += fo
            out.append((w, (fi, fo), b))
        return out

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layer_index(self) -> np.ndarray:
        """Layer id of every flat parameter entry."""
        idx = np.empty(self.n_params, dtype=int)
        for k, (w, _, b) in enumerate(self.layer_slices()):
            idx[w] = k
            idx[b] = k
        return idx

    def split(self, flat: np.ndarray):
        """Per-layer ``(W, b)`` views of a flat parameter vector."""
        return [(flat[w].reshape(shape), flat[b]) for w, shape, b in self.layer_slices()]

    def to_dict(self):
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}


def init_params(arch: NetworkArch, rng: np.random.Generator,
                rho_mean: float = -10.0, rho_std: float = 0.1) -> DiagGaussian:
    """Glorot-uniform means, zero bias means, ``rho ~ N(rho_mean, rho_std^2)``."""
    mu = np.zeros(arch.n_params)
    for w, (fi, fo), _ in arch.layer_slices():
        lim = np.sqrt(6.0 / (fi + fo))
        mu[w] = rng.uniform(-lim, lim, size=fi * fo)
    rho = rho_mean + rho_std * rng.standard_normal(arch.n_params)
    return DiagGaussian(mu, rho)


@dataclass
class StochasticNet:
    arch: NetworkArch
    dist: DiagGaussian

    def __post_init__(self):
        if self.dist.dim != self.arch.n_params:
            raise ValueError(f"parameter count {self.dist.dim} does not match arch ({self.arch.n_params})")

    @classmethod
    def init(cls, arch: NetworkArch, rng: np.random.Generator) -> "StochasticNet":
        return cls(arch, init_params(arch, rng))

    def layers(self):
        """Per-layer ``(weights, biases)`` as :class:`DiagGaussian` pairs."""
        out = []
        for w, _, b in self.arch.layer_slices():
            out.append((DiagGaussian(self.dist.mu[w], self.dist.rho[w]),
                        DiagGaussian(self.dist.mu[b], self.dist.rho[b])))
        return out

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.dist.mu.tobytes())
        h.update(self.dist.rho.tobytes())
        return h.hexdigest()


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.ndim != 2 or self.labels.ndim != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(f"bad batch shapes {self.inputs.shape}, {self.labels.shape}")
        if self.inputs.shape[0] < 1:
            raise ValueError("empty batch")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class NoiseRecord:
    """Everything :func:`backward` needs from a forward pass."""

    fingerprint: str
    batch_size: int
    eps: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    std: list = field(default_factory=list)
    deterministic: bool = False


def _check_input(net: StochasticNet, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != net.arch.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input dim {net.arch.input_dim}")


def forward_stochastic(net: StochasticNet, batch: Batch, rng: np.random.Generator):
    """Sampled logits using per-example pre-activation noise.

    Returns ``(logits, record)``.
    """
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=float)
    _check_input(net, x)
    mu_layers = net.arch.split(net.dist.mu)
    var_layers = net.arch.split(np.exp(clamp_rho(net.dist.rho)))
    rec = NoiseRecord(net.fingerprint(), x.shape[0])
    a = x
    last = net.arch.n_layers - 1
    for k, ((mw, mb), (vw, vb)) in enumerate(zip(mu_layers, var_layers)):
        mean = a @ mw + mb
        var = (a * a) @ vw + vb
        s = np.sqrt(var)
        eps = rng.standard_normal(mean.shape)
        z = mean + s * eps
        rec.inputs.append(a)
        rec.eps.append(eps)
        rec.std.append(s)
        rec.pre.append(z)
        a = z if k == last else elu(z)
    return a, rec


def forward_mean(net: StochasticNet, batch, with_record: bool = False):
    """Deterministic pass through the weight means.

    With ``with_record=True`` also returns a record usable by
    :func:`backward` (which then yields zero log-variance gradients).
    """
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=float)
    _check_input(net, x)
    rec = NoiseRecord(net.fingerprint(), x.shape[0], deterministic=True) if with_record else None
    a = x
    layers = net.arch.split(net.dist.mu)
    for k, (mw, mb) in enumerate(layers):
        z = a @ mw + mb
        if rec is not None:
            rec.inputs.append(a)
            rec.pre.append(z)
        a = z if k == len(layers) - 1 else elu(z)
    return (a, rec) if with_record else a


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, so ties go to the lowest class
    return np.argmax(logits, axis=1)


def _per_sample_ce(logits, labels):
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits rows and labels length differ")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return logz - shifted[np.arange(labels.shape[0]), labels]


def loss_terms(logits, labels) -> tuple[float, float]:
    """Mean cross-entropy and mean of ``min(1, cross-entropy)``."""
    ce = _per_sample_ce(logits, labels)
    return float(ce.mean()), float(np.minimum(ce, 1.0).mean())


def bounded_loss(logits, labels, kind: str = "clipped_ce") -> float:
    """Mean per-sample loss in [0, 1]: clipped cross-entropy or 0-1 error."""
    if kind == "clipped_ce":
        return loss_terms(logits, labels)[1]
    if kind == "zero_one":
        _per_sample_ce(logits, labels)
        return float(np.mean(predict(logits) != np.asarray(labels)))
    raise ValueError(f"unknown bounded loss {kind!r}")


def ce_grad(logits, labels) -> np.ndarray:
    """d(mean cross-entropy)/d(logits)."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=int)
    _per_sample_ce(logits, labels)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(labels.shape[0]), labels] -= 1.0
    return p / labels.shape[0]


def backward(net: StochasticNet, batch: Batch, record: NoiseRecord, upstream: np.ndarray):
    """Reverse-mode gradients for the forward pass stored in ``record``.

    ``upstream`` is d(objective)/d(logits).  The noise values are treated as
    constants.  Returns flat ``(grad_mu, grad_rho)``.
    """
    if record.fingerprint != net.fingerprint() or record.batch_size != len(batch):
        raise ValueError("noise record does not belong to this network/batch")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != record.pre[-1].shape:
        raise ValueError(f"upstream shape {upstream.shape} != logits shape {record.pre[-1].shape}")
    arch = net.arch
    g_mu = np.zeros(arch.n_params)
    g_rho = np.zeros(arch.n_params)
    var_flat = np.exp(clamp_rho(net.dist.rho)) * rho_mask(net.dist.rho)
    mu_layers = arch.split(net.dist.mu)
    var_layers = arch.split(np.exp(clamp_rho(net.dist.rho)))
    slices = arch.layer_slices()
    g = upstream
    for k in range(arch.n_layers - 1, -1, -1):
        if k != arch.n_layers - 1:
            g = g * elu_grad(record.pre[k])
        a = record.inputs[k]
        w_sl, shape, b_sl = slices[k]
        g_mu[w_sl] = (a.T @ g).ravel()
        g_mu[b_sl] = g.sum(axis=0)
        if record.deterministic:
            if k > 0:
                g = g @ mu_layers[k][0].T
            continue
        dvar = g * record.eps[k] * 0.5 / record.std[k]
        g_rho[w_sl] = ((a * a).T @ dvar).ravel() * var_flat[w_sl]
        g_rho[b_sl] = dvar.sum(axis=0) * var_flat[b_sl]
        if k > 0:
            g = g @ mu_layers[k][0].T + 2.0 * a * (dvar @ var_layers[k][0].T)
    return g_mu, g_rho
