"""Factorized Gaussian distributions over weight vectors.

Every distribution here is parameterized by a mean vector ``mu`` and a
log-variance vector ``rho`` (``sigma^2 = exp(rho)``).  The log-variance is
clamped to ``[RHO_MIN, RHO_MAX]`` before exponentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RHO_MIN = -20.0
RHO_MAX = 4.0


def clamp_rho(rho: np.ndarray) -> np.ndarray:
    return np.clip(rho, RHO_MIN, RHO_MAX)


def rho_mask(rho: np.ndarray) -> np.ndarray:
    """Derivative of the clamp: 1 inside the admissible range, 0 outside."""
    return ((rho >= RHO_MIN) & (rho <= RHO_MAX)).astype(float)


@dataclass
class DiagGaussian:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.mu.ndim != 1 or self.mu.shape != self.rho.shape:
            raise ValueError(
                f"mu and rho must be 1-D of equal length, got {self.mu.shape} and {self.rho.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def var(self) -> np.ndarray:
        return np.exp(clamp_rho(self.rho))

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * clamp_rho(self.rho))

    def flat(self) -> np.ndarray:
        """Concatenated ``(mu, rho)`` parameter vector of length ``2 * dim``."""
        return np.concatenate([self.mu, self.rho])

    @classmethod
    def from_flat(cls, theta: np.ndarray) -> "DiagGaussian":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.shape[0] % 2:
            raise ValueError(f"flat parameter vector must have even length, got {theta.shape}")
        d = theta.shape[0] // 2
        return cls(theta[:d].copy(), theta[d:].copy())

    def copy(self) -> "DiagGaussian":
        return DiagGaussian(self.mu.copy(), self.rho.copy())

    def log_pdf(self, w: np.ndarray) -> np.ndarray:
        """Log density of each row of ``w`` (shape ``(..., dim)``)."""
        r = clamp_rho(self.rho)
        z2 = (w - self.mu) ** 2 / np.exp(r)
        return -0.5 * np.sum(z2 + r + np.log(2 * np.pi), axis=-1)


@dataclass
class HyperPosterior:
    """Isotropic Gaussian ``N(theta, kappa_q^2 I)`` over prior parameters.

    The hyper-prior it is compared against is ``N(0, kappa_p^2 I)``.
    """

    theta: np.ndarray
    kappa_q: float
    kappa_p: float

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if not (self.kappa_q > 0 and self.kappa_p > 0):
            raise ValueError(f"kappa_q and kappa_p must be positive, got {self.kappa_q}, {self.kappa_p}")

    @property
    def n_params(self) -> int:
        return self.theta.shape[0]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.theta + self.kappa_q * rng.standard_normal(self.theta.shape)


def _check_dims(q: DiagGaussian, p: DiagGaussian):
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> float:
    """KL(q || p) for factorized Gaussians, in closed form."""
    _check_dims(q, p)
    rq, rp = clamp_rho(q.rho), clamp_rho(p.rho)
    vq, vp = np.exp(rq), np.exp(rp)
    terms = (rp - rq) + (vq + (q.mu - p.mu) ** 2) / vp - 1.0
    return float(max(0.5 * np.sum(terms), 0.0))


def kl_diag_gaussian_grad(q: DiagGaussian, p: DiagGaussian):
    """Gradients of KL(q || p) w.r.t. ``(q.mu, q.rho, p.mu, p.rho)``."""
    _check_dims(q, p)
    rq, rp = clamp_rho(q.rho), clamp_rho(p.rho)
    vq, vp = np.exp(rq), np.exp(rp)
    diff = q.mu - p.mu
    g_mu_q = diff / vp
    g_rho_q = 0.5 * (vq / vp - 1.0) * rho_mask(q.rho)
    g_mu_p = -g_mu_q
    g_rho_p = 0.5 * (1.0 - (vq + diff ** 2) / vp) * rho_mask(p.rho)
    return g_mu_q, g_rho_q, g_mu_p, g_rho_p


def hyper_kl(h: HyperPosterior, constants_once: bool = False) -> float:
    """KL between ``N(theta, kappa_q^2 I)`` and ``N(0, kappa_p^2 I)``.

    With ``constants_once=True`` the per-dimension constants are counted once
    instead of ``N_P`` times; the two agree only when ``N_P == 1``.
    """
    n = 1 if constants_once else h.n_params
    kq2, kp2 = h.kappa_q ** 2, h.kappa_p ** 2
    val = (h.theta @ h.theta + n * kq2) / (2 * kp2) + n * np.log(h.kappa_p / h.kappa_q) - 0.5 * n
    return float(max(val, 0.0))


def hyper_kl_grad(h: HyperPosterior) -> np.ndarray:
    """Gradient of :func:`hyper_kl` w.r.t. ``theta`` (same for both forms)."""
    return h.theta / h.kappa_p ** 2


def sample_reparam(g: DiagGaussian, eps: np.ndarray) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != g.dim:
        raise ValueError(f"eps has last dimension {eps.shape[-1]}, expected {g.dim}")
    return g.mu + g.std * eps


def kl_mc_oracle(q: DiagGaussian, p: DiagGaussian, n_samples: int, seed) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(q || p) and its standard error.

    Test oracle only; samples ``w ~ q`` in chunks so memory stays bounded.
    """
    _check_dims(q, p)
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    rng = np.random.default_rng(seed)
    chunk = max(1, min(n_samples, 2_000_000 // max(q.dim, 1)))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        w = sample_reparam(q, rng.standard_normal((k, q.dim)))
        lr = q.log_pdf(w) - p.log_pdf(w)
        total += lr.sum()
        total_sq += (lr ** 2).sum()
        done += k
    mean = total / n_samples
    var = max(total_sq / n_samples - mean ** 2, 0.0) * n_samples / (n_samples - 1)
    return float(mean), float(np.sqrt(var / n_samples))


def expected_kl_noisy_prior(q: DiagGaussian, prior_flat: np.ndarray, kappa_q: float) -> float:
    """``E KL(q || P)`` where P's flat ``(mu, rho)`` vector is ``prior_flat + kappa_q * eps``.

    Exact (no sampling); log-variances are used unclamped.
    """
    prior_flat = np.asarray(prior_flat, dtype=float)
    d = q.dim
    if prior_flat.shape != (2 * d,):
        raise ValueError(f"prior vector must have length {2 * d}")
    mu_p, rho_p = prior_flat[:d], prior_flat[d:]
    k2 = kappa_q ** 2
    num = np.exp(q.rho) + (q.mu - mu_p) ** 2 + k2
    return float(0.5 * np.sum(rho_p - q.rho + num * np.exp(-rho_p + 0.5 * k2) - 1.0))


def expected_kl_noisy_prior_grad(q: DiagGaussian, prior_flat: np.ndarray, kappa_q: float):
    """Gradients of :func:`expected_kl_noisy_prior` w.r.t. ``(q.mu, q.rho, prior_flat)``."""
    d = q.dim
    mu_p, rho_p = prior_flat[:d], prior_flat[d:]
    k2 = kappa_q ** 2
    inv = np.exp(-rho_p + 0.5 * k2)
    diff = q.mu - mu_p
    num = np.exp(q.rho) + diff ** 2 + k2
    g_mu_q = diff * inv
    g_rho_q = 0.5 * (np.exp(q.rho) * inv - 1.0)
    g_prior = np.concatenate([-g_mu_q, 0.5 * (1.0 - num * inv)])
    return g_mu_q, g_rho_q, g_prior
