"""Analytic image prior: an isotropic Gaussian mixture with a Tweedie denoiser.

For ``p(x) = sum_k pi_k N(x; mu_k, s^2 I)`` the noisy marginal at level sigma
is the same mixture with variance ``v = s^2 + sigma^2``, and the posterior
mean is

    D(y; sigma) = y + sigma^2 * grad log p_sigma(y)
                = (s^2 * y + sigma^2 * mbar(y)) / v,

where ``mbar`` is the responsibility-weighted mean of the component means.
Its Jacobian is symmetric:

    J = (s^2 / v) I + (sigma^2 / v^2) * Cov_gamma(mu).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nappure.tensor import read_tensor, sample_gaussian


@dataclass(frozen=True)
class SigmaSchedule:
    low: float = 0.4
    high: float = 0.6

    def __post_init__(self):
        if not (0 < self.low < self.high):
            raise ValueError(f"need 0 < low < high, got ({self.low}, {self.high})")

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.low + (self.high - self.low) * rng.random())


class GmmPrior:
    """Mixture weights ``(K,)``, means ``(K, d)`` and a shared stddev."""

    def __init__(self, weights, means, s_data: float):
        weights = np.asarray(weights, dtype=np.float64).ravel()
        means = np.asarray(means, dtype=np.float64)
        means = means.reshape(means.shape[0], -1)
        if weights.shape[0] != means.shape[0]:
            raise ValueError("weights and means disagree on the component count")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        if not s_data >= 0:
            raise ValueError("s_data must be non-negative")
        self.weights = weights
        self.means = means
        self.s_data = float(s_data)
        self._log_w = np.log(weights)
        self._mu_sq = (means * means).sum(axis=1)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(), "s_data": self.s_data}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike | None = None) -> "GmmPrior":
        means = []
        for m in d["means"]:
            if isinstance(m, str):
                path = Path(m)
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                means.append(read_tensor(path).ravel())
            else:
                means.append(np.asarray(m, dtype=np.float64).ravel())
        return cls(d["weights"], np.stack(means), d["s_data"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str, base_dir=None) -> "GmmPrior":
        return cls.from_dict(json.loads(text), base_dir)

    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        x = self.means[labels] + self.s_data * rng.standard_normal((n, self.dim))
        return x, labels

    def nearest_mean(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        d2 = ((x[:, None, :] - self.means[None]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def _rows(y, dim):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y2 = y.reshape(-1, dim) if not single else y[None]
    return y2, single


def responsibilities(prior: GmmPrior, y, sigma):
    """Posterior component probabilities under the sigma-smoothed mixture."""
    y2, single = _rows(y, prior.dim)
    v = prior.s_data**2 + np.asarray(sigma, dtype=np.float64) ** 2
    v = np.broadcast_to(v, (y2.shape[0],))[:, None]
    # ||y - mu||^2 = ||y||^2 - 2 y.mu + ||mu||^2; the ||y||^2 term cancels
    cross = np.einsum("nd,kd->nk", y2, prior.means)
    logits = prior._log_w[None] - (prior._mu_sq[None] - 2 * cross) / (2 * v)
    logits -= logits.max(axis=1, keepdims=True)
    g = np.exp(logits)
    g /= g.sum(axis=1, keepdims=True)
    return g[0] if single else g


def _posterior(prior, y2, sigma):
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (y2.shape[0],))
    v = prior.s_data**2 + sigma**2
    gam = responsibilities(prior, y2, sigma)
    # einsum, not BLAS matmul: a row must not depend on the batch it is in
    mbar = np.einsum("nk,kd->nd", gam, prior.means)
    return gam, mbar, sigma, v


def denoise(prior: GmmPrior, y, sigma) -> np.ndarray:
    """Posterior mean E[x | x + sigma n = y]."""
    y2, single = _rows(y, prior.dim)
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    _, mbar, sigma, v = _posterior(prior, y2, sigma)
    out = (prior.s_data**2 * y2 + (sigma**2)[:, None] * mbar) / v[:, None]
    return out[0] if single else out


def _jt_from(prior, gam, mbar, sigma, v, cot):
    cen = prior.means[None] - mbar[:, None, :]  # (N, K, d)
    proj = np.einsum("nkd,nd->nk", cen, cot)
    cov_c = np.einsum("nk,nkd->nd", gam * proj, cen)
    return (prior.s_data**2 / v)[:, None] * cot + (sigma**2 / v**2)[:, None] * cov_c


def denoise_vjp(prior: GmmPrior, y, sigma, cotangent) -> np.ndarray:
    """``J^T @ cotangent`` for the denoiser Jacobian at ``y``."""
    y2, single = _rows(y, prior.dim)
    c2, _ = _rows(cotangent, prior.dim)
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("sigma must be positive")
    gam, mbar, sigma, v = _posterior(prior, y2, sigma)
    jt = _jt_from(prior, gam, mbar, sigma, v, c2)
    return jt[0] if single else jt


def likelihood_terms(prior: GmmPrior, x, sigma, noise, stop_gradient: bool = False):
    """Single-sample denoising loss ``||D(x + sigma n) - x||^2`` with its x-gradient.

    Batched over rows: ``x`` and ``noise`` are ``(N, d)``, ``sigma`` ``(N,)``.
    With ``stop_gradient`` the denoiser output is treated as a constant.
    """
    x2 = np.asarray(x, dtype=np.float64).reshape(-1, prior.dim)
    noise = np.asarray(noise, dtype=np.float64).reshape(x2.shape)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x2.shape[0],))
    y = x2 + sigma[:, None] * noise
    gam, mbar, _, v = _posterior(prior, y, sigma)
    r = (prior.s_data**2 * y + (sigma**2)[:, None] * mbar) / v[:, None] - x2
    if stop_gradient:
        grad = -2.0 * r
    else:
        grad = 2.0 * (_jt_from(prior, gam, mbar, sigma, v, r) - r)
    return (r * r).sum(axis=1), grad


def likelihood_loss(prior: GmmPrior, x, rng: np.random.Generator, schedule: SigmaSchedule = SigmaSchedule(),
                    stop_gradient: bool = False):
    """Draw ``(sigma, n)`` from ``rng`` and evaluate the denoising loss at image ``x``.

    Returns ``(loss, grad_x, sigma, noise)`` with ``grad_x`` shaped like ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    sigma = schedule.sample(rng)
    noise = sample_gaussian(rng, x.size)
    loss, grad = likelihood_terms(prior, x.ravel()[None], np.array([sigma]), noise[None], stop_gradient)
    return float(loss[0]), grad[0].reshape(x.shape), sigma, noise
