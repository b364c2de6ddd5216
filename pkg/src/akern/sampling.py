"""Gaussian sampling from kernel covariances and importance-sampling estimates
of the tilted single-site density.

A single-site batch is a set of Gaussian fields ``h_k ~ N(0, C)`` drawn once.
The tilted density of a layer multiplies the Gaussian prior by
``exp(-1/2 phi(h)^T Phi_hat phi(h))``; all moments are self-normalized
importance-sampling averages over the batch.  When the prior covariance of the
estimate differs from the covariance the batch was drawn from, the batch is
reweighted by the Gaussian likelihood ratio, which makes the estimate a smooth
deterministic function of both arguments (used for finite-difference checks).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .core import (Activation, KernelKind, KernelMatrix, SingularKernelError,
                   as_array, jittered_cholesky, symmetrize)

ESS_FLOOR = 10.0


class DegenerateTiltWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 20000
    seed: int = 0
    jitter: float = 1e-10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def rng(self, *key) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=tuple(key)))

    def replace(self, **kw) -> "SamplerConfig":
        d = dict(batch_size=self.batch_size, seed=self.seed, jitter=self.jitter)
        d.update(kw)
        return SamplerConfig(**d)


@dataclass(frozen=True, eq=False)
class SingleSiteEstimate:
    log_z: float
    tilted_feature_moment: KernelMatrix
    tilted_field_moment: KernelMatrix
    effective_sample_size: float
    log_z_stderr: float
    weights: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class SiteBatch:
    """Gaussian fields (B x P) drawn from N(0, cov)."""
    fields: np.ndarray
    cov: np.ndarray


def cholesky_psd(K, jitter: float = 1e-10) -> np.ndarray:
    """Lower factor L with L L^T = K + j I for the smallest j in
    (0, jitter, 100 jitter, 1e4 jitter) * trace/P that factorizes."""
    K = symmetrize(as_array(K))
    if not np.any(K):
        return np.zeros_like(K)
    try:
        L, _ = jittered_cholesky(K, (0.0, jitter, jitter * 1e2, jitter * 1e4))
    except SingularKernelError:
        raise SingularKernelError("not PSD") from None
    return L


def sample_gaussian(K, n: int, seed, jitter: float = 1e-10) -> np.ndarray:
    """P x n matrix whose columns are i.i.d. N(0, K)."""
    L = cholesky_psd(K, jitter)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xi = rng.standard_normal((L.shape[0], n))
    return L @ xi


def draw_site(cov, n: int, rng: np.random.Generator, jitter: float = 1e-10) -> SiteBatch:
    cov = symmetrize(as_array(cov))
    L = cholesky_psd(cov, jitter)
    xi = rng.standard_normal((n, cov.shape[0]))
    return SiteBatch(xi @ L.T, cov)


def _log_ratio(h, cov, base_cov, jitter):
    """log N(h; 0, cov) - log N(h; 0, base_cov) for each row of h."""
    L1, _ = jittered_cholesky(cov, (0.0, jitter, jitter * 1e2, jitter * 1e4))
    L0, _ = jittered_cholesky(base_cov, (0.0, jitter, jitter * 1e2, jitter * 1e4))
    u1 = linalg.solve_triangular(L1, h.T, lower=True)
    u0 = linalg.solve_triangular(L0, h.T, lower=True)
    logdet1 = 2 * np.sum(np.log(np.diag(L1)))
    logdet0 = 2 * np.sum(np.log(np.diag(L0)))
    return -0.5 * (np.sum(u1 ** 2, axis=0) - np.sum(u0 ** 2, axis=0)) - 0.5 * (logdet1 - logdet0)


def site_estimate(batch: SiteBatch, phi_hat, activation, cov=None,
                  jitter: float = 1e-10, features=None) -> SingleSiteEstimate:
    """Tilted estimate on a fixed batch.

    ``cov`` is the prior covariance of the estimate (defaults to the batch
    covariance).  ``features`` may pass a precomputed phi(batch.fields).
    """
    act = Activation.parse(activation)
    h = batch.fields
    B = h.shape[0]
    phi = act.phi(h) if features is None else features
    Q = symmetrize(as_array(phi_hat))
    log_w = -0.5 * np.einsum("bi,bi->b", phi @ Q, phi) if np.any(Q) else np.zeros(B)
    if cov is not None:
        cov = symmetrize(as_array(cov))
        if not np.array_equal(cov, batch.cov):
            log_w = log_w + _log_ratio(h, cov, batch.cov, jitter)
    lse = logsumexp(log_w)
    w = np.exp(log_w - lse)
    w /= w.sum()
    log_z = float(lse - np.log(B))
    sum_w2 = float(np.dot(w, w))
    ess = 1.0 / sum_w2
    stderr = float(np.sqrt(max(sum_w2 - 1.0 / B, 0.0)))
    feat = symmetrize(phi.T @ (w[:, None] * phi))
    field = symmetrize(h.T @ (w[:, None] * h))
    degenerate = ess < ESS_FLOOR
    if degenerate:
        warnings.warn(f"effective sample size {ess:.2f} below {ESS_FLOOR}",
                      DegenerateTiltWarning, stacklevel=2)
    return SingleSiteEstimate(log_z, KernelMatrix(feat, KernelKind.FEATURE),
                              KernelMatrix(field, KernelKind.FEATURE), ess, stderr,
                              w, degenerate)


def estimate_single_site(phi_prev, phi_hat, lambda_prev: float, activation,
                         config: SamplerConfig = SamplerConfig()) -> SingleSiteEstimate:
    """Importance-sampling estimate of ln Z, the tilted feature and field
    moments, and the effective sample size for one layer.

    Fields are drawn from N(0, phi_prev / lambda_prev).
    """
    cov = as_array(phi_prev) / lambda_prev
    batch = draw_site(cov, config.batch_size, config.rng(), config.jitter)
    return site_estimate(batch, phi_hat, activation, jitter=config.jitter)
