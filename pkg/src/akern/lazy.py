"""Lazy-limit baselines: NNGP and NTK kernels, GP prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (Activation, KernelKind, KernelMatrix, PredictorResult, as_array,
                   kernel_ridge_predict, psd_solve, symmetrize)
from .sampling import cholesky_psd

MC_BATCH = 20000
MC_SEED = 0


def relu_moments(K):
    """Closed-form E[relu(u) relu(v)] and E[step(u) step(v)] for (u, v) with
    covariance taken from K (arc-cosine kernels of order 1 and 0)."""
    K = symmetrize(as_array(K))
    d = np.sqrt(np.clip(np.diag(K), 0.0, None))
    norm = np.outer(d, d)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norm > 0, K / norm, 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    theta = np.arccos(cos)
    phi = norm / (2 * np.pi) * (np.sin(theta) + (np.pi - theta) * cos)
    dphi = (np.pi - theta) / (2 * np.pi)
    # a zero-variance coordinate is identically 0: its step function is 0 a.s.
    dphi = np.where(norm > 0, dphi, 0.0)
    return symmetrize(phi), symmetrize(dphi)


def mc_moments(K, activation, batch: int = MC_BATCH, seed=MC_SEED):
    """Monte Carlo E[phi phi^T], E[phi' phi'^T] under N(0, K), plus the
    entrywise standard errors of the first."""
    act = Activation.parse(activation)
    rng = np.random.default_rng(seed)
    L = cholesky_psd(K)
    h = rng.standard_normal((batch, L.shape[0])) @ L.T
    f, df = act.phi(h), act.dphi(h)
    phi = symmetrize(f.T @ f / batch)
    dphi = symmetrize(df.T @ df / batch)
    sq = (f ** 2).T @ (f ** 2) / batch
    stderr = np.sqrt(np.clip(sq - phi ** 2, 0.0, None) / batch)
    return phi, dphi, stderr


def gaussian_moments(K, activation, batch: int = MC_BATCH, seed=MC_SEED):
    act = Activation.parse(activation)
    K = symmetrize(as_array(K))
    if act is Activation.LINEAR:
        return K.copy(), np.ones_like(K)
    if act is Activation.RELU:
        return relu_moments(K)
    phi, dphi, _ = mc_moments(K, act, batch, seed)
    return phi, dphi


def _layers(phi0, L, activation, lambdas=None, batch=MC_BATCH, seed=MC_SEED):
    lambdas = np.ones(L + 1) if lambdas is None else np.asarray(lambdas, float)
    phis, dphis = [symmetrize(as_array(phi0))], [None]
    for l in range(1, L + 1):
        ss = np.random.SeedSequence([seed, l])
        phi, dphi = gaussian_moments(phis[-1] / lambdas[l - 1], activation, batch, ss)
        phis.append(phi)
        dphis.append(dphi)
    return phis, dphis


def nngp_kernel(phi0, L: int, activation, lambdas=None, batch: int = MC_BATCH,
                seed=MC_SEED) -> list[KernelMatrix]:
    """Feature kernels Phi^0..Phi^L of the lazy (NNGP) forward recursion.

    With ``lambdas`` the layer-l fields are drawn from N(0, Phi^{l-1}/lambda_{l-1}),
    the prior used by the Bayesian solver.
    """
    phis, _ = _layers(phi0, L, activation, lambdas, batch, seed)
    return [KernelMatrix(K, KernelKind.FEATURE) for K in phis]


def ntk_kernel(phi0, L: int, activation, batch: int = MC_BATCH, seed=MC_SEED) -> KernelMatrix:
    """Lazy NTK: K^l = K^{l-1} * dPhi^l + Phi^l with K^0 = Phi^0."""
    phis, dphis = _layers(phi0, L, activation, None, batch, seed)
    K = phis[0]
    for l in range(1, L + 1):
        K = K * dphis[l] + phis[l]
    return KernelMatrix(K, KernelKind.TANGENT)


def conv_ntk(patch_gram, patch_count: int) -> KernelMatrix:
    """Lazy NTK of a one-hidden-layer ReLU network with one filter bank applied
    to non-overlapping patches and an independent readout per patch position,
    summed over positions.

    ``patch_gram`` is the (P*A) x (P*A) Gram of patches ordered pattern-major.
    At initialization readout weights of different positions are independent,
    so only same-position pairs contribute.
    """
    G = symmetrize(as_array(patch_gram))
    A = patch_count
    P = G.shape[0] // A
    phi, dphi = relu_moments(G)
    t = np.einsum("iaja->ij", (G * dphi).reshape(P, A, P, A))
    r = np.einsum("iaja->ij", phi.reshape(P, A, P, A))
    return KernelMatrix(t + r, KernelKind.TANGENT)


@dataclass(frozen=True, eq=False)
class GPResult:
    prediction: PredictorResult
    variance: np.ndarray


def gp_predict(K, k_test, k_test_diag, y, beta: float, y_test=None) -> GPResult:
    """GP posterior mean and predictive variance with noise 1/beta."""
    K = symmetrize(as_array(K))
    inv_beta = 0.0 if np.isinf(beta) else 1.0 / beta
    pred = kernel_ridge_predict(K, k_test, y, inv_beta, y_test, kind=KernelKind.FEATURE)
    k_test = np.atleast_2d(np.asarray(k_test, float))
    sol = psd_solve(K + inv_beta * np.eye(K.shape[0]), k_test.T)
    var = np.asarray(k_test_diag, float) - np.einsum("ij,ji->i", k_test, sol) + inv_beta
    if np.any(var < -1e-10):
        raise ValueError(f"negative predictive variance {var.min():.3e}")
    return GPResult(pred, np.clip(var, 0.0, None))
