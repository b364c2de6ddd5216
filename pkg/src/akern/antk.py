"""Adaptive NTK (aNTK): mean-field field dynamics of two-layer networks trained
by gradient flow with weight decay, and the final-kernel predictor.

A sample s of the ensemble is one hidden neuron: its preactivations h_{mu a, s}
over every (pattern, patch) pair and its readout weights z_{a, s}.  One Euler
step of size eta is

    Delta_nu = y_nu - 1/(gamma0 S) sum_{a, s} phi(h_{nu a, s}) z_{a, s}      (train nu)
    h += eta [gamma0 sum_{nu b} Phi0_{mu a, nu b} g_{nu b} Delta_nu - lambda_0 h],
    z += eta [gamma0 sum_nu phi(h_{nu a}) Delta_nu - lambda_1 z],

with g = phi'(h) z.  Test patterns ride along: they are driven through the
input-kernel cross block but carry no error signal.  The MLP is the A = 1 case.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (Activation, Dataset, Hyperparams, KernelKind, KernelMatrix, PredictorResult,
                   as_array, kernel_ridge_predict, symmetrize)


class DmftDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class DmftConfig:
    T: int = 20000
    eta: float = 1e-3
    S: int = 20000
    seed: int = 0
    record_every: int = 1000
    init: str = "gaussian"            # or "laplace" (unit-variance Laplace draws)
    stop_tol: float | None = None     # stop once max |Delta(t) - Delta(t-1)| < stop_tol

    def __post_init__(self):
        if self.T < 1 or self.S < 1 or self.eta <= 0 or self.record_every < 1:
            raise ValueError("T, S, record_every must be >= 1 and eta > 0")
        if self.init not in ("gaussian", "laplace"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass(eq=False)
class FieldEnsemble:
    """h: (P_total*A) x S preactivations (pattern-major), z: A x S readout weights."""
    h: np.ndarray
    z: np.ndarray
    activation: Activation
    patch_count: int = 1

    @property
    def g(self) -> np.ndarray:
        # row mu*A + a belongs to patch a
        return self.activation.dphi(self.h) * np.tile(self.z, (self.h.shape[0] // self.patch_count, 1))

    @property
    def S(self) -> int:
        return self.h.shape[1]

    def feature_kernel(self) -> np.ndarray:
        f = self.activation.phi(self.h)
        return symmetrize(f @ f.T / self.S)

    def gradient_kernel(self) -> np.ndarray:
        g = self.g
        return symmetrize(g @ g.T / self.S)


@dataclass(eq=False)
class DmftTrajectory:
    eta: float
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    phi1: list = field(default_factory=list)
    g1: list = field(default_factory=list)
    converged_step: int | None = None


@dataclass(eq=False)
class DmftResult:
    trajectory: DmftTrajectory
    fields: FieldEnsemble
    phi0: np.ndarray            # (P_total*A) square input kernel
    P_train: int
    delta: np.ndarray
    test_predictions: np.ndarray   # in-dynamics predictions on test patterns
    train_predictions: np.ndarray


def _draw(rng, shape, init):
    if init == "laplace":
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), shape)
    return rng.standard_normal(shape)


def initial_fields(X_patches, k: int, patch_count: int, config: DmftConfig):
    """h(0) = X w / sqrt(k) with i.i.d. unit-variance w (covariance Phi0 exactly), z(0)."""
    rng = np.random.default_rng(config.seed)
    h = X_patches @ _draw(rng, (k, config.S), config.init) / np.sqrt(k)
    z = _draw(rng, (patch_count, config.S), config.init)
    return h, z


def _run(X_patches, k, y, n_train, A, hp: Hyperparams, config: DmftConfig) -> DmftResult:
    """Generic engine.  X_patches: (P_total*A) x k pattern-major patch matrix with
    input kernel X X^T / k."""
    act = hp.activation
    if act is Activation.TANH:
        raise ValueError("aNTK needs a homogeneous activation (linear or relu)")
    g0 = hp.gamma0
    if not g0 > 0:
        raise ValueError("field dynamics need gamma0 > 0")
    lam0, lam1 = hp.lambdas[0], hp.lambdas[1]
    M = X_patches.shape[0]
    S = config.S
    n_rows = n_train * A
    Xtr = X_patches[:n_rows]
    # Phi0[:, train] @ V computed through the k-dimensional factor when cheaper
    use_factor = k < n_rows
    phi0 = X_patches @ X_patches.T / k
    phi0_cols = None if use_factor else phi0[:, :n_rows].copy()

    h, z = initial_fields(X_patches, k, A, config)
    P_total = M // A
    traj = DmftTrajectory(config.eta)
    prev_delta = None

    def outputs(h, z):
        f = act.phi(h).reshape(P_total, A, S)
        return np.einsum("pas,as->p", f, z) / (g0 * S)

    for t in range(config.T + 1):
        s = outputs(h, z)
        delta = y - s[:n_train]
        if not np.all(np.isfinite(delta)):
            raise DmftDivergence(f"error signal is not finite at step {t}")
        if t % config.record_every == 0 or t == config.T:
            ens = FieldEnsemble(h, z, act, A)
            traj.steps.append(t)
            traj.losses.append(0.5 * float(delta @ delta))
            traj.deltas.append(delta.copy())
            traj.phi1.append(KernelMatrix(ens.feature_kernel(), KernelKind.FEATURE))
            traj.g1.append(KernelMatrix(ens.gradient_kernel(), KernelKind.GRADIENT))
        if config.stop_tol is not None and prev_delta is not None \
                and np.max(np.abs(delta - prev_delta)) < config.stop_tol:
            traj.converged_step = t
            if traj.steps[-1] != t:
                ens = FieldEnsemble(h, z, act, A)
                traj.steps.append(t)
                traj.losses.append(0.5 * float(delta @ delta))
                traj.deltas.append(delta.copy())
                traj.phi1.append(KernelMatrix(ens.feature_kernel(), KernelKind.FEATURE))
                traj.g1.append(KernelMatrix(ens.gradient_kernel(), KernelKind.GRADIENT))
            break
        if t == config.T:
            break
        prev_delta = delta
        f = act.phi(h)
        zz = np.tile(z, (P_total, 1))
        gd = act.dphi(h[:n_rows]) * zz[:n_rows] * np.repeat(delta, A)[:, None]
        drive = X_patches @ (Xtr.T @ gd) / k if use_factor else phi0_cols @ gd
        dz = np.einsum("pas,p->as", f[:n_rows].reshape(n_train, A, S), delta)
        h = h + config.eta * (g0 * drive - lam0 * h)
        z = z + config.eta * (g0 * dz - lam1 * z)
    ens = FieldEnsemble(h, z, act, A)
    s = outputs(h, z)
    return DmftResult(traj, ens, phi0, n_train, y - s[:n_train], s[n_train:], s[:n_train])


def solve_dmft_two_layer(dataset: Dataset, test_inputs, hp: Hyperparams,
                         config: DmftConfig = DmftConfig()) -> DmftResult:
    if hp.depth != 1:
        raise ValueError("field dynamics are implemented for one hidden layer")
    X = dataset.inputs
    if test_inputs is not None and np.size(test_inputs):
        T = np.atleast_2d(np.asarray(test_inputs, float))
        if T.shape[1] != X.shape[1]:
            raise ValueError(f"test inputs have D={T.shape[1]}, training inputs D={X.shape[1]}")
        X = np.vstack([X, T])
    return _run(X, X.shape[1], dataset.targets, dataset.P, 1, hp, config)


def solve_dmft_cnn_two_layer(dataset: Dataset, test_inputs, hp: Hyperparams,
                             config: DmftConfig = DmftConfig()) -> DmftResult:
    """Patch CNN: one filter bank on non-overlapping patches, readout per position."""
    pl = dataset.patch_layout
    if pl is None:
        raise ValueError("dataset has no patch layout")
    if hp.depth != 1:
        raise ValueError("field dynamics are implemented for one hidden layer")
    X = dataset.inputs
    if test_inputs is not None and np.size(test_inputs):
        T = np.atleast_2d(np.asarray(test_inputs, float))
        if T.shape[1] != pl.patch_count * pl.patch_dim:
            raise ValueError("unsupported patch layout: test inputs do not tile into the training patches")
        X = np.vstack([X, T])
    patches = X.reshape(len(X) * pl.patch_count, pl.patch_dim)
    return _run(patches, pl.patch_dim, dataset.targets, dataset.P, pl.patch_count, hp, config)


# ---------------------------------------------------------------- kernels and predictors

def assemble_antk(phi0, phi1, g1, patch_count: int = 1) -> KernelMatrix:
    """K = G1 * Phi0 + Phi1; with patches, K_{mu nu} = sum_ab Phi0 G1 + sum_a Phi1_{mu a, nu a}."""
    phi0, phi1, g1 = as_array(phi0), as_array(phi1), as_array(g1)
    if not phi0.shape == phi1.shape == g1.shape:
        raise ValueError("kernel shapes differ")
    if patch_count == 1:
        return KernelMatrix(g1 * phi0 + phi1, KernelKind.TANGENT)
    A = patch_count
    P = phi0.shape[0] // A
    t = (g1 * phi0).reshape(P, A, P, A).sum(axis=(1, 3))
    r = np.einsum("iaja->ij", phi1.reshape(P, A, P, A))
    return KernelMatrix(t + r, KernelKind.TANGENT)


def final_kernel(result: DmftResult) -> KernelMatrix:
    """aNTK over train + test patterns from the final field ensemble."""
    ens = result.fields
    return assemble_antk(result.phi0, ens.feature_kernel(), ens.gradient_kernel(), ens.patch_count)


def predict_antk(K_full, y, hp: Hyperparams, y_test=None) -> PredictorResult:
    """Kernel ridge predictor with ridge lambda_L kappa; train block first."""
    K = as_array(K_full)
    P = len(y)
    return kernel_ridge_predict(K[:P, :P], K[P:, :P], y, hp.lam_out * hp.kappa, y_test,
                                kind=KernelKind.TANGENT)


def fixed_point_relu_single(gamma0: float, lam: float):
    """Error signal and <h^2> at the fixed point for one whitened point with y = 1."""
    if gamma0 <= 0 or lam <= 0:
        raise ValueError("gamma0 and lambda must be positive")
    if gamma0 > lam:
        return lam / gamma0, gamma0 - lam
    return 1.0, 0.0


def write_trajectory_csv(path, traj: DmftTrajectory):
    with open(path, "w") as fh:
        fh.write("step,loss,delta_norm,phi1_trace,g1_trace\n")
        for t, l, d, F, G in zip(traj.steps, traj.losses, traj.deltas, traj.phi1, traj.g1):
            fh.write(f"{t:d},{l:.17g},{np.linalg.norm(d):.17g},"
                     f"{np.trace(F.entries):.17g},{np.trace(G.entries):.17g}\n")
