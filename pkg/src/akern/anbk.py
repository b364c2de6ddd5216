"""Adaptive Bayesian kernel (aNBK): the min-max saddle of the Bayesian action.

Conventions
-----------
``stack.phi[0]`` is the data Gram x.x/D.  The layer-l single-site prior is
N(0, Phi^{l-1}/lambda_{l-1}) and the layer-l tilt is exp(-1/2 phi^T Phi_hat^l phi).
The action is

    S = -1/2 sum_l Tr(Phi^l Phi_hat^l) + gamma0^2/2 y^T (I/beta + Phi^L/lambda_L)^{-1} y
        - sum_{l=1}^{L} ln Z_l[Phi^{l-1}, Phi_hat^l].

Its gradients are dS/dPhi^l = -r_phi^l / 2 and dS/dPhi_hat^l = -r_phi_hat^l / 2
with the residuals returned by :func:`saddle_residuals`.  The solver maximizes
over the duals (inner loop) and minimizes over the feature kernels (outer loop).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special
from scipy.special import logsumexp
from scipy.stats import gaussian_kde

from .core import (Activation, Dataset, Hyperparams, KernelKind, KernelStack,
                   PredictorResult, as_array, cross_gram, data_gram,
                   jittered_cholesky, kernel_ridge_predict, psd_project, psd_solve,
                   symmetrize)
from .lazy import gaussian_moments, nngp_kernel, relu_moments
from .sampling import (DegenerateTiltWarning, ESS_FLOOR, SamplerConfig, SiteBatch,
                       cholesky_psd, site_estimate)


class SolverDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class AnbkSolverConfig:
    """Min-max solver settings.

    With ``precondition`` the ascent and descent directions are the residuals
    mapped through the Gaussian metric of each layer (Phi^-1 r Phi^-1 for the
    duals, Phi r Phi for the kernels); step sizes are then O(1).  With
    ``resample`` a fresh batch is drawn every outer iteration; otherwise the
    same standard-normal draws are reused (common random numbers) so that the
    solve is a deterministic problem whose residuals can reach residual_tol.
    """
    inner_steps: int = 200
    max_outer_steps: int = 2000
    step_phi: float = 0.5
    step_phi_hat: float = 0.5
    residual_tol: float = 1e-3
    warm_start: KernelStack | None = None
    sampler: SamplerConfig = SamplerConfig()
    precondition: bool = True
    resample: bool = False
    max_relative_change: float = 0.25

    def __post_init__(self):
        if min(self.inner_steps, self.max_outer_steps) <= 0:
            raise ValueError("step counts must be positive")
        if min(self.step_phi, self.step_phi_hat, self.residual_tol, self.max_relative_change) <= 0:
            raise ValueError("step sizes and tolerance must be positive")


# ---------------------------------------------------------------- batches

def _noise(sampler: SamplerConfig, layer: int, P: int, iteration: int | None = None):
    """Antithetic standard-normal draws (B x P), whitened so that their sample
    second moment is exactly the identity.  Batches built from them reproduce
    the prior covariance exactly, so the gamma0 = 0 point of the sampled saddle
    equations is the lazy stack."""
    key = (layer,) if iteration is None else (layer, iteration)
    B = sampler.batch_size
    z = sampler.rng(*key).standard_normal(((B + 1) // 2, P))
    xi = np.concatenate([z, -z])[:B]
    if B < 2 * P:
        return xi
    Ls = linalg.cholesky(xi.T @ xi / B, lower=True)
    return linalg.solve_triangular(Ls, xi.T, lower=True).T


def draw_batches(stack_phis, hp: Hyperparams, sampler: SamplerConfig, iteration=None):
    """One Gaussian batch per layer l = 1..L with covariance Phi^{l-1}/lambda_{l-1}.

    Layer l always uses the stream keyed by l (and by ``iteration`` when given),
    so batches are common random numbers across calls.
    """
    batches = []
    for l in range(1, hp.depth + 1):
        cov = symmetrize(as_array(stack_phis[l - 1])) / hp.lambdas[l - 1]
        Lc = cholesky_psd(cov, sampler.jitter)
        xi = _noise(sampler, l, cov.shape[0], iteration)
        batches.append(SiteBatch(xi @ Lc.T, cov))
    return batches


def _estimates(stack: KernelStack, hp, batches, jitter):
    act = hp.activation
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateTiltWarning)
        for l in range(1, hp.depth + 1):
            cov = stack.phi[l - 1] / hp.lambdas[l - 1]
            out.append(site_estimate(batches[l - 1], stack.phi_hat[l - 1], act, cov=cov,
                                     jitter=jitter))
    return out


def _readout_vector(phiL, y, hp: Hyperparams):
    """A^{-1} y with A = I/beta + Phi^L/lambda_L."""
    A = phiL / hp.lam_out + hp.inv_beta * np.eye(len(y))
    return psd_solve(A, y)


# ---------------------------------------------------------------- action and gradients

def action(stack: KernelStack, y, hp: Hyperparams, sampler: SamplerConfig = SamplerConfig(),
           batches=None, include_top_site: bool = True) -> float:
    """Monte Carlo value of the action.

    ``batches`` (from :func:`draw_batches`) may be shared between calls; when
    the stack's prior covariances differ from those the batches were drawn at,
    the batches are reweighted by the Gaussian likelihood ratio.

    ``include_top_site=False`` drops the layer-L single-site term, leaving only
    layers 1..L-1; the saddle residuals are gradients of the full action.
    """
    y = np.asarray(y, float)
    L = stack.depth
    S = -0.5 * sum(np.sum(P * Q) for P, Q in zip(stack.phi[1:], stack.phi_hat))
    if hp.gamma0 != 0.0:
        S += 0.5 * hp.gamma0 ** 2 * float(y @ _readout_vector(stack.phi[L], y, hp))
    layers = range(1, L + 1) if include_top_site else range(1, L)
    if len(layers) == 0:
        return float(S)
    if batches is None:
        batches = draw_batches(stack.phi, hp, sampler)
    ests = _estimates(stack, hp, batches, sampler.jitter)
    S -= sum(ests[l - 1].log_z for l in layers)
    return float(S)


@dataclass(frozen=True, eq=False)
class SaddleResiduals:
    r_phi: list
    r_phi_hat: list
    estimates: list = field(default_factory=list)

    def max_relative(self, stack: KernelStack) -> float:
        return _relative_residual(stack, self)


def saddle_residuals(stack: KernelStack, y, hp: Hyperparams,
                     sampler: SamplerConfig = SamplerConfig(), batches=None) -> SaddleResiduals:
    """Defects of the saddle equations (lists indexed by layer - 1)."""
    y = np.asarray(y, float)
    if batches is None:
        batches = draw_batches(stack.phi, hp, sampler)
    ests = _estimates(stack, hp, batches, sampler.jitter)
    L = stack.depth
    r_hat = [stack.phi[l] - ests[l - 1].tilted_feature_moment.entries for l in range(1, L + 1)]
    r_phi = []
    for l in range(1, L):
        inv = psd_solve(stack.phi[l], np.eye(stack.P))
        H = ests[l].tilted_field_moment.entries
        r_phi.append(symmetrize(stack.phi_hat[l - 1] - (inv - hp.lambdas[l] * inv @ H @ inv)))
    u = _readout_vector(stack.phi[L], y, hp)
    r_phi.append(symmetrize(stack.phi_hat[L - 1] + hp.gamma0 ** 2 / hp.lam_out * np.outer(u, u)))
    return SaddleResiduals(r_phi, [symmetrize(r) for r in r_hat], ests)


def _metric_residuals(phis, duals, ests, y, hp):
    """Phi r_phi Phi for every layer, computed without inverting Phi."""
    L = hp.depth
    out = []
    for l in range(1, L):
        F = phis[l]
        H = ests[l].tilted_field_moment.entries
        out.append(symmetrize(F @ duals[l - 1] @ F - F + hp.lambdas[l] * H))
    F = phis[L]
    v = F @ _readout_vector(F, y, hp)
    out.append(symmetrize(F @ duals[L - 1] @ F + hp.gamma0 ** 2 / hp.lam_out * np.outer(v, v)))
    return out


def _scale(K):
    return max(abs(np.trace(K)) / K.shape[0], np.finfo(float).tiny)


def _relative_residual(stack, res: SaddleResiduals) -> float:
    worst = 0.0
    for l in range(1, stack.depth + 1):
        F = stack.phi[l]
        t = _scale(F)
        worst = max(worst, np.max(np.abs(res.r_phi_hat[l - 1])) / t,
                    np.max(np.abs(F @ res.r_phi[l - 1] @ F)) / t)
    return float(worst)


# ---------------------------------------------------------------- solver

@dataclass
class _Site:
    h: np.ndarray
    phi: np.ndarray

    def tilt(self, Q):
        log_w = -0.5 * np.einsum("bi,bi->b", self.phi @ Q, self.phi)
        lse = logsumexp(log_w)
        w = np.exp(log_w - lse)
        w /= w.sum()
        return lse - np.log(len(w)), w

    def feature_moment(self, w):
        return symmetrize(self.phi.T @ (w[:, None] * self.phi))


def _inner_maximize(site: _Site, target, Q, steps, step, tol, precondition, jitter,
                    step_max=1.0):
    """Ascent on G(Q) = -1/2 Tr(target Q) - ln Z(Q) for one layer, halving the
    step whenever G fails to increase.

    The preconditioned direction target^-1 - M(Q)^-1 (M the tilted feature
    moment) lands on the optimum in one unit step when the features are
    Gaussian; its inner product with the gradient is nonnegative.
    """
    t = _scale(target)
    sched = (0.0, jitter, jitter * 1e2, jitter * 1e4)
    if precondition:
        Lc, _ = jittered_cholesky(target, sched)
        inv = linalg.cho_solve((Lc, True), np.eye(target.shape[0]))
    log_z, w = site.tilt(Q)
    val = -0.5 * np.sum(target * Q) - log_z
    M = site.feature_moment(w)
    for _ in range(steps):
        r = target - M
        if np.max(np.abs(r)) / t < tol:
            break
        if precondition:
            Lm, _ = jittered_cholesky(M, sched)
            d = inv - linalg.cho_solve((Lm, True), np.eye(len(M)))
        else:
            d = -r
        for _ in range(40):
            Q_new = symmetrize(Q + step * d)
            lz_new, w_new = site.tilt(Q_new)
            val_new = -0.5 * np.sum(target * Q_new) - lz_new
            if np.isfinite(val_new) and val_new >= val - 1e-14 * max(1.0, abs(val)):
                break
            step *= 0.5
        else:
            break
        Q, val, w = Q_new, val_new, w_new
        M = site.feature_moment(w)
        step = min(step_max, 2.0 * step)
    return Q, step


def _trust_step(F, U, step, tau, jitter):
    """step*U shrunk so that the spectral norm of F^{-1/2} (step U) F^{-1/2}
    is at most tau (a multiplicative trust region that keeps F positive)."""
    Lc, _ = jittered_cholesky(F, (0.0, jitter, jitter * 1e2, jitter * 1e4))
    W = linalg.solve_triangular(Lc, linalg.solve_triangular(Lc, U, lower=True).T, lower=True)
    s = np.max(np.abs(np.linalg.eigvalsh(symmetrize(W))))
    return step * U if step * s <= tau else (tau / s) * U


def lazy_stack(dataset_or_gram, hp: Hyperparams, sampler: SamplerConfig = SamplerConfig()) -> KernelStack:
    """Lazy (gamma0 = 0) stack: NNGP kernels under the solver's priors and zero duals."""
    phi0 = as_array(data_gram(dataset_or_gram)) if isinstance(dataset_or_gram, Dataset) \
        else symmetrize(as_array(dataset_or_gram))
    phis = nngp_kernel(phi0, hp.depth, hp.activation, lambdas=hp.lambdas,
                       batch=sampler.batch_size, seed=sampler.seed)
    zeros = tuple(np.zeros_like(phi0) for _ in range(hp.depth))
    return KernelStack(tuple(K.entries for K in phis), zeros)


def perturb_warm_start(stack: KernelStack, seed, scale: float = 0.1) -> KernelStack:
    """Multiply every entry of the feature kernels (layers >= 1) by exp(scale g),
    g standard normal, then symmetrize; duals are reset to zero."""
    rng = np.random.default_rng(seed)
    phis = [stack.phi[0]]
    for K in stack.phi[1:]:
        phis.append(psd_project(K * np.exp(scale * rng.standard_normal(K.shape))))
    return KernelStack(tuple(phis), tuple(np.zeros_like(K) for K in stack.phi_hat))


def solve_anbk(dataset: Dataset, hp: Hyperparams,
               config: AnbkSolverConfig = AnbkSolverConfig()) -> KernelStack:
    """Alternating min-max solve of the saddle equations.

    Each outer iteration draws (or reuses) one batch per layer, runs up to
    ``inner_steps`` ascent steps on every dual kernel, checks the relative
    residuals, then takes one descent step on every feature kernel followed by
    a PSD projection.  Diagnostics are stored in ``stack.info``.
    """
    y = np.asarray(dataset.targets, float)
    phi0 = as_array(data_gram(dataset))
    L, P = hp.depth, dataset.P
    sampler = config.sampler
    lazy = lazy_stack(phi0, hp, sampler)
    if hp.gamma0 == 0.0 and config.warm_start is None:
        res = saddle_residuals(lazy, y, hp, sampler)
        info = {"converged": True, "outer_iterations": 0,
                "max_residual": float(np.max([np.max(np.abs(r)) / _scale(F) for r, F in
                                              zip(res.r_phi_hat, lazy.phi[1:])])),
                "trace": [], "ess_min": float(min(e.effective_sample_size for e in res.estimates))}
        return KernelStack(lazy.phi, lazy.phi_hat, info=info)
    start = config.warm_start or lazy
    phis = [phi0] + [psd_project(K) for K in start.phi[1:]]
    duals = [K.copy() for K in start.phi_hat]
    init_norm = max(np.linalg.norm(phis[-1]), np.finfo(float).tiny)
    step_phi, step_hat = config.step_phi, config.step_phi_hat
    hat_max = max(1.0, step_hat) if config.precondition else step_hat
    inner_tol = 0.05 * config.residual_tol
    act = hp.activation
    trace = []
    converged = False
    noise = None if config.resample else [_noise(sampler, l, P) for l in range(1, L + 1)]
    rel = np.inf
    it = 0
    for it in range(1, config.max_outer_steps + 1):
        sites, batches = [], []
        for l in range(1, L + 1):
            cov = phis[l - 1] / hp.lambdas[l - 1]
            Lc = cholesky_psd(cov, sampler.jitter)
            xi = noise[l - 1] if noise is not None else _noise(sampler, l, P, it)
            h = xi @ Lc.T
            sites.append(_Site(h, act.phi(h)))
            batches.append(SiteBatch(h, cov))
        steps_used = []
        for l in range(1, L + 1):
            duals[l - 1], s = _inner_maximize(sites[l - 1], phis[l], duals[l - 1],
                                              config.inner_steps, step_hat, inner_tol,
                                              config.precondition, sampler.jitter,
                                              hat_max)
            steps_used.append(s)
        step_hat = min(hat_max, 2.0 * min(steps_used))
        stack = KernelStack(tuple(phis), tuple(duals))
        ests = _estimates(stack, hp, batches, sampler.jitter)
        r_hat = [phis[l] - ests[l - 1].tilted_feature_moment.entries for l in range(1, L + 1)]
        r_met = _metric_residuals(phis, duals, ests, y, hp)
        rel = max(max(np.max(np.abs(a)) / _scale(F), np.max(np.abs(b)) / _scale(F))
                  for a, b, F in zip(r_hat, r_met, phis[1:]))
        S = -0.5 * sum(np.sum(F * Q) for F, Q in zip(phis[1:], duals))
        S += 0.5 * hp.gamma0 ** 2 * float(y @ _readout_vector(phis[L], y, hp))
        S -= sum(e.log_z for e in ests)
        ess_min = min(e.effective_sample_size for e in ests)
        trace.append((it, float(rel), float(S), float(ess_min)))
        if not np.isfinite(S):
            raise SolverDivergence(f"action is not finite at outer iteration {it}")
        if rel < config.residual_tol:
            converged = True
            break
        # a growing residual means the descent step overshoots the saddle
        if ess_min < ESS_FLOOR or (len(trace) > 1 and rel > 1.05 * trace[-2][1]):
            step_phi *= 0.5
        else:
            step_phi = min(config.step_phi, 1.1 * step_phi)
        for l in range(1, L + 1):
            if config.precondition:
                upd = r_met[l - 1]
            else:
                inv = psd_solve(phis[l], np.eye(P))
                upd = inv @ r_met[l - 1] @ inv
            phis[l] = psd_project(phis[l] + _trust_step(phis[l], upd, step_phi,
                                                        config.max_relative_change,
                                                        sampler.jitter))
        if np.linalg.norm(phis[-1]) > 1e6 * init_norm or not np.all(np.isfinite(phis[-1])):
            raise SolverDivergence(f"feature kernel norm blew up at outer iteration {it}")
    info = {"converged": converged, "outer_iterations": it, "max_residual": float(rel),
            "trace": trace, "ess_min": trace[-1][3] if trace else float("nan"),
            "step_phi": step_phi}
    return KernelStack(tuple(phis), tuple(duals), info=info)


def write_residual_trace(path, stack: KernelStack):
    rows = stack.info.get("trace", [])
    with open(path, "w") as fh:
        fh.write("iteration,max_residual,action,ess_min\n")
        for it, r, S, e in rows:
            fh.write(f"{it:d},{r:.17g},{S:.17g},{e:.17g}\n")


# ---------------------------------------------------------------- prediction

def test_kernel_extension(stack: KernelStack, dataset: Dataset, test_inputs, hp: Hyperparams,
                          sampler: SamplerConfig = SamplerConfig()):
    """Train-test and test-test (diagonal) last-layer kernels.

    For each test point the joint prior over (train, test) fields is Gaussian
    with the previous layer's kernels; the tilt acts on the train block only.
    The train block reuses the solver's batches (same sampler).  Given the train
    fields the test field is Gaussian, so for linear and ReLU activations its
    first two conditional feature moments are integrated in closed form
    (Rao-Blackwellization); for tanh the test field is drawn from the
    conditional.  Returns (k_test, k_diag).
    """
    X_test = np.atleast_2d(np.asarray(test_inputs, float))
    k = cross_gram(X_test, dataset.inputs)
    d = np.einsum("ij,ij->i", X_test, X_test) / X_test.shape[1]
    act = hp.activation
    batches = draw_batches(stack.phi, hp, sampler)
    for l in range(1, stack.depth + 1):
        lam = hp.lambdas[l - 1]
        batch = batches[l - 1]
        C = batch.cov
        Lc = cholesky_psd(C, sampler.jitter)
        Cj = Lc @ Lc.T
        kk, dd = k / lam, d / lam
        coef = psd_solve(Cj, kk.T)                       # P x T
        mean = batch.fields @ coef                       # B x T
        var = np.clip(dd - np.einsum("tp,pt->t", kk, coef), 0.0, None)
        m1, m2 = _conditional_feature_moments(mean, var, act, sampler.rng(l, 1 << 20))
        est = site_estimate(batch, stack.phi_hat[l - 1], act, jitter=sampler.jitter)
        w = est.weights
        k = (m1 * w[:, None]).T @ act.phi(batch.fields)
        d = w @ m2
    return k, d


def _conditional_feature_moments(mean, var, act: Activation, rng):
    """E[phi(h)] and E[phi(h)^2] for h ~ N(mean, var), entrywise (var per column)."""
    if act is Activation.LINEAR:
        return mean, mean ** 2 + var
    if act is Activation.RELU:
        s = np.sqrt(var)
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(s > 0, mean / np.where(s > 0, s, 1.0), np.where(mean >= 0, np.inf, -np.inf))
        cdf, pdf = special.ndtr(u), np.exp(-0.5 * np.minimum(u ** 2, 1e300)) / np.sqrt(2 * np.pi)
        m1 = mean * cdf + s * pdf
        m2 = (mean ** 2 + var) * cdf + mean * s * pdf
        return m1, m2
    f = act.phi(mean + np.sqrt(var) * rng.standard_normal(mean.shape))
    return f, f ** 2


test_kernel_extension.__test__ = False


def predict_anbk(stack: KernelStack, k_test, y, hp: Hyperparams, y_test=None) -> PredictorResult:
    ridge = hp.lam_out * hp.inv_beta
    return kernel_ridge_predict(stack.feature(stack.depth), k_test, y, ridge, y_test)


# ---------------------------------------------------------------- small-gamma0 expansion

def sample_lazy_stack(dataset_or_gram, hp: Hyperparams,
                      sampler: SamplerConfig = SamplerConfig()) -> KernelStack:
    """Lazy stack evaluated on the solver's common random numbers: layer l is the
    batch average of phi phi^T with fields xi chol(Phi^{l-1}/lambda)^T.  This is
    the gamma0 = 0 solution of the sampled problem that solve_anbk solves."""
    phi0 = as_array(data_gram(dataset_or_gram)) if isinstance(dataset_or_gram, Dataset) \
        else symmetrize(as_array(dataset_or_gram))
    phis = [phi0]
    for l in range(1, hp.depth + 1):
        h = _crn_fields(phis[-1] / hp.lambdas[l - 1], sampler, l)
        f = hp.activation.phi(h)
        phis.append(symmetrize(f.T @ f / len(f)))
    return KernelStack(tuple(phis), tuple(np.zeros_like(phi0) for _ in range(hp.depth)))


def _crn_fields(cov, sampler, layer):
    return _noise(sampler, layer, cov.shape[0]) @ cholesky_psd(cov, sampler.jitter).T


def _relu_delta_term(cov, Q):
    """diag_m of E[delta(h_m) (Q relu(h))_m] under N(0, cov); the Dirac part of relu''."""
    var = np.clip(np.diag(cov), 0.0, None)
    out = np.zeros(len(var))
    for m in np.flatnonzero(var > 0):
        dens0 = 1.0 / np.sqrt(2 * np.pi * var[m])
        cond_sd = np.sqrt(np.clip(var - cov[m] ** 2 / var[m], 0.0, None))
        e_relu = cond_sd / np.sqrt(2 * np.pi)     # E[relu(h_b) | h_m = 0]
        e_relu[m] = 0.0
        out[m] = dens0 * np.dot(Q[m], e_relu)
    return out


def _hessian_average(cov, Q, act: Activation, h=None):
    """E[Hess_h (phi^T Q phi)] / 2 under h ~ N(0, cov), from samples ``h`` when given."""
    if act is Activation.LINEAR:
        return symmetrize(Q.copy())
    if h is None and act is Activation.RELU:
        _, dd = relu_moments(cov)
        return symmetrize(dd * Q + np.diag(_relu_delta_term(cov, Q)))
    d1, d2, f = act.dphi(h), act.d2phi(h), act.phi(h)
    out = (d1.T @ d1) / len(h) * Q + np.diag(np.mean(d2 * (f @ Q), axis=0))
    if act is Activation.RELU:
        out += np.diag(_relu_delta_term(cov, Q))
    return symmetrize(out)


def _tilt_first_order(cov, Q, act: Activation, h=None):
    """-1/2 Cov(phi phi^T, phi^T Q phi) under h ~ N(0, cov)."""
    if h is None and act is Activation.LINEAR:
        return symmetrize(-cov @ Q @ cov)        # Isserlis: Cov(hh^T, h^T Q h) = 2 C Q C
    f = act.phi(h)
    q = np.einsum("bi,ij,bj->b", f, Q, f)
    q = q - q.mean()
    return symmetrize(-0.5 * (f * q[:, None]).T @ f / len(f))


def _lazy_map_jvp(cov, dcov, act: Activation, sampler, layer, on_batches):
    """Directional derivative of C -> E[phi phi^T] under N(0, C) along dcov."""
    if act is Activation.LINEAR:
        return symmetrize(dcov)
    eps = 1e-4 * max(np.max(np.abs(cov)), 1e-12) / max(np.max(np.abs(dcov)), 1e-300)
    def moment(C):
        if on_batches:
            f = act.phi(_crn_fields(C, sampler, layer))
            return f.T @ f / len(f)
        if act is Activation.RELU:
            return relu_moments(C)[0]
        return gaussian_moments(C, act, sampler.batch_size,
                                np.random.SeedSequence([sampler.seed, layer, 1 << 23]))[0]
    return symmetrize((moment(cov + eps * dcov) - moment(cov - eps * dcov)) / (2 * eps))


def perturbative_correction(phi0_stack: KernelStack, y, hp: Hyperparams,
                            sampler: SamplerConfig = SamplerConfig(),
                            on_batches: bool = False) -> KernelStack:
    """First order in gamma0^2 around a lazy stack.

    Duals: Phi_hat^L = -(gamma0^2/lambda_L) A^{-1} y y^T A^{-1} at the lazy Phi^L,
    then Phi_hat^l = E[Hess(phi^T Phi_hat^{l+1} phi)]/(2 lambda_l) under the lazy
    prior of layer l+1.  Kernels: the connected first-order tilt correction
    -1/2 Cov(phi phi^T, phi^T Phi_hat^l phi) plus the lazy map's response to the
    corrected kernel of the layer below.

    By default Gaussian averages are exact where closed forms exist (linear,
    ReLU) and Monte Carlo otherwise.  With ``on_batches`` every average is taken
    on the solver's common random numbers; pair it with :func:`sample_lazy_stack`
    to get the expansion of exactly the sampled problem solve_anbk solves.
    """
    y = np.asarray(y, float)
    L = phi0_stack.depth
    act = hp.activation
    lazy = list(phi0_stack.phi)
    if hp.gamma0 == 0.0:
        return KernelStack(tuple(lazy), tuple(np.zeros_like(K) for K in lazy[1:]))

    def fields(cov, layer):
        if on_batches:
            return _crn_fields(cov, sampler, layer)
        if act is Activation.LINEAR or (act is Activation.RELU and layer is None):
            return None
        return _noise(sampler, layer, cov.shape[0], 1 << 21) @ cholesky_psd(cov, sampler.jitter).T

    duals = [None] * L
    u = _readout_vector(lazy[L], y, hp)
    duals[L - 1] = -(hp.gamma0 ** 2 / hp.lam_out) * np.outer(u, u)
    for l in range(L - 1, 0, -1):
        cov = lazy[l] / hp.lambdas[l]
        if on_batches:
            # likelihood-ratio form of the same average, as in the sampled residuals
            h = _crn_fields(cov, sampler, l + 1)
            f = act.phi(h)
            q = np.einsum("bi,ij,bj->b", f, duals[l], f)
            Ci = psd_solve(cov, np.eye(len(cov)))
            Cq = (h * (q - q.mean())[:, None]).T @ h / len(h)
            duals[l - 1] = symmetrize(Ci @ Cq @ Ci) / (2 * hp.lambdas[l])
        else:
            h = fields(cov, l + 1) if act is Activation.TANH else None
            duals[l - 1] = _hessian_average(cov, duals[l], act, h) / hp.lambdas[l]
    phis = [lazy[0]]
    for l in range(1, L + 1):
        cov0 = lazy[l - 1] / hp.lambdas[l - 1]
        drift = 0.0
        if l > 1:
            dprev = (phis[l - 1] - lazy[l - 1]) / hp.lambdas[l - 1]
            drift = _lazy_map_jvp(cov0, dprev, act, sampler, l, on_batches)
        h = fields(cov0, l) if (on_batches or act is not Activation.LINEAR) else None
        phis.append(symmetrize(lazy[l] + drift + _tilt_first_order(cov0, duals[l - 1], act, h)))
    return KernelStack(tuple(phis), tuple(duals))


# ---------------------------------------------------------------- densities

def preactivation_density(stack: KernelStack, layer: int, pattern: int, grid, hp: Hyperparams,
                          sampler: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """Weighted Gaussian KDE (Silverman bandwidth) of h_pattern under the tilted
    layer-``layer`` single-site density."""
    batches = draw_batches(stack.phi, hp, sampler)
    batch = batches[layer - 1]
    est = site_estimate(batch, stack.phi_hat[layer - 1], hp.activation, jitter=sampler.jitter)
    x = batch.fields[:, pattern]
    kde = gaussian_kde(x, bw_method="silverman", weights=est.weights)
    return kde(np.asarray(grid, float))


def write_density_csv(path, grid, density):
    np.savetxt(path, np.column_stack([grid, density]), fmt="%.17g", delimiter=",",
               header="h,density", comments="")
