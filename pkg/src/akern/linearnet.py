"""Exact infinite-width solutions for deep linear Bayesian networks.

For linear activations the single-site density stays Gaussian and the saddle
equations become matrix recursions.  On whitened inputs (Gram = I) with unit
norm labels, everything reduces to scalar overlaps c_l = y^T Phi^l y.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .core import Hyperparams, KernelStack, as_array, symmetrize, psd_solve


@dataclass(frozen=True, eq=False)
class OverlapProfile:
    c: np.ndarray       # c_l, l = 1..L
    c_hat: np.ndarray   # dual overlaps
    chi: float          # conserved product c_l * c_hat_l
    bracket: tuple = ()

    def to_csv(self, path):
        rows = np.column_stack([np.arange(1, len(self.c) + 1), self.c + 0.0, self.c_hat + 0.0])
        np.savetxt(path, rows, fmt=["%d", "%.17g", "%.17g"], delimiter=",",
                   header="layer,c,c_hat", comments="")


def _chi(c, gamma0, inv_beta):
    return -gamma0 ** 2 * c / (inv_beta + c) ** 2


def solve_whitened_overlaps(gamma0: float, beta: float = np.inf, L: int = 1,
                            tol: float = 1e-15) -> OverlapProfile:
    """Solve c_L = (1 - chi(c_L))^L with chi(c) = -gamma0^2 c / (1/beta + c)^2.

    The root is bracketed in [1, max(2, 10 (1 + L gamma0^2))] (widened
    geometrically if needed), located by Brent's method on the log form and
    polished with Newton steps.
    """
    if gamma0 < 0 or L < 1:
        raise ValueError("need gamma0 >= 0 and L >= 1")
    ib = 0.0 if np.isinf(beta) else 1.0 / beta

    def g(c):
        return L * np.log1p(-_chi(c, gamma0, ib)) - np.log(c)

    def dg(c):
        chi = _chi(c, gamma0, ib)
        dchi = -gamma0 ** 2 * (ib - c) / (ib + c) ** 3
        return -L * dchi / (1 - chi) - 1.0 / c

    lo, hi = 1.0, max(2.0, 10.0 * (1.0 + L * gamma0 ** 2))
    if g(lo) == 0.0:
        cL = lo
    else:
        while g(hi) > 0:
            hi *= 10.0
            if hi > 1e12:
                raise RuntimeError(f"no root of the overlap equation below 1e12 "
                                   f"(gamma0={gamma0}, L={L})")
        cL = brentq(g, lo, hi, xtol=tol * lo, rtol=4 * np.finfo(float).eps, maxiter=500)
        for _ in range(3):
            d = dg(cL)
            if d == 0:
                break
            step = g(cL) / d
            if not np.isfinite(step) or abs(step) > 1e-6 * cL:
                break
            cL -= step
    chi = _chi(cL, gamma0, ib)
    layers = np.arange(1, L + 1)
    c = np.exp(layers * np.log1p(-chi))
    return OverlapProfile(c=c, c_hat=chi / c, chi=float(chi), bracket=(lo, hi))


class Regime(str, enum.Enum):
    LAZY = "lazy"
    LARGE_GAMMA = "large_gamma"
    LARGE_DEPTH = "large_depth"


def asymptotic_overlap(gamma0: float, L: int, regime) -> float:
    regime = Regime(regime)
    g2L = L * gamma0 ** 2
    if regime is Regime.LAZY:
        return 1.0 + g2L
    if regime is Regime.LARGE_GAMMA:
        return gamma0 ** (2.0 * L / (L + 1.0))
    if g2L <= 1:
        raise ValueError("large-depth asymptote needs L gamma0^2 > 1")
    return g2L / np.log(g2L)


def _last_dual(phiL, y, hp: Hyperparams):
    lam = hp.lam_out
    A = phiL / lam + hp.inv_beta * np.eye(len(y))
    u = psd_solve(A, y)
    return -(hp.gamma0 ** 2 / lam) * np.outer(u, u)


def _propagate(prev, lam, dual):
    """Tilted covariance (I + X dual)^{-1} X with X = prev/lam."""
    X = prev / lam
    P = X.shape[0]
    return symmetrize(np.linalg.solve(np.eye(P) + X @ dual, X))


def linear_saddle_map(phis, duals, y, hp: Hyperparams, damping: float = 1.0):
    """One Gauss-Seidel sweep of the deep-linear saddle equations.

    The last-layer source term is refreshed first, then the duals are swept
    from the top down and the feature kernels from the bottom up, each update
    using the freshest neighbours.  The equations are iterated in contractive
    form: Phi^l = X (I + Phi_hat^l X)^{-1} as Phi^l <- X - X Phi_hat^l Phi^l and
    Phi_hat^l = (D/lam)(I + X D)^{-1} as Phi_hat^l <- D/lam - Phi_hat^l X D.  Both
    share the fixed points of the original form but never invert through a
    singular intermediate (scalar case: c <- 1 + gamma0^2/c rather than
    c <- 1/(1 + c_hat)).
    """
    L = hp.depth
    lams = hp.lambdas
    phis, duals = list(phis), list(duals)

    def mix(old, new):
        return symmetrize((1 - damping) * old + damping * new)

    duals[L - 1] = mix(duals[L - 1], _last_dual(phis[L], y, hp))
    for l in range(L - 1, 0, -1):
        X = phis[l] / lams[l]
        D = duals[l]  # dual of layer l+1
        duals[l - 1] = mix(duals[l - 1], D / lams[l] - duals[l - 1] @ X @ D)
    for l in range(1, L + 1):
        X = phis[l - 1] / lams[l - 1]
        phis[l] = mix(phis[l], X - X @ duals[l - 1] @ phis[l])
    return phis, duals


def _iterate(phis, duals, y, hp, damping, tol, max_iter):
    converged, it, change = False, 0, np.inf
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            try:
                new_phis, new_duals = linear_saddle_map(phis, duals, y, hp, damping)
            except np.linalg.LinAlgError:
                raise FloatingPointError(f"deep-linear iteration lost definiteness at step {it}")
            if not all(np.all(np.isfinite(K)) for K in new_phis + new_duals):
                raise FloatingPointError(f"deep-linear iteration diverged at step {it}")
            change = 0.0
            for old, new in zip(phis[1:] + duals, new_phis[1:] + new_duals):
                scale = max(np.max(np.abs(new)), np.finfo(float).tiny)
                change = max(change, np.max(np.abs(new - old)) / scale)
            phis, duals = new_phis, new_duals
            if change < tol:
                converged = True
                break
    return phis, duals, converged, it, change


def _spike_solution(phi0, y, hp: Hyperparams):
    """Exact deep-linear saddle via its rank-one spike structure.

    Eliminating the duals from the saddle equations gives the geometric chain
    Phi^{l+1} = (lam_{l-1}/lam_l) Phi^l (Phi^{l-1})^{-1} Phi^l, whose solutions
    are Phi^l = [G + (m^l - 1) g g^T / (v^T G v)] / Pi_l with G = Phi^0,
    Pi_l = lam_0 ... lam_{l-1}, v = (I/beta + m^L G/(Pi_L lam_L))^{-1} y and
    g = G v.  The last-layer source term fixes the scalar m through
    m - 1 = gamma0^2/(lam_L Pi_L) m^L v^T G v.
    """
    L = hp.depth
    lams = np.asarray(hp.lambdas)
    Pi = np.concatenate([[1.0], np.cumprod(lams[:-1])])  # Pi_0..Pi_L
    scale = Pi[L] * lams[L]
    K = hp.gamma0 ** 2 / scale
    ev, V = np.linalg.eigh(phi0)
    ev = np.clip(ev, 0.0, None)
    yk = V.T @ y
    ib = hp.inv_beta

    def vGv(t):
        den = ib + t * ev / scale
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(ev > 0, ev * yk ** 2 / den ** 2, 0.0)
        return float(np.sum(terms))

    def H(x):  # x = log m
        return np.expm1(x) - K * np.exp(L * x) * vGv(np.exp(L * x))

    if K == 0.0 or vGv(1.0) == 0.0:
        x = 0.0
    else:
        hi = min(1.0, 1.0 / L)
        while H(hi) <= 0:
            hi *= 2.0
            if L * hi > 700.0:
                raise RuntimeError("no root for the deep-linear spike equation")
        x = brentq(H, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=1000)
    t = np.exp(L * x)
    P = len(y)
    phis, duals = [phi0], []
    if x == 0.0:
        for l in range(1, L + 1):
            phis.append(phi0 / Pi[l])
            duals.append(np.zeros((P, P)))
        return phis, duals, x
    den = ib + t * ev / scale
    v = V @ np.where(den > 0, yk / np.where(den > 0, den, 1.0), 0.0)
    g = phi0 @ v
    q = float(v @ g)
    for l in range(1, L + 1):
        phis.append(symmetrize((phi0 + np.expm1(l * x) * np.outer(g, g) / q) / Pi[l]))
        coef = -Pi[l] * np.exp(-l * x) * np.expm1(x)
        duals.append(symmetrize(coef * np.outer(v, v) / q))
    return phis, duals, x


def saddle_defects(stack: KernelStack, y, hp: Hyperparams) -> float:
    """Largest relative defect of the deep-linear saddle equations."""
    phis, duals = list(stack.phi), list(stack.phi_hat)
    y = np.asarray(y, float)
    worst = 0.0
    for l in range(1, stack.depth + 1):
        target = _propagate(phis[l - 1], hp.lambdas[l - 1], duals[l - 1])
        worst = max(worst, np.max(np.abs(phis[l] - target)) / np.max(np.abs(target)))
    last = _last_dual(phis[-1], y, hp)
    lscale = max(np.max(np.abs(last)), np.finfo(float).tiny)
    worst = max(worst, np.max(np.abs(duals[-1] - last)) / lscale)
    P = stack.P
    for l in range(1, stack.depth):
        X = phis[l] / hp.lambdas[l]
        D = duals[l]
        target = np.linalg.solve(np.eye(P) + D @ X, D / hp.lambdas[l])
        worst = max(worst, np.max(np.abs(duals[l - 1] - target)) / lscale)
    return float(worst)


def solve_deep_linear(phi0, y, hp: Hyperparams, damping: float = 0.5, tol: float = 1e-12,
                      max_iter: int = 100000, method: str = "spike") -> KernelStack:
    """Solve the deep-linear saddle equations.

    ``phi0`` is the data Gram x.x/D; the ridge lambda_0 enters through the
    first-layer prior covariance phi0/lambda_0.

    method="spike" (default) uses the exact rank-one reduction (one scalar
    root).  method="iterate" runs the damped Gauss-Seidel fixed-point
    iteration of the matrix equations from the lazy start, with continuation
    in gamma0 (gamma0^2 doubling per stage); it converges for moderate
    gamma0 * depth but the fixed point turns repelling for deep, rich networks.
    """
    phi0 = symmetrize(as_array(phi0))
    y = np.asarray(y, float)
    L = hp.depth
    if method == "spike":
        phis, duals, x = _spike_solution(phi0, y, hp)
        stack = KernelStack(tuple(phis), tuple(duals), info={"log_m": x})
        defect = saddle_defects(stack, y, hp)
        stack.info.update(converged=bool(defect < 1e-6), defect=defect,
                          iterations=0)
        return stack
    if method != "iterate":
        raise ValueError(f"unknown method {method!r}")
    phis = [phi0]
    for l in range(1, L + 1):
        phis.append(phis[-1] / hp.lambdas[l - 1])
    duals = [np.zeros_like(phi0) for _ in range(L)]
    stages = []
    g2 = hp.gamma0 ** 2
    while g2 > 0.5:
        stages.append(np.sqrt(g2))
        g2 /= 2.0
    stages = stages[::-1][:-1] if stages else []
    total = 0
    for g in stages:
        phis, duals, _, it, _ = _iterate(phis, duals, y, hp.replace(gamma0=g), damping,
                                         max(tol, 1e-8), max_iter)
        total += it
    phis, duals, converged, it, change = _iterate(phis, duals, y, hp, damping, tol, max_iter)
    return KernelStack(tuple(phis), tuple(duals),
                       info={"converged": converged, "iterations": total + it,
                             "change": float(change), "stages": len(stages) + 1})


def linear_test_propagation(stack: KernelStack, k0, d0, hp: Hyperparams):
    """Closed-form train-test kernel propagation through a solved linear stack.

    ``k0`` (P_test x P) and ``d0`` (P_test) are the data Gram entries of the
    test points.  Returns the last-layer (k, d).
    """
    k = np.atleast_2d(np.asarray(k0, float))
    d = np.asarray(d0, float).copy()
    P = stack.P
    for l in range(1, stack.depth + 1):
        lam = hp.lambdas[l - 1]
        C = stack.phi[l - 1] / lam
        Q = stack.phi_hat[l - 1]
        kk, dd = k / lam, d / lam
        # E[h0 h^T] = k^T (I + Q C)^{-1}, E[h0^2] = d - k^T (I + Q C)^{-1} Q k
        M = np.linalg.solve((np.eye(P) + Q @ C).T, kk.T).T
        d = dd - np.einsum("tp,pq,tq->t", M, Q, kk)
        k = M
    return k, d
