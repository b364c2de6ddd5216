"""Finite-width networks with hand-written backpropagation, trained by Langevin
dynamics or by gradient descent with weight decay.

MLP (mean-field scaling):
    h^1 = x W0^T / sqrt(D),  h^{l+1} = phi(h^l) W_l^T / sqrt(N),
    f = phi(h^L) . w / (gamma0 N).
Patch CNN (one hidden layer): h_{a} = x_a W^T / sqrt(k) for each patch a and
    f = sum_a phi(h_a) . w_a / (gamma0 N).
All weights start i.i.d. N(0, 1).  Training uses the loss gamma0^2 N * 1/2 sum (f - y)^2
and a ridge lambda_l on layer l.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Activation, Dataset, Hyperparams, KernelKind, KernelMatrix, symmetrize


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class MlpParams:
    """weights[0]: N x D, weights[1..L-1]: N x N, weights[L]: 1 x N readout."""
    weights: list
    activation: Activation = Activation.RELU
    seed: int | None = None

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    def copy(self):
        return MlpParams([W.copy() for W in self.weights], self.activation, self.seed)


@dataclass
class ConvParams:
    """filters: N x k shared across patches; readout: A x N (one row per position)."""
    filters: np.ndarray
    readout: np.ndarray
    activation: Activation = Activation.RELU
    seed: int | None = None

    @property
    def weights(self):
        return [self.filters, self.readout]

    @property
    def width(self) -> int:
        return self.filters.shape[0]

    @property
    def depth(self) -> int:
        return 1

    def copy(self):
        return ConvParams(self.filters.copy(), self.readout.copy(), self.activation, self.seed)


def init_mlp(D: int, N: int, depth: int = 1, activation="relu", seed=0) -> MlpParams:
    rng = np.random.default_rng(seed)
    shapes = [(N, D)] + [(N, N)] * (depth - 1) + [(1, N)]
    return MlpParams([rng.standard_normal(s) for s in shapes], Activation.parse(activation), seed)


def init_conv(patch_count: int, patch_dim: int, N: int, activation="relu", seed=0) -> ConvParams:
    rng = np.random.default_rng(seed)
    return ConvParams(rng.standard_normal((N, patch_dim)),
                      rng.standard_normal((patch_count, N)), Activation.parse(activation), seed)


@dataclass(frozen=True, eq=False)
class ForwardPass:
    inputs: np.ndarray
    preacts: list       # h^1..h^L (MLP: P x N; CNN: P x A x N)
    output: np.ndarray


def _check_gamma(gamma0):
    if not gamma0 > 0:
        raise ValueError("a finite network needs gamma0 > 0")


def forward(params, inputs, gamma0: float) -> ForwardPass:
    _check_gamma(gamma0)
    X = np.atleast_2d(np.asarray(inputs, float))
    act = params.activation
    if isinstance(params, ConvParams):
        A, k = params.readout.shape[0], params.filters.shape[1]
        Xp = X.reshape(len(X), A, k)
        h = Xp @ params.filters.T / np.sqrt(k)
        f = np.einsum("pan,an->p", act.phi(h), params.readout) / (gamma0 * params.width)
        return ForwardPass(X, [h], f)
    W = params.weights
    N = params.width
    hs = [X @ W[0].T / np.sqrt(X.shape[1])]
    for l in range(1, params.depth):
        hs.append(act.phi(hs[-1]) @ W[l].T / np.sqrt(N))
    f = (act.phi(hs[-1]) @ W[-1].T).ravel() / (gamma0 * N)
    return ForwardPass(X, hs, f)


def backprop(params, fp: ForwardPass, coef, gamma0: float) -> list:
    """Gradients of sum_mu coef_mu f_mu with respect to every weight array."""
    c = np.asarray(coef, float)
    act = params.activation
    N = params.width
    if isinstance(params, ConvParams):
        h = fp.preacts[0]
        A, k = params.readout.shape[0], params.filters.shape[1]
        Xp = fp.inputs.reshape(len(c), A, k)
        g_read = np.einsum("p,pan->an", c, act.phi(h)) / (gamma0 * N)
        delta = c[:, None, None] * params.readout[None] * act.dphi(h) / (gamma0 * N)
        g_filt = np.einsum("pan,pak->nk", delta, Xp) / np.sqrt(k)
        return [g_filt, g_read]
    W = params.weights
    L = params.depth
    hs = fp.preacts
    grads = [None] * (L + 1)
    grads[L] = (c @ act.phi(hs[L - 1]))[None, :] / (gamma0 * N)
    delta = c[:, None] * W[L][0][None, :] * act.dphi(hs[L - 1]) / (gamma0 * N)
    for l in range(L - 1, 0, -1):
        grads[l] = delta.T @ act.phi(hs[l - 1]) / np.sqrt(N)
        delta = (delta @ W[l] / np.sqrt(N)) * act.dphi(hs[l - 1])
    grads[0] = delta.T @ fp.inputs / np.sqrt(fp.inputs.shape[1])
    return grads


def loss(params, dataset: Dataset, gamma0: float) -> float:
    fp = forward(params, dataset.inputs, gamma0)
    return 0.5 * float(np.sum((fp.output - dataset.targets) ** 2))


def loss_gradient(params, dataset: Dataset, gamma0: float):
    """(loss, gradients of 1/2 sum (f - y)^2)."""
    fp = forward(params, dataset.inputs, gamma0)
    r = fp.output - dataset.targets
    return 0.5 * float(r @ r), backprop(params, fp, r, gamma0)


# ---------------------------------------------------------------- kernels

@dataclass(frozen=True, eq=False)
class EmpiricalKernels:
    phi: list           # Phi^0..Phi^L
    grad: list          # G^1..G^{L+1}
    ntk: KernelMatrix


def empirical_kernels(params, inputs, gamma0: float) -> EmpiricalKernels:
    """Feature kernels phi(h)phi(h)^T/N, gradient kernels g g^T/N with
    g^l = gamma0 N df/dh^l, and K = sum_l G^{l+1} * Phi^l."""
    X = inputs.inputs if isinstance(inputs, Dataset) else np.atleast_2d(np.asarray(inputs, float))
    fp = forward(params, X, gamma0)
    act = params.activation
    N = params.width
    P = len(X)
    if isinstance(params, ConvParams):
        h = fp.preacts[0]
        A, k = params.readout.shape[0], params.filters.shape[1]
        Xp = X.reshape(P, A, k)
        phi0 = np.einsum("pak,qbk->paqb", Xp, Xp) / k
        f = act.phi(h)
        phi1 = np.einsum("pan,qbn->paqb", f, f) / N
        g = params.readout[None] * act.dphi(h)
        G1 = np.einsum("pan,qbn->paqb", g, g) / N
        K = np.einsum("paqb->pq", phi0 * G1) + np.einsum("paqa->pq", phi1)
        flat = lambda T: symmetrize(T.reshape(P * A, P * A))
        ones = np.kron(np.ones((P, P)), np.eye(A))
        return EmpiricalKernels([flat(phi0), flat(phi1)], [flat(G1), ones],
                                KernelMatrix(K, KernelKind.TANGENT))
    W = params.weights
    L = params.depth
    phis = [symmetrize(X @ X.T / X.shape[1])]
    feats = [act.phi(h) for h in fp.preacts]
    phis += [symmetrize(f @ f.T / N) for f in feats]
    gs = [None] * L
    gs[L - 1] = W[L][0][None, :] * act.dphi(fp.preacts[L - 1])
    for l in range(L - 1, 0, -1):
        gs[l - 1] = (gs[l] @ W[l] / np.sqrt(N)) * act.dphi(fp.preacts[l - 1])
    grads = [symmetrize(g @ g.T / N) for g in gs] + [np.ones((P, P))]
    K = sum(G * F for G, F in zip(grads, phis))
    return EmpiricalKernels(phis, grads, KernelMatrix(K, KernelKind.TANGENT))


def preactivation_samples(params, inputs, layer: int = 1, patterns=None, gamma0: float = 1.0):
    """h^layer entries for the chosen patterns, pooled over neurons (1-d array)."""
    fp = forward(params, inputs, gamma0)
    h = fp.preacts[layer - 1]
    if patterns is not None:
        h = h[np.atleast_1d(patterns)]
    return np.asarray(h, float).ravel()


def preactivation_histogram(params, inputs, layer: int = 1, bins=50, patterns=None,
                            gamma0: float = 1.0):
    """Density-normalized histogram (counts, edges) of pooled preactivations."""
    return np.histogram(preactivation_samples(params, inputs, layer, patterns, gamma0),
                        bins=bins, density=True)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class LangevinConfig:
    eta: float = 5e-4
    T: int = 20000
    thermalize_after: int = 5000
    sample_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0 or self.T <= 0 or self.sample_every <= 0:
            raise ValueError("eta, T and sample_every must be positive")
        if not 0 <= self.thermalize_after < self.T:
            raise ValueError("thermalize_after must lie in [0, T)")


@dataclass(frozen=True)
class GDConfig:
    eta: float = 1e-3
    T: int = 20000
    record_every: int = 100


@dataclass(eq=False)
class TrainingResult:
    params: object
    train_predictions: np.ndarray
    test_predictions: np.ndarray | None
    losses: list
    kernels: list = field(default_factory=list)          # averaged Phi^0..Phi^L (train)
    preactivations: list = field(default_factory=list)   # first-layer h samples (P x N each)
    n_samples: int = 0


def _step(params, grads, eta, scale, decays, noise_sd=0.0, rng=None):
    for W, g, lam in zip(params.weights, grads, decays):
        W -= eta * (scale * g + lam * W)
        if noise_sd:
            W += noise_sd * rng.standard_normal(W.shape)


def _decays(params, hp: Hyperparams):
    lams = hp.lambdas
    if len(lams) < len(params.weights):
        lams = tuple(lams) + (lams[-1],) * (len(params.weights) - len(lams))
    return list(lams[:len(params.weights)])


def train_gd_weight_decay(params, dataset: Dataset, hp: Hyperparams,
                          config: GDConfig = GDConfig(), test_inputs=None) -> TrainingResult:
    """theta <- theta - eta gamma0^2 N grad(loss) - eta lambda theta (deterministic)."""
    params = params.copy()
    g0 = hp.gamma0
    scale = g0 ** 2 * params.width
    decays = _decays(params, hp)
    losses = []
    for t in range(config.T):
        value, grads = loss_gradient(params, dataset, g0)
        if not np.isfinite(value):
            raise TrainingDivergence(f"loss is not finite at step {t}")
        if t % config.record_every == 0:
            losses.append((t, value))
        _step(params, grads, config.eta, scale, decays)
    value = loss(params, dataset, g0)
    losses.append((config.T, value))
    test = None if test_inputs is None else forward(params, test_inputs, g0).output
    return TrainingResult(params, forward(params, dataset.inputs, g0).output, test, losses)


def train_langevin(params, dataset: Dataset, hp: Hyperparams,
                   config: LangevinConfig = LangevinConfig(), test_inputs=None,
                   keep_preactivations: bool = True) -> TrainingResult:
    """theta <- theta - eta gamma0^2 N grad(loss) - eta (lambda/beta) theta + sqrt(2 eta/beta) xi.

    After ``thermalize_after`` steps, predictions, kernels and first-layer
    preactivations are collected every ``sample_every`` steps and averaged.
    With beta = inf the noise vanishes and the decay lambda/beta is zero.
    """
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    g0 = hp.gamma0
    scale = g0 ** 2 * params.width
    decays = [lam * hp.inv_beta for lam in _decays(params, hp)]
    noise_sd = np.sqrt(2 * config.eta * hp.inv_beta)
    X_all = dataset.inputs if test_inputs is None else np.vstack([dataset.inputs, test_inputs])
    P = dataset.P
    f_sum = np.zeros(len(X_all))
    kernel_sum = None
    pre = []
    n = 0
    losses = []
    for t in range(config.T):
        value, grads = loss_gradient(params, dataset, g0)
        if not np.isfinite(value):
            raise TrainingDivergence(f"loss is not finite at step {t}")
        if t >= config.thermalize_after and (t - config.thermalize_after) % config.sample_every == 0:
            fp = forward(params, X_all, g0)
            f_sum += fp.output
            ek = empirical_kernels(params, dataset.inputs, g0)
            ks = [np.asarray(K) for K in ek.phi]
            kernel_sum = ks if kernel_sum is None else [a + b for a, b in zip(kernel_sum, ks)]
            if keep_preactivations:
                pre.append(fp.preacts[0][:P].copy())
            n += 1
            losses.append((t, value))
        _step(params, grads, config.eta, scale, decays, noise_sd, rng)
    f_mean = f_sum / max(n, 1)
    kernels = [K / max(n, 1) for K in kernel_sum] if kernel_sum else []
    test = f_mean[P:] if test_inputs is not None else None
    return TrainingResult(params, f_mean[:P], test, losses, kernels, pre, n)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params) -> Path:
    """Flat little-endian float64 blob plus ``<path>.json`` with shapes and metadata."""
    path = Path(path)
    arrays = params.weights
    blob = np.concatenate([np.asarray(W, "<f8").ravel() for W in arrays])
    path.write_bytes(blob.tobytes())
    meta = {"kind": "conv" if isinstance(params, ConvParams) else "mlp",
            "shapes": [list(W.shape) for W in arrays],
            "activation": params.activation.value, "seed": params.seed}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    blob = np.frombuffer(path.read_bytes(), dtype="<f8")
    sizes = [int(np.prod(s)) for s in meta["shapes"]]
    if sum(sizes) != blob.size:
        raise ValueError(f"checkpoint holds {blob.size} values, manifest expects {sum(sizes)}")
    arrays, off = [], 0
    for s, n in zip(meta["shapes"], sizes):
        arrays.append(blob[off:off + n].reshape(s).copy())
        off += n
    act = Activation.parse(meta["activation"])
    if meta["kind"] == "conv":
        return ConvParams(arrays[0], arrays[1], act, meta["seed"])
    return MlpParams(arrays, act, meta["seed"])
