"""Shared domain types, kernel algebra and metrics.

Kernels are plain ``numpy`` arrays wrapped in :class:`KernelMatrix` where the
kind of a kernel matters (serialization, PSD checks).  Every public function
accepts either a ``KernelMatrix`` or an array-like.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg


class SingularKernelError(np.linalg.LinAlgError):
    pass


class Activation(str, enum.Enum):
    LINEAR = "linear"
    RELU = "relu"
    TANH = "tanh"

    @classmethod
    def parse(cls, value) -> "Activation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown activation {value!r}; expected one of "
                             f"{[a.value for a in cls]}") from None

    def phi(self, h):
        if self is Activation.LINEAR:
            return h
        if self is Activation.RELU:
            return np.maximum(h, 0.0)
        return np.tanh(h)

    def dphi(self, h):
        if self is Activation.LINEAR:
            return np.ones_like(h)
        if self is Activation.RELU:
            return (h > 0).astype(float)
        return 1.0 / np.cosh(h) ** 2

    def d2phi(self, h):
        """Second derivative. For ReLU this is a Dirac mass at 0, reported as 0
        here; callers that need the singular part handle it analytically."""
        if self is Activation.TANH:
            t = np.tanh(h)
            return -2.0 * t * (1.0 - t ** 2)
        return np.zeros_like(h)

    @property
    def homogeneous(self) -> bool:
        return self is not Activation.TANH


class KernelKind(str, enum.Enum):
    FEATURE = "Feature"
    DUAL = "Dual"
    GRADIENT = "Gradient"
    TANGENT = "Tangent"


def symmetrize(K) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    return 0.5 * (K + K.T)


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Symmetric P x P kernel with a kind tag.

    The entries are symmetrized on construction and stored read-only.
    """
    entries: np.ndarray
    kind: KernelKind = KernelKind.FEATURE

    def __post_init__(self):
        K = np.asarray(self.entries, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError(f"kernel must be square, got shape {K.shape}")
        K = symmetrize(K)
        K.setflags(write=False)
        object.__setattr__(self, "entries", K)
        object.__setattr__(self, "kind", KernelKind(self.kind))

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    @property
    def P(self) -> int:
        return self.entries.shape[0]

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])

    def is_psd(self, tol: float = 1e-8) -> bool:
        scale = max(np.trace(self.entries) / self.P, np.finfo(float).tiny)
        return self.min_eig() >= -tol * scale

    # serialization
    def to_json(self) -> str:
        return json.dumps({"kind": self.kind.value, "P": self.P,
                           "entries": self.entries.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "KernelMatrix":
        d = json.loads(text)
        K = np.array(d["entries"], dtype=float).reshape(d["P"], d["P"])
        return cls(K, KernelKind(d["kind"]))


def as_array(K) -> np.ndarray:
    return np.asarray(K.entries if isinstance(K, KernelMatrix) else K, dtype=float)


@dataclass(frozen=True)
class PatchLayout:
    patch_count: int
    patch_dim: int


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    patch_layout: PatchLayout | None = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("dataset needs P >= 1 and D >= 1")
        if y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        pl = self.patch_layout
        if pl is not None and pl.patch_count * pl.patch_dim != X.shape[1]:
            raise ValueError(f"patch layout {pl.patch_count}x{pl.patch_dim} does not "
                             f"match D={X.shape[1]}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    @property
    def P(self) -> int:
        return self.inputs.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.targets[idx], self.patch_layout)


@dataclass(frozen=True)
class Hyperparams:
    """gamma0: richness, beta: inverse temperature (np.inf allowed),
    lambdas: ridges lambda_0..lambda_L, depth: number of hidden layers L."""
    gamma0: float
    depth: int = 1
    activation: Activation = Activation.RELU
    beta: float = np.inf
    lambdas: tuple = ()
    kappa: float | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.gamma0 < 0:
            raise ValueError("gamma0 must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        act = Activation.parse(self.activation)
        object.__setattr__(self, "activation", act)
        lams = tuple(float(v) for v in np.atleast_1d(self.lambdas)) or (1.0,)
        if len(lams) == 1:
            lams = lams * (self.depth + 1)
        if len(lams) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} ridges, got {len(lams)}")
        if min(lams) < 0:
            raise ValueError("ridges must be nonnegative")
        object.__setattr__(self, "lambdas", lams)
        if self.kappa is None:
            object.__setattr__(self, "kappa", float(self.depth + 1))

    @property
    def inv_beta(self) -> float:
        return 0.0 if np.isinf(self.beta) else 1.0 / self.beta

    @property
    def lam_out(self) -> float:
        return self.lambdas[-1]

    def replace(self, **kw) -> "Hyperparams":
        d = dict(gamma0=self.gamma0, depth=self.depth, activation=self.activation,
                 beta=self.beta, lambdas=self.lambdas, kappa=self.kappa)
        if "depth" in kw and "lambdas" not in kw:
            d["lambdas"] = (self.lambdas[0],)
        if "depth" in kw and "kappa" not in kw:
            d["kappa"] = None
        d.update(kw)
        return Hyperparams(**d)


@dataclass(frozen=True, eq=False)
class KernelStack:
    """phi[0..L] feature kernels (phi[0] is the data Gram x.x/D) and
    phi_hat[0..L-1] holding the dual kernels of layers 1..L."""
    phi: tuple
    phi_hat: tuple
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        phi = tuple(symmetrize(as_array(K)) for K in self.phi)
        phi_hat = tuple(symmetrize(as_array(K)) for K in self.phi_hat)
        if len(phi) != len(phi_hat) + 1:
            raise ValueError("need L+1 feature kernels and L dual kernels")
        shapes = {K.shape for K in phi + phi_hat}
        if len(shapes) != 1:
            raise ValueError(f"kernel shapes differ: {shapes}")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "phi_hat", phi_hat)

    @property
    def depth(self) -> int:
        return len(self.phi_hat)

    @property
    def P(self) -> int:
        return self.phi[0].shape[0]

    def feature(self, layer: int) -> KernelMatrix:
        return KernelMatrix(self.phi[layer], KernelKind.FEATURE)

    def dual(self, layer: int) -> KernelMatrix:
        return KernelMatrix(self.phi_hat[layer - 1], KernelKind.DUAL)

    def write(self, directory, prefix: str = "") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for l, K in enumerate(self.phi):
            paths.append(write_kernel_csv(directory / f"{prefix}phi{l}.csv", K))
        for l, K in enumerate(self.phi_hat, start=1):
            paths.append(write_kernel_csv(directory / f"{prefix}phi_hat{l}.csv", K))
        return paths


@dataclass(frozen=True, eq=False)
class PredictorResult:
    train_predictions: np.ndarray
    test_predictions: np.ndarray
    test_loss: float
    kernel_used: KernelMatrix
    train_loss: float = float("nan")


# ---------------------------------------------------------------- linear algebra

JITTER_SCHEDULE = (0.0, 1e-10, 1e-8, 1e-6)


def jittered_cholesky(K, schedule: Sequence[float] = JITTER_SCHEDULE):
    """Lower Cholesky factor of K + j*I, escalating j through ``schedule``
    (relative to trace/P). Returns (L, j)."""
    K = symmetrize(as_array(K))
    P = K.shape[0]
    scale = abs(np.trace(K)) / P
    if scale == 0.0:
        scale = 1.0
    for rel in schedule:
        j = rel * scale
        try:
            L = linalg.cholesky(K + j * np.eye(P), lower=True, check_finite=True)
        except linalg.LinAlgError:
            continue
        return L, j
    raise SingularKernelError("singular kernel system")


def psd_solve(K, B):
    """Solve K X = B for symmetric PSD K using the jittered Cholesky policy."""
    L, _ = jittered_cholesky(K)
    return linalg.cho_solve((L, True), np.asarray(B, dtype=float))


def psd_inverse(K) -> np.ndarray:
    K = as_array(K)
    return symmetrize(psd_solve(K, np.eye(K.shape[0])))


def psd_project(K) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm (eigenvalue clipping at 0)."""
    w, V = np.linalg.eigh(symmetrize(K))
    if w[0] >= 0:
        return symmetrize(K)
    return symmetrize((V * np.clip(w, 0.0, None)) @ V.T)


# ---------------------------------------------------------------- operations

def data_gram(dataset: Dataset) -> KernelMatrix:
    X = dataset.inputs
    return KernelMatrix(X @ X.T / X.shape[1], KernelKind.FEATURE)


def cross_gram(x_test, x_train) -> np.ndarray:
    x_test = np.atleast_2d(np.asarray(x_test, dtype=float))
    return x_test @ np.asarray(x_train, dtype=float).T / x_test.shape[1]


def kernel_alignment(a, b) -> float:
    A, B = as_array(a), as_array(b)
    if A.shape != B.shape:
        raise ValueError("kernel shapes differ")
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na == 0 or nb == 0:
        raise ValueError("degenerate kernel")
    return float(np.sum(A * B.T) / (na * nb))


def kernel_ridge_predict(K_train, k_test, y, ridge: float = 0.0, y_test=None,
                         kind: KernelKind | None = None) -> PredictorResult:
    """f(x) = k(x) (K + ridge I)^{-1} y on test rows and on the training set."""
    K = symmetrize(as_array(K_train))
    y = np.asarray(y, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    k_test = np.atleast_2d(np.asarray(k_test, dtype=float)) if np.size(k_test) else np.zeros((0, K.shape[0]))
    alpha = psd_solve(K + ridge * np.eye(K.shape[0]), y)
    f_train = K @ alpha
    f_test = k_test @ alpha
    if y_test is None:
        loss = float("nan")
    else:
        loss = test_loss(f_test, y_test)
    if kind is None:
        kind = K_train.kind if isinstance(K_train, KernelMatrix) else KernelKind.FEATURE
    return PredictorResult(f_train, f_test, loss, KernelMatrix(K, kind),
                           train_loss=test_loss(f_train, y))


def test_loss(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.size == 0:
        return float("nan")
    return float(np.mean((pred - target) ** 2))


test_loss.__test__ = False  # keep pytest from collecting the metric


def r2_score(pred, reference) -> float:
    """Coefficient of determination of ``pred`` against ``reference``."""
    pred, ref = np.asarray(pred, float), np.asarray(reference, float)
    ss_res = np.sum((pred - ref) ** 2)
    ss_tot = np.sum((ref - ref.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot)


def ks_distance_to_density(samples, grid, density) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``samples`` and
    the CDF of a density tabulated on ``grid``."""
    from scipy.integrate import cumulative_trapezoid
    grid = np.asarray(grid, float)
    cdf = cumulative_trapezoid(np.asarray(density, float), grid, initial=0.0)
    cdf /= cdf[-1]
    x = np.sort(np.asarray(samples, float).ravel())
    n = x.size
    F = np.interp(x, grid, cdf, left=0.0, right=1.0)
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


# ---------------------------------------------------------------- serialization

def write_kernel_csv(path, K) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, as_array(K), fmt="%.17g", delimiter=",")
    return path


def read_kernel_csv(path, kind: KernelKind = KernelKind.FEATURE) -> KernelMatrix:
    K = np.loadtxt(path, delimiter=",", ndmin=2)
    return KernelMatrix(K, kind)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, enum.Enum):
        return o.value
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")
