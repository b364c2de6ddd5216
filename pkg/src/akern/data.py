"""Datasets: synthetic whitened inputs, MNIST (IDX) and CIFAR-10 (binary) loaders,
two-class subsets and patch layouts for convolutional models.

Image normalization: pixels are scaled to [0, 1], optionally centered per
feature, then rescaled globally so that the mean squared norm of an input is D
(so the data Gram x.x/D has unit mean diagonal).
"""
from __future__ import annotations

import enum
import gzip
import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import Dataset, PatchLayout

LUMA = np.array([0.299, 0.587, 0.114])
CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    pass


class LabelNorm(str, enum.Enum):
    PLUS_MINUS_ONE = "pm1"
    UNIT_NORM = "unit"

    @classmethod
    def parse(cls, v) -> "LabelNorm":
        if isinstance(v, cls):
            return v
        v = str(v).lower()
        aliases = {"plusminusone": cls.PLUS_MINUS_ONE, "unitnorm": cls.UNIT_NORM}
        return aliases.get(v.replace("_", ""), None) or cls(v)


def _alternating(P):
    return np.where(np.arange(P) % 2 == 0, 1.0, -1.0)


def synth_whitened(P: int, D: int, seed=0, label_norm="pm1") -> Dataset:
    """P orthogonal inputs with x_mu . x_nu / D = delta_{mu nu}; labels alternate
    +-1 (or the same vector scaled to unit norm)."""
    if P > D:
        raise ValueError(f"need P <= D for whitened data, got P={P}, D={D}")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((D, P)))
    y = _alternating(P)
    if LabelNorm.parse(label_norm) is LabelNorm.UNIT_NORM:
        y = y / np.linalg.norm(y)
    return Dataset(np.sqrt(D) * Q.T, y)


def synth_whitened_split(P: int, P_test: int, D: int, seed=0, label_norm="pm1",
                         overlap: float = 0.8):
    """Whitened training set plus test points that overlap it.

    Test point t is sqrt(D) (overlap * u_t + sqrt(1 - overlap^2) * o_t), with u_t
    a random unit combination sum_mu a_mu x_mu/sqrt(D) of the training inputs and
    o_t orthogonal to all inputs; its label is sign(a . y).  Every input has
    x.x/D = 1.  Returns (train, test).
    """
    if P + P_test > D:
        raise ValueError(f"need P + P_test <= D, got {P} + {P_test} > {D}")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((D, P + P_test)))
    train_dirs, free = Q[:, :P], Q[:, P:]
    y = _alternating(P)
    a = rng.standard_normal((P_test, P))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    dirs = overlap * a @ train_dirs.T + np.sqrt(1.0 - overlap ** 2) * free.T
    y_test = np.sign(a @ y)
    y_test[y_test == 0] = 1.0
    if LabelNorm.parse(label_norm) is LabelNorm.UNIT_NORM:
        scale = np.linalg.norm(y)
        y, y_test = y / scale, y_test / scale
    return Dataset(np.sqrt(D) * train_dirs.T, y), Dataset(np.sqrt(D) * dirs, y_test)


def normalize(X, center: bool = False) -> np.ndarray:
    """Optional per-feature centering, then a global scale so mean |x|^2 = D."""
    X = np.array(X, dtype=float)
    if center:
        X -= X.mean(axis=0)
    msq = np.mean(np.sum(X ** 2, axis=1))
    if msq > 0:
        X *= np.sqrt(X.shape[1] / msq)
    return X


# ---------------------------------------------------------------- MNIST

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf: bytes, magic: int, ndim: int, name: str) -> np.ndarray:
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{name}: header truncated at byte {len(buf)}")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise DataFormatError(f"{name}: bad magic 0x{got:08x} at byte 0, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = start + int(np.prod(dims))
    if len(buf) < need:
        raise DataFormatError(f"{name}: truncated, data ends at byte {len(buf)} "
                              f"but dimensions {dims} need {need} bytes")
    if len(buf) > need:
        raise DataFormatError(f"{name}: {len(buf) - need} trailing bytes after byte {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(dims)


def load_mnist_idx(images_path, labels_path, center: bool = False) -> Dataset:
    """MNIST-style IDX files (optionally gzipped).  Inputs are flattened
    row-major, scaled to [0, 1] and normalized; targets are the digit labels."""
    images = _parse_idx(_read_bytes(images_path), 0x00000803, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), 0x00000801, 1, str(labels_path))
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(float) / 255.0
    return Dataset(normalize(X, center), labels.astype(float))


# ---------------------------------------------------------------- CIFAR-10

def _parse_cifar(buf: bytes, name: str):
    if len(buf) % CIFAR_RECORD:
        n = len(buf) // CIFAR_RECORD
        raise DataFormatError(f"{name}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
                              f"record {n} starting at byte {n * CIFAR_RECORD} is incomplete")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"{name}: label byte {labels[bad[0]]} > 9 at byte "
                              f"{bad[0] * CIFAR_RECORD}; records are misaligned")
    # channel-major 3x32x32 -> n x 32 x 32 x 3
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return images, labels


def grayscale(images) -> np.ndarray:
    """Luma-weighted channel sum of n x H x W x 3 images."""
    return np.asarray(images, float) @ LUMA


def resize_bilinear(images, side: int) -> np.ndarray:
    """Bilinear resampling of n x H x W (x C) images to side x side."""
    images = np.asarray(images, float)
    H = images.shape[1]
    if side == H:
        return images.copy()
    z = side / H
    zoom = (1, z, z) + (1,) * (images.ndim - 3)
    return ndimage.zoom(images, zoom, order=1, mode="nearest", grid_mode=True)


def patchify(images, patch: int) -> np.ndarray:
    """n x H x W x C images -> n x A x (patch*patch*C) non-overlapping patches,
    patches in row-major grid order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    n, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"unsupported patch layout: {patch} does not tile {H}x{W}")
    g = images.reshape(n, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(n, (H // patch) * (W // patch), patch * patch * C)


def unpatchify(patches, side: int, channels: int) -> np.ndarray:
    patches = np.asarray(patches)
    n, A, k = patches.shape
    patch = int(round(np.sqrt(k / channels)))
    grid = side // patch
    if grid * grid != A or patch * patch * channels != k:
        raise ValueError("patch shape does not match image shape")
    g = patches.reshape(n, grid, grid, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return g.reshape(n, side, side, channels)


def load_cifar10_binary(batch_paths, mode: str = "mlp", side: int | None = None,
                        patch: int = 8, center: bool = True) -> Dataset:
    """CIFAR-10 binary batches.

    ``mode="mlp"``: grayscale, bilinear resize to ``side`` (default 28), flatten.
    ``mode="cnn"``: colour, resize to ``side`` (default 32), cut into
    non-overlapping patch x patch tiles; inputs are the concatenated patches and
    carry a PatchLayout.  Targets are the class indices.
    """
    if isinstance(batch_paths, (str, Path)):
        batch_paths = [batch_paths]
    parts = [_parse_cifar(_read_bytes(p), str(p)) for p in batch_paths]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts]).astype(float)
    if mode == "mlp":
        side = 28 if side is None else side
        X = resize_bilinear(grayscale(images), side).reshape(len(images), -1) / 255.0
        return Dataset(normalize(X, center), labels)
    if mode == "cnn":
        side = CIFAR_SIDE if side is None else side
        img = resize_bilinear(images.astype(float), side) / 255.0
        tiles = patchify(img, patch)
        n, A, k = tiles.shape
        X = normalize(tiles.reshape(n, A * k), center)
        return Dataset(X, labels, PatchLayout(A, k))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- subsets

def two_class_subset(dataset: Dataset, class_a, class_b, P: int, seed=0,
                     exclude=(), return_indices: bool = False):
    """Balanced subset of P examples (P/2 per class, class_a first when P is odd)
    labelled -1 for class_a and +1 for class_b, shuffled by ``seed``.  Indices in
    ``exclude`` are never drawn."""
    rng = np.random.default_rng(seed)
    t = dataset.targets
    excl = np.zeros(len(t), bool)
    excl[np.asarray(list(exclude), dtype=int)] = True
    n_a, n_b = (P + 1) // 2, P // 2
    picks = []
    for cls, n in ((class_a, n_a), (class_b, n_b)):
        pool = np.flatnonzero((t == cls) & ~excl)
        if len(pool) < n:
            raise ValueError(f"class {cls}: need {n} examples, only {len(pool)} available")
        picks.append(rng.choice(pool, n, replace=False))
    idx = rng.permutation(np.concatenate(picks))
    y = np.where(t[idx] == class_a, -1.0, 1.0)
    sub = Dataset(dataset.inputs[idx], y, dataset.patch_layout)
    return (sub, idx) if return_indices else sub


def train_test_split_two_class(dataset: Dataset, class_a, class_b, P: int, P_test: int, seed=0):
    """Disjoint balanced train and test subsets."""
    train, idx = two_class_subset(dataset, class_a, class_b, P, seed, return_indices=True)
    test = two_class_subset(dataset, class_a, class_b, P_test, seed + 1, exclude=idx)
    return train, test


def write_dataset_csv(path, dataset: Dataset) -> Path:
    """Row-major inputs followed by a targets column."""
    path = Path(path)
    np.savetxt(path, np.column_stack([dataset.inputs, dataset.targets]), delimiter=",",
               fmt="%.17g")
    return path
