"""Datasets: MNIST in IDX format plus synthetic Gaussian blobs."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ENV = "NAISNET_DATA"
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "t10k": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.x_train) == 0:
            raise ValueError("training split is empty")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ValueError("inputs and labels differ in length")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


def data_root(root: str | os.PathLike | None = None) -> Path | None:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ENV)
    return Path(env) if env else None


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _resolve(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def read_idx_images(path) -> np.ndarray:
    """Raw uint8 images of shape (count, rows, cols)."""
    with _open(Path(path)) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
        body = fh.read()
    need = count * rows * cols
    if len(body) < need:
        raise IdxFormatError(f"{path}: truncated, expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    with _open(Path(path)) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise IdxFormatError(f"{path}: truncated header")
        magic, count = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
        body = fh.read()
    if len(body) < count:
        raise IdxFormatError(f"{path}: truncated, expected {count} labels, found {len(body)}")
    return np.frombuffer(body[:count], dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist(path, kind: str = "t10k") -> tuple[np.ndarray, np.ndarray]:
    """Load one MNIST split from a directory (or an images file path).

    Images come back flattened to float64 vectors in [0, 1].
    """
    path = Path(path)
    if path.is_dir():
        img_stem, lbl_stem = MNIST_FILES.get(kind, (f"{kind}-images-idx3-ubyte", f"{kind}-labels-idx1-ubyte"))
        img_path, lbl_path = _resolve(path, img_stem), _resolve(path, lbl_stem)
    else:
        img_path = path
        lbl_path = Path(str(path).replace("images-idx3", "labels-idx1"))
    images = read_idx_images(img_path)
    labels = read_idx_labels(lbl_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IdxFormatError("labels must lie in 0..9")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return X, labels.astype(int)


def _stratified_take(y: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced random subset of size ``count``."""
    classes = np.unique(y)
    per = [rng.permutation(np.flatnonzero(y == c)) for c in classes]
    idx = []
    i = 0
    while len(idx) < count:
        progressed = False
        for pool in per:
            if i < len(pool) and len(idx) < count:
                idx.append(pool[i])
                progressed = True
        if not progressed:
            raise ValueError(f"only {len(idx)} samples available, {count} requested")
        i += 1
    return np.sort(np.array(idx))


def mnist_subset(root=None, n_train: int = 10_000, n_test: int = 2_000, seed: int = 0) -> Dataset:
    """Class-balanced MNIST subset.

    Uses the official train/t10k files when both exist under ``root``;
    otherwise a single ``subset`` split is divided into train and test.
    """
    root = data_root(root)
    if root is None:
        raise FileNotFoundError(f"no MNIST root given and ${DATA_ENV} is unset")
    rng = np.random.default_rng(seed)
    try:
        Xtr, ytr = load_mnist(root, "train")
        Xte, yte = load_mnist(root, "t10k")
    except FileNotFoundError:
        X, y = load_mnist(root, "subset")
        test_idx = _stratified_take(y, n_test, rng)
        rest = np.setdiff1d(np.arange(len(y)), test_idx)
        train_idx = rest[_stratified_take(y[rest], n_train, rng)]
        return Dataset(X[train_idx], y[train_idx], X[test_idx], y[test_idx], 10, "mnist-subset")
    tr = _stratified_take(ytr, n_train, rng)
    te = _stratified_take(yte, n_test, rng)
    return Dataset(Xtr[tr], ytr[tr], Xte[te], yte[te], 10, "mnist")


def export_bundled_mnist(root) -> Path:
    """Write the 5000-digit MNIST sample shipped with ``mlxtend`` as IDX files.

    Produces ``subset-images-idx3-ubyte.gz`` and ``subset-labels-idx1-ubyte.gz``
    under ``root``, readable by :func:`load_mnist` with ``kind="subset"``.
    """
    from mlxtend.data import mnist_data

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    X, y = mnist_data()
    write_idx_images(root / "subset-images-idx3-ubyte.gz", X.reshape(-1, 28, 28).round().astype(np.uint8))
    write_idx_labels(root / "subset-labels-idx1-ubyte.gz", y.astype(np.uint8))
    return root


def make_blobs(n_per_class: int = 100, dim: int = 4, classes: int = 2, separation: float = 6.0,
               spread: float = 1.0, test_fraction: float = 0.25, seed: int = 0) -> Dataset:
    """Gaussian clusters, rejection-sampled so each point is nearer its own centre.

    Nearest-centre regions are separated by hyperplanes, so the result is
    linearly separable by construction.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(classes, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres *= separation / 2.0
    chunks = []
    for c in range(classes):
        kept = np.empty((0, dim))
        while len(kept) < n_per_class:
            cand = centres[c] + spread * rng.normal(size=(n_per_class, dim))
            d = np.linalg.norm(cand[:, None, :] - centres[None, :, :], axis=2)
            own = d[:, c].copy()
            d[:, c] = np.inf
            kept = np.concatenate([kept, cand[own + 0.5 < d.min(axis=1)]])
        chunks.append(kept[:n_per_class])
    X = np.concatenate(chunks)
    y = np.repeat(np.arange(classes), n_per_class)
    perm = rng.permutation(len(y))
    X, y = X[perm], y[perm]
    n_test = int(round(test_fraction * len(y)))
    return Dataset(X[n_test:], y[n_test:], X[:n_test], y[:n_test], classes, "blobs")
