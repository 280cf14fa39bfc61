"""Synthetic datasets and the IDX (MNIST-style) reader."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import ConsistencyError, DomainError, FormatError

KINDS = ("gaussian-blobs", "two-moons", "rings")
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    provenance: str = ""
    classes: int = 2

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DomainError("dataset inputs must be a non-empty n x d array")
        if y.shape != (x.shape[0],):
            raise ConsistencyError("one label per input row is required")
        if not (np.all(x >= 0.0) and np.all(x <= 1.0)):
            raise DomainError("dataset inputs must lie in [0, 1]")
        if np.any(y < 0) or np.any(y >= self.classes):
            raise DomainError(f"labels must lie in [0, {self.classes})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    return np.repeat(np.arange(classes), counts)


def _to_unit_box(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return np.clip((x - lo) / span, 0.0, 1.0)


def _raw_points(kind: str, labels: np.ndarray, d: int, margin: float, noise: float, rng) -> np.ndarray:
    n = labels.size
    classes = int(labels.max()) + 1
    if kind == "gaussian-blobs":
        if classes == 2:
            u = np.zeros(d)
            u[0] = 1.0
            # Classes differ only along the first axis; the rest is noise.
            # Along-u offsets are truncated to +-3 noise so the slab of width
            # `margin` around the separating hyperplane stays empty.
            off = np.clip(rng.standard_normal(n), -3.0, 3.0) * noise
            side = np.where(labels == 1, 1.0, -1.0)
            along = side * (margin / 2 + 3.0 * noise + off)
            x = rng.standard_normal((n, d)) * noise
            x -= np.outer(x @ u, u)
            return x + np.outer(along, u)
        centers = rng.standard_normal((classes, d))
        centers *= (margin + 6.0 * noise) / np.sqrt(2.0) / np.linalg.norm(centers, axis=1, keepdims=True).min()
        return centers[labels] + rng.standard_normal((n, d)) * noise
    if kind == "two-moons":
        t = rng.uniform(0.0, np.pi, n)
        x = np.zeros((n, max(d, 2)))
        upper = labels % 2 == 0
        x[upper, 0], x[upper, 1] = np.cos(t[upper]), np.sin(t[upper])
        x[~upper, 0], x[~upper, 1] = 1.0 - np.cos(t[~upper]), 0.5 - np.sin(t[~upper]) - margin
        x += rng.standard_normal(x.shape) * noise
        return x[:, :d] if d >= 2 else x[:, :1]
    if kind == "rings":
        radius = 1.0 + labels * (1.0 + margin)
        ang = rng.standard_normal((n, max(d, 2)))
        ang /= np.linalg.norm(ang, axis=1, keepdims=True)
        x = ang * radius[:, None] + rng.standard_normal(ang.shape) * noise
        return x[:, :d] if d >= 2 else x[:, :1]
    raise DomainError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")


def gen_synthetic(
    kind: str,
    n: int,
    d: int = 2,
    margin: float = 0.4,
    seed: int = 0,
    *,
    classes: int = 2,
    noise: float = 0.1,
    label_noise: float = 0.0,
    split: str = "train",
) -> Dataset:
    """Balanced synthetic classification data scaled into [0, 1]^d.

    ``label_noise`` flips that fraction of labels (chosen at random) to a
    different class after generation.
    """
    if kind not in KINDS:
        raise DomainError(f"unknown synthetic kind {kind!r}; expected one of {KINDS}")
    if n < 2 or n < classes:
        raise DomainError(f"need n >= max(2, classes), got n={n}, classes={classes}")
    if d < 1:
        raise DomainError("dimension must be >= 1")
    if kind != "gaussian-blobs" and classes != 2:
        raise DomainError(f"{kind} supports exactly two classes")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, classes)
    x = _raw_points(kind, labels, d, margin, noise, rng)
    order = rng.permutation(n)
    x, labels = _to_unit_box(x)[order], labels[order]
    labels = _flip(labels, label_noise, classes, rng)
    prov = f"synthetic:{kind}:n={n}:d={d}:margin={margin}:noise={noise}:label_noise={label_noise}:seed={seed}"
    return Dataset(x, labels, split, prov, classes)


def _flip(labels: np.ndarray, frac: float, classes: int, rng) -> np.ndarray:
    if frac <= 0:
        return labels
    labels = labels.copy()
    m = int(round(frac * labels.size))
    idx = rng.choice(labels.size, size=m, replace=False)
    labels[idx] = (labels[idx] + rng.integers(1, classes, size=m)) % classes
    return labels


def gen_split(kind: str, n_train: int, n_test: int, d: int = 2, margin: float = 0.4, seed: int = 0, **kw) -> tuple[Dataset, Dataset]:
    """Train and test sets drawn from one generated pool (same distribution)."""
    label_noise = kw.pop("label_noise", 0.0)
    pool = gen_synthetic(kind, n_train + n_test, d, margin, seed, **kw)
    rng = np.random.default_rng([seed, 1])
    classes = pool.classes
    train = Dataset(pool.inputs[:n_train], _flip(pool.labels[:n_train], label_noise, classes, rng), "train", pool.provenance + ":train", classes)
    test = Dataset(pool.inputs[n_train:], _flip(pool.labels[n_train:], label_noise, classes, rng), "test", pool.provenance + ":test", classes)
    return train, test


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image file (u8, [n, rows, cols]) and its label file."""
    with _open(images_path) as fh:
        raw_images = fh.read()
    with _open(labels_path) as fh:
        raw_labels = fh.read()
    if len(raw_images) < 16:
        raise FormatError(f"{images_path}: too short for an IDX image header")
    magic, n, rows, cols = struct.unpack(">IIII", raw_images[:16])
    if magic != IDX_IMAGES:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    if len(raw_labels) < 8:
        raise FormatError(f"{labels_path}: too short for an IDX label header")
    lmagic, ln = struct.unpack(">II", raw_labels[:8])
    if lmagic != IDX_LABELS:
        raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if ln != n:
        raise ConsistencyError(f"{n} images but {ln} labels")
    if len(raw_images) != 16 + n * rows * cols:
        raise FormatError(f"{images_path}: pixel payload size does not match header")
    if len(raw_labels) != 8 + n:
        raise FormatError(f"{labels_path}: label payload size does not match header")
    pixels = np.frombuffer(raw_images, dtype=">u1", offset=16).reshape(n, rows * cols)
    labels = np.frombuffer(raw_labels, dtype=">u1", offset=8).astype(np.int64)
    classes = int(labels.max()) + 1 if n else 1
    return Dataset(pixels.astype(np.float64) / 255.0, labels, split, f"idx:{images_path}", max(classes, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write u8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS, labels.size) + labels.tobytes())
