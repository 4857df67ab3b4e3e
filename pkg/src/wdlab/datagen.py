"""Synthetic task pairs with orthogonal inputs, sin labelers, zero-pad
orthogonalization of real datasets, and an IDX (MNIST-style) reader."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError
from .merging import cross_task_epsilon
from .model import Dataset
from .rng import stream

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True)
class TaskSpec:
    """``n`` unit-norm inputs, Gaussian on the coordinates in ``subspace``,
    labelled by ``sign(sin(c <W, x>))`` with a task-specific ``W ~ N(0, I_d)``."""

    d: int
    n: int
    subspace: tuple
    label_freq: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subspace", tuple(int(i) for i in self.subspace))
        if self.n < 1 or self.d < 1:
            raise InvalidInputError("d and n must be positive")
        if not self.subspace:
            raise InvalidInputError("subspace is empty")
        if len(set(self.subspace)) != len(self.subspace):
            raise InvalidInputError("subspace has repeated coordinates")
        if min(self.subspace) < 0 or max(self.subspace) >= self.d:
            raise InvalidInputError(f"subspace must lie in [0, {self.d})")
        if not self.label_freq > 0:
            raise InvalidInputError("label frequency must be positive")


def halves(d: int) -> tuple[tuple, tuple]:
    """First and second half of the coordinates."""
    return tuple(range(d // 2)), tuple(range(d // 2, d))


def labeler_weights(spec: TaskSpec, role: str = "a") -> np.ndarray:
    return stream(spec.seed, "labeler", role).normal(size=spec.d)


def sin_labels(X, w: np.ndarray, c: float = 1.0) -> np.ndarray:
    """``2 * 1(sigmoid(sin(c <w, x>)) >= 1/2) - 1``, i.e. sign with ties to +1."""
    return np.where(np.sin(c * (np.atleast_2d(X) @ w)) >= 0.0, 1.0, -1.0)


def sample_inputs(spec: TaskSpec, n: int, *names) -> np.ndarray:
    rng = stream(spec.seed, *names)
    X = np.zeros((n, spec.d))
    X[:, list(spec.subspace)] = rng.normal(size=(n, len(spec.subspace)))
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise InvalidInputError("drew a zero input")  # probability zero
    return X / norms


def gen_task(spec: TaskSpec, role: str = "a") -> Dataset:
    X = sample_inputs(spec, spec.n, "inputs", role)
    return Dataset(X, sin_labels(X, labeler_weights(spec, role), spec.label_freq))


def held_out(spec: TaskSpec, n: int, role: str = "a") -> Dataset:
    """Fresh draws from the same input distribution and labeler."""
    X = sample_inputs(spec, n, "heldout", role)
    return Dataset(X, sin_labels(X, labeler_weights(spec, role), spec.label_freq))


def gen_clusters(d: int, n: int, noise: float, seed: int = 0) -> Dataset:
    """Two antipodal clusters ``+-v`` with Gaussian jitter, projected to the sphere.

    Labels alternate +1/-1 by index and follow the cluster sign.
    """
    if d < 1 or n < 1 or noise < 0:
        raise InvalidInputError("need d, n >= 1 and noise >= 0")
    rng = stream(seed, "clusters")
    v = rng.normal(size=d)
    v /= np.linalg.norm(v)
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    X = y[:, None] * v + noise * rng.normal(size=(n, d))
    return Dataset(X / np.linalg.norm(X, axis=1, keepdims=True), y)


@dataclass
class TaskPair:
    data_a: Dataset
    data_b: Dataset
    eps: float


def gen_task_pair(spec_a: TaskSpec, spec_b: TaskSpec) -> TaskPair:
    if spec_a.d != spec_b.d:
        raise InvalidInputError("tasks must share the ambient dimension")
    a, b = gen_task(spec_a, "a"), gen_task(spec_b, "b")
    return TaskPair(a, b, cross_task_epsilon(a.X, b.X))


def pad_orthogonalize(data_a: Dataset, data_b: Dataset, invert_b: bool = False) -> TaskPair:
    """Append zeros to task-a inputs and prepend zeros to task-b inputs."""
    if data_a.d != data_b.d:
        raise InvalidInputError("datasets differ in input dimension")
    za, zb = np.zeros((data_a.n, data_a.d)), np.zeros((data_b.n, data_b.d))
    a = Dataset(np.hstack([data_a.X, za]), data_a.y)
    b = Dataset(np.hstack([zb, data_b.X]), -data_b.y if invert_b else data_b.y)
    return TaskPair(a, b, cross_task_epsilon(a.X, b.X))


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (optionally gzipped).

    Images (magic 0x803) come back as float64 in [0, 1] with shape
    (count, rows, cols); labels (magic 0x801) as a uint8 vector.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError("file too short for the magic number", 0, "magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"unexpected magic 0x{magic:08x}", 0, "magic")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated dimension header", len(raw), "dims")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + count:
        raise FormatError(f"expected {count} data bytes, found {len(raw) - header}", len(raw), "data")
    if len(raw) > header + count:
        raise FormatError("trailing bytes after data", header + count, "data")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == IDX_LABELS:
        return data.copy()
    return data.astype(np.float64) / 255.0


def binary_labels(labels) -> np.ndarray:
    """Classes 0-4 become -1 and classes 5-9 become +1."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise InvalidInputError("class labels must lie in 0..9")
    return np.where(labels < 5, -1.0, 1.0)


def idx_dataset(images_path, labels_path, n: int = 10, seed: int = 0, offset: int = 0) -> Dataset:
    """Random size-``n`` binary dataset from an IDX image/label pair.

    Images are flattened and scaled to the unit sphere. ``offset`` skips a
    prefix of the files so that two tasks can use disjoint samples.
    """
    images, labels = load_idx(images_path), load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise InvalidInputError("image and label files do not match")
    pool = np.arange(offset, images.shape[0])
    if n > pool.size:
        raise InvalidInputError(f"requested {n} samples, only {pool.size} available")
    idx = np.sort(stream(seed, "idx_subsample", offset).choice(pool, size=n, replace=False))
    X = images[idx].reshape(n, -1)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = X / np.where(norms == 0.0, 1.0, norms)
    return Dataset(X, binary_labels(labels[idx]))


def write_dataset_csv(data: Dataset, path) -> None:
    """One row per example: label, then coordinates."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *(f"x{j}" for j in range(data.d))])
        for x, y in zip(data.X, data.y):
            w.writerow([int(y), *(repr(float(v)) for v in x)])
