"""Dataset parsing, synthesis, and partitioning.

On-disk formats: IDX (big-endian, ubyte payload) and the CIFAR-10 binary
layout (3073-byte records, label byte then 3072 channel-major pixel bytes).
Parsers and writers round-trip bit-exactly. Partitioners hand out disjoint
index lists; IID is a seeded permutation cut into equal chunks, non-IID is
the per-class Dirichlet split.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter

__all__ = [
    "Dataset",
    "FormatError",
    "PartitionError",
    "MNIST_ENTROPY_BITS",
    "CIFAR10_ENTROPY_BITS",
    "parse_idx",
    "write_idx_images",
    "write_idx_labels",
    "load_mnist",
    "parse_cifar10",
    "write_cifar10",
    "load_cifar10",
    "partition_iid",
    "partition_dirichlet",
    "synth_gaussian",
    "synth_images",
    "sample_batch",
]

# Average compressed bits per image used to normalize leakage fractions.
MNIST_ENTROPY_BITS = 567.0
CIFAR10_ENTROPY_BITS = 1403.0


class FormatError(ValueError):
    """Malformed on-disk payload."""


class PartitionError(ValueError):
    """Partition request that cannot be satisfied."""


@dataclass
class Dataset:
    """Images in [0,1] float64, integer labels, and entropy metadata.

    entropy_bits_per_image is the normalization denominator constant for
    leakage fractions; it is metadata, never recomputed from the pixels.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    entropy_bits_per_image: float
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")
        if not self.entropy_bits_per_image > 0:
            raise ValueError("entropy_bits_per_image must be positive")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count,
                       self.entropy_bits_per_image, name or self.name)


# ---------------------------------------------------------------------------
# IDX


def parse_idx(payload: bytes) -> np.ndarray:
    """Parse one IDX blob.

    Magic 0x00000803 (3-dim ubyte images) -> float64 [n, rows, cols] scaled
    to [0,1] (byte 255 -> 1.0). Magic 0x00000801 (1-dim ubyte labels) ->
    int64 [n]. Anything else raises FormatError("unknown IDX magic ...").
    """
    if len(payload) < 4:
        raise FormatError("IDX payload shorter than a magic word")
    (magic,) = struct.unpack(">I", payload[:4])
    if magic not in (0x00000801, 0x00000803):
        raise FormatError(f"unknown IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(payload) < header_len:
        raise FormatError(f"IDX header truncated: need {header_len} bytes, have {len(payload)}")
    dims = struct.unpack(f">{ndim}I", payload[4:header_len])
    expected = int(np.prod(dims, dtype=np.int64))
    body = payload[header_len:]
    if len(body) != expected:
        raise FormatError(f"IDX body truncated: dims {dims} need {expected} bytes, have {len(body)}")
    raw = np.frombuffer(body, dtype=np.uint8).reshape(dims)
    if magic == 0x00000801:
        return raw.astype(np.int64)
    return raw.astype(np.float64) / 255.0


def write_idx_images(images: np.ndarray) -> bytes:
    """Inverse of parse_idx for images: float [n,rows,cols] in [0,1] -> bytes."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise FormatError(f"IDX images must be [n, rows, cols], got shape {images.shape}")
    raw = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = struct.pack(">IIII", 0x00000803, *raw.shape)
    return header + raw.tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise FormatError(f"IDX labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("IDX labels must fit in a byte")
    header = struct.pack(">II", 0x00000801, labels.shape[0])
    return header + labels.astype(np.uint8).tobytes()


def load_mnist(images_path: str, labels_path: str,
               entropy_bits: float = MNIST_ENTROPY_BITS) -> Dataset:
    with open(images_path, "rb") as fh:
        images = parse_idx(fh.read())
    with open(labels_path, "rb") as fh:
        labels = parse_idx(fh.read())
    if images.ndim != 3:
        raise FormatError(f"{images_path} is not an image blob")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path} is not a label blob")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images vs {len(labels)} labels")
    return Dataset(images, labels, 10, entropy_bits, name="mnist")


# ---------------------------------------------------------------------------
# CIFAR-10 binary

_CIFAR_RECORD = 3073


def parse_cifar10(payload: bytes) -> Dataset:
    """Parse a CIFAR-10 .bin blob into images [n,3,32,32] plus labels."""
    if len(payload) == 0 or len(payload) % _CIFAR_RECORD != 0:
        raise FormatError(f"CIFAR-10 payload length {len(payload)} is not a "
                          f"multiple of {_CIFAR_RECORD}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"CIFAR-10 label byte {labels.max()} out of range 0..9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10, CIFAR10_ENTROPY_BITS, name="cifar10")


def write_cifar10(dataset: Dataset) -> bytes:
    images = np.asarray(dataset.images)
    if images.shape[1:] != (3, 32, 32):
        raise FormatError(f"CIFAR-10 images must be [n,3,32,32], got {images.shape}")
    raw = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(len(images), 3072)
    labels = dataset.labels.astype(np.uint8).reshape(-1, 1)
    return np.concatenate([labels, raw], axis=1).tobytes()


def load_cifar10(paths, entropy_bits: float = CIFAR10_ENTROPY_BITS) -> Dataset:
    blobs = []
    for path in paths:
        with open(path, "rb") as fh:
            blobs.append(fh.read())
    ds = parse_cifar10(b"".join(blobs))
    ds.entropy_bits_per_image = entropy_bits
    return ds


# ---------------------------------------------------------------------------
# Partitioning


def partition_iid(dataset: Dataset, n_users: int, seed: int) -> list[np.ndarray]:
    """Seeded permutation cut into n_users equal chunks; remainder dropped."""
    if n_users < 1:
        raise PartitionError(f"n_users must be >= 1, got {n_users}")
    per_user = len(dataset) // n_users
    if per_user < 1:
        raise PartitionError(f"{len(dataset)} samples cannot feed {n_users} users")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    perm = rng.permutation(len(dataset))[: per_user * n_users]
    return [np.sort(chunk) for chunk in perm.reshape(n_users, per_user)]


def partition_dirichlet(dataset: Dataset, n_users: int, alpha: float,
                        seed: int, max_retries: int = 100) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha * 1_N) split.

    alpha = inf is the IID sentinel and delegates to partition_iid with the
    same seed. Finite alpha redraws (bounded retries) until every user holds
    at least one sample.
    """
    if n_users < 1:
        raise PartitionError(f"n_users must be >= 1, got {n_users}")
    if not alpha > 0:
        raise PartitionError(f"alpha must be positive, got {alpha}")
    if math.isinf(alpha):
        return partition_iid(dataset, n_users, seed)
    if len(dataset) < n_users:
        raise PartitionError(f"{len(dataset)} samples cannot feed {n_users} users")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    for _ in range(max_retries):
        shares: list[list[np.ndarray]] = [[] for _ in range(n_users)]
        for cls in range(dataset.class_count):
            idx = np.flatnonzero(dataset.labels == cls)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            proportions = rng.dirichlet(alpha * np.ones(n_users))
            cuts = (np.cumsum(proportions) * len(idx)).astype(int)[:-1]
            for user, part in enumerate(np.split(idx, cuts)):
                shares[user].append(part)
        parts = [np.sort(np.concatenate(s)) if s else np.array([], dtype=np.int64)
                 for s in shares]
        if all(len(p) >= 1 for p in parts):
            return parts
    raise PartitionError(f"could not give every one of {n_users} users a sample "
                         f"in {max_retries} draws (alpha={alpha})")


# ---------------------------------------------------------------------------
# Synthetic data


def synth_gaussian(dim: int, n: int, mean, cov, seed: int,
                   entropy_bits: float = 1.0) -> Dataset:
    """n draws from N(mean, cov) as a single-class Dataset of [n, dim] rows.

    cov must be symmetric PSD (eigvalsh checked to -1e-10 tolerance); a
    singular cov is fine, sampling uses the eigen square root.
    """
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,))
    cov = np.asarray(cov, dtype=np.float64)
    if np.isscalar(cov) or cov.ndim == 0:
        cov = float(cov) * np.eye(dim)
    if cov.shape != (dim, dim):
        raise ValueError(f"cov shape {cov.shape}, expected ({dim}, {dim})")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("cov must be symmetric")
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() < -1e-10:
        raise ValueError(f"cov not PSD: min eigenvalue {eigvals.min():g}")
    root = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    rows = mean + rng.standard_normal((n, dim)) @ root.T
    return Dataset(rows, np.zeros(n, dtype=np.int64), 1, entropy_bits, name="gaussian")


def synth_images(n: int, shape: tuple[int, ...] = (28, 28), class_count: int = 10,
                 noise: float = 0.15, seed: int = 0,
                 entropy_bits: float = MNIST_ENTROPY_BITS) -> Dataset:
    """Class-template images: smoothed random template per class plus pixel
    noise, clipped to [0,1]. Labels are balanced then shuffled. Stands in for
    file-backed corpora wherever only class structure matters."""
    if n < class_count:
        raise ValueError(f"need at least {class_count} samples, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    templates = rng.uniform(0.0, 1.0, (class_count,) + tuple(shape))
    smooth_axes = tuple(range(1, templates.ndim))
    templates = uniform_filter(templates, size=5, axes=smooth_axes, mode="wrap")
    labels = rng.permutation(np.arange(n) % class_count)
    images = templates[labels] + noise * rng.standard_normal((n,) + tuple(shape))
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, class_count, entropy_bits, name="synth")


def sample_batch(indices: np.ndarray, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without replacement from a user's index list."""
    indices = np.asarray(indices)
    if batch_size > indices.size:
        raise ValueError(f"batch_size {batch_size} exceeds local dataset size {indices.size}")
    return rng.choice(indices, size=batch_size, replace=False)
