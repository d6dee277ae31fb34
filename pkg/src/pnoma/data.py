"""Image datasets (CIFAR-10 binary batches, synthetic blobs) and co-transmission tuples."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .numcore import ContractError, RngStream

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
VALIDATION_FRACTION = 0.1  # 50000 -> 45000 / 5000


class DataFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    split: str
    source: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ContractError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


@dataclass
class TupleIndexSet:
    indices: np.ndarray  # (T, n) int64

    @property
    def n(self) -> int:
        return self.indices.shape[1]

    @property
    def T(self) -> int:
        return self.indices.shape[0]


def read_cifar_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch: per record one label byte then 3072 pixel bytes in R, G, B planes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD_BYTES:
        whole = len(raw) // CIFAR_RECORD_BYTES
        raise DataFormatError(f"{path}: truncated record at byte offset "
                              f"{whole * CIFAR_RECORD_BYTES} (file has {len(raw)} bytes)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10(path: str | os.PathLike, split: str, seed: int = 0) -> ImageDataset:
    """Load ``train``/``val``/``test`` from a directory of CIFAR-10 ``.bin`` batches.

    The official training files are shuffled with ``seed`` and the last 10% become
    the validation split.
    """
    if split not in ("train", "val", "test"):
        raise ContractError(f"unknown split {split!r}")
    if split == "test":
        images, _ = read_cifar_batch(os.path.join(path, CIFAR_TEST_FILE))
        return ImageDataset(images, split, "cifar10")
    files = [os.path.join(path, f) for f in CIFAR_TRAIN_FILES]
    files = [f for f in files if os.path.exists(f)]
    if not files:
        raise DataFormatError(f"no CIFAR-10 training batches under {path}")
    images = np.concatenate([read_cifar_batch(f)[0] for f in files])
    order = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed))).permutation(len(images))
    n_val = int(round(len(images) * VALIDATION_FRACTION))
    chosen = order[len(images) - n_val:] if split == "val" else order[:len(images) - n_val]
    return ImageDataset(images[np.sort(chosen)], split, "cifar10")


def gen_synthetic(count: int, width: int, height: int, stream: RngStream,
                  split: str = "train") -> ImageDataset:
    """Smooth colour images: a random linear gradient plus a few Gaussian blobs."""
    if count < 1:
        raise ContractError("count must be >= 1")
    g = stream.generator
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    images = np.empty((count, 3, height, width))
    for i in range(count):
        base = g.uniform(0.2, 0.8, size=3)
        slope = g.uniform(-0.3, 0.3, size=(3, 2))
        img = base[:, None, None] + slope[:, 0, None, None] * (xx - 0.5) + slope[:, 1, None, None] * (yy - 0.5)
        for _ in range(int(g.integers(2, 5))):
            cx, cy = g.uniform(0, 1, size=2)
            radius = g.uniform(0.08, 0.3)
            amp = g.uniform(-0.6, 0.6, size=3)
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius ** 2))
            img = img + amp[:, None, None] * blob
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, split, "synthetic")


def build_train_tuples(N: int, n: int, T: int, stream: RngStream) -> TupleIndexSet:
    """Permute ``[0, nT)``, reduce modulo ``N`` and reshape to ``T x n``.

    Every dataset index therefore appears ``floor(nT/N)`` or ``ceil(nT/N)`` times.
    """
    if not (N >= n >= 1) or T < 1:
        raise ContractError(f"need N >= n >= 1 and T >= 1, got N={N}, n={n}, T={T}")
    t = stream.generator.permutation(n * T) % N
    return TupleIndexSet(t.reshape(T, n).astype(np.int64))


def build_eval_tuples(M: int, n: int, stream: RngStream) -> TupleIndexSet:
    """Each evaluation image is used exactly once; a remainder of ``M mod n`` images is dropped."""
    if n < 1 or M < n:
        raise ContractError(f"need at least n={n} evaluation images, got {M}")
    t = stream.generator.permutation(M)
    rows = M // n
    if rows * n != M:
        log.warning("dropping %d evaluation images (%d not divisible by %d users)", M - rows * n, M, n)
    return TupleIndexSet(t[:rows * n].reshape(rows, n).astype(np.int64))
