"""Dataset loading: CIFAR-10 binary batches, MNIST IDX files, and a
deterministic synthetic dataset for smoke tests and demos.

Images come out as float32 [S, C, H, W], scaled to [0, 1] and then
channel-normalized with statistics computed from the training split;
the constants are recorded on the dataset so a run is reproducible
without hidden literals. Loaders never mutate source files and reject
truncated or oversized inputs with FormatError.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .attention import FormatError

CIFAR_TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch"]
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_PER_FILE = 10000

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049


@dataclass
class Dataset:
    images: np.ndarray  # [S, C, H, W] float32, channel-normalized
    labels: np.ndarray  # [S] int64 in [0, num_classes)
    num_classes: int
    split: str
    channel_mean: np.ndarray  # [C], computed on the training split
    channel_std: np.ndarray  # [C]

    def __len__(self) -> int:
        return len(self.images)


def _normalize_pair(train_raw: np.ndarray, test_raw: np.ndarray, train_labels, test_labels, num_classes: int):
    mean = train_raw.mean(axis=(0, 2, 3))
    std = np.maximum(train_raw.std(axis=(0, 2, 3)), 1e-8)
    norm = lambda x: ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    train = Dataset(norm(train_raw), train_labels, num_classes, "train", mean, std)
    test = Dataset(norm(test_raw), test_labels, num_classes, "test", mean, std)
    return train, test


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise FormatError(f"missing CIFAR-10 batch file {path}")
    with open(path, "rb") as f:
        blob = f.read()
    expected = CIFAR_PER_FILE * CIFAR_RECORD
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes ({CIFAR_PER_FILE} x {CIFAR_RECORD}), got {len(blob)}")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(CIFAR_PER_FILE, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} outside [0, 9]")
    images = raw[:, 1:].reshape(CIFAR_PER_FILE, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(directory: str) -> tuple[Dataset, Dataset]:
    """The six standard binary batch files -> (train 50k, test 10k) at 3x32x32."""
    train_parts = [_read_cifar_file(os.path.join(directory, name)) for name in CIFAR_TRAIN_FILES]
    test_parts = [_read_cifar_file(os.path.join(directory, name)) for name in CIFAR_TEST_FILES]
    train_raw = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    test_raw = np.concatenate([p[0] for p in test_parts])
    test_labels = np.concatenate([p[1] for p in test_parts])
    return _normalize_pair(train_raw, test_raw, train_labels, test_labels, 10)


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError(f"missing MNIST file {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic {magic}, expected {expected_magic}")
    if expected_magic == MNIST_IMAGE_MAGIC:
        if len(blob) < 16:
            raise FormatError(f"{path}: truncated IDX image header")
        rows, cols = struct.unpack(">II", blob[8:16])
        expected = 16 + count * rows * cols
        if len(blob) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
        return np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(count, rows, cols)
    expected = 8 + count
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(blob)}")
    return np.frombuffer(blob, dtype=np.uint8, offset=8)


def _mnist_split(directory: str, prefix: str) -> tuple[np.ndarray, np.ndarray]:
    images = _read_idx(os.path.join(directory, f"{prefix}-images-idx3-ubyte"), MNIST_IMAGE_MAGIC)
    labels = _read_idx(os.path.join(directory, f"{prefix}-labels-idx1-ubyte"), MNIST_LABEL_MAGIC).astype(np.int64)
    if len(images) != len(labels):
        raise FormatError(f"{prefix}: {len(images)} images but {len(labels)} labels")
    h, w = images.shape[1:]
    pad_h, pad_w = (32 - h) // 2, (32 - w) // 2
    padded = np.zeros((len(images), 1, 32, 32), dtype=np.float32)
    padded[:, 0, pad_h : pad_h + h, pad_w : pad_w + w] = images.astype(np.float32) / 255.0
    return padded, labels


def load_mnist(directory: str) -> tuple[Dataset, Dataset]:
    """IDX files -> (train 60k, test 10k), zero-padded from 28x28 to 1x32x32."""
    train_raw, train_labels = _mnist_split(directory, "train")
    test_raw, test_labels = _mnist_split(directory, "t10k")
    return _normalize_pair(train_raw, test_raw, train_labels, test_labels, 10)


def make_synthetic(
    n_train: int = 2000,
    n_test: int = 500,
    num_classes: int = 10,
    image_size: int = 32,
    channels: int = 3,
    noise: float = 0.35,
    seed: int = 1234,
) -> tuple[Dataset, Dataset]:
    """Learnable stand-in dataset: per-class low-frequency prototypes plus noise.

    Samples are deterministic under the seed and live in [0, 1] before
    normalization, mirroring the real loaders.
    """
    rng = np.random.default_rng(seed)
    coarse = max(2, image_size // 8)
    reps = image_size // coarse
    protos = rng.normal(size=(num_classes, channels, coarse, coarse))
    protos = np.kron(protos, np.ones((1, 1, reps, reps)))

    def sample(n):
        labels = rng.integers(0, num_classes, size=n)
        imgs = protos[labels] * 0.2 + rng.normal(scale=noise, size=(n, channels, image_size, image_size)) * 0.2
        return np.clip(0.5 + imgs, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)

    train_raw, train_labels = sample(n_train)
    test_raw, test_labels = sample(n_test)
    return _normalize_pair(train_raw, test_raw, train_labels, test_labels, num_classes)
