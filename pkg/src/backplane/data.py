"""CIFAR-10 binary-format ingestion, normalization, and train-time augmentation.

Record layout: 1 label byte then 3072 channel-planar pixel bytes (1024 red,
1024 green, 1024 blue, each row-major 32x32). Pixels scale to [0,1]; the
network sees (pixel - channel mean) / channel std. Augmentation operates on
the raw [0,1] images and clips back to range before normalization.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (32, 32, 3)
TRAIN_FILES = tuple(f"data_batch_{n}.bin" for n in range(1, 6))
TEST_FILE = "test_batch.bin"
CANONICAL_TRAIN = 50000
CANONICAL_TEST = 10000

RGB_MEANS = (0.4914, 0.4822, 0.4465)
RGB_STDS = (0.2023, 0.1994, 0.2010)

PAD = 2  # each side; 32 -> 36 before the random 32x32 crop
CROP_IDENTITY = (PAD, PAD)


class DataError(IOError):
    pass


class DataFileMissingError(DataError):
    pass


class MalformedRecordError(DataError):
    pass


class MalformedLabelError(DataError):
    pass


class DatasetCountError(DataError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    data_dir: str
    val_count: int = 5000
    seed: int = 0
    rgb_means: tuple = RGB_MEANS
    rgb_stds: tuple = RGB_STDS


@dataclass
class Dataset:
    """Raw [0,1] images plus labels for the three splits, and the config."""

    config: DatasetConfig
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        means = np.asarray(self.config.rgb_means, dtype=x.dtype)
        stds = np.asarray(self.config.rgb_stds, dtype=x.dtype)
        return (x - means) / stds


def normalize_images(x: np.ndarray, config: DatasetConfig) -> np.ndarray:
    means = np.asarray(config.rgb_means, dtype=x.dtype)
    stds = np.asarray(config.rgb_stds, dtype=x.dtype)
    return (x - means) / stds


def read_record_file(path) -> tuple:
    """Decode one binary file into ([0,1] float32 images, int labels)."""
    if not os.path.exists(path):
        raise DataFileMissingError(f"missing data file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise MalformedRecordError(
            f"{path}: {raw.size} bytes is not a whole number of {RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise MalformedLabelError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}")
    planes = records[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / np.float32(255)
    return images, labels


def load_cifar10(config: DatasetConfig, strict: bool = True) -> Dataset:
    """Read the five train files and the test file, then split train/val.

    strict enforces the canonical corpus sizes (50000 train, 10000 test); the
    val split peels config.val_count examples off a seeded permutation.
    """
    xs, ys = [], []
    for name in TRAIN_FILES:
        x, y = read_record_file(os.path.join(config.data_dir, name))
        xs.append(x)
        ys.append(y)
    train_x = np.concatenate(xs)
    train_y = np.concatenate(ys)
    test_x, test_y = read_record_file(os.path.join(config.data_dir, TEST_FILE))
    if strict and (train_x.shape[0] != CANONICAL_TRAIN or test_x.shape[0] != CANONICAL_TEST):
        raise DatasetCountError(
            f"{config.data_dir}: found {train_x.shape[0]} train / {test_x.shape[0]} test records, "
            f"expected {CANONICAL_TRAIN} / {CANONICAL_TEST}"
        )
    if config.val_count >= train_x.shape[0]:
        raise DatasetCountError(
            f"val_count {config.val_count} leaves no training data out of {train_x.shape[0]}"
        )
    perm = np.random.default_rng(config.seed).permutation(train_x.shape[0])
    val_idx = perm[: config.val_count]
    train_idx = perm[config.val_count :]
    return Dataset(
        config=config,
        train_x=train_x[train_idx],
        train_y=train_y[train_idx],
        val_x=train_x[val_idx],
        val_y=train_y[val_idx],
        test_x=test_x,
        test_y=test_y,
    )


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    saturation: float = 1.0
    contrast: float = 1.0
    brightness: float = 0.0
    crop: tuple = CROP_IDENTITY

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        saturation=float(rng.uniform(0.0, 2.0)),
        contrast=float(rng.uniform(0.4, 1.6)),
        brightness=float(rng.uniform(-0.5, 0.5)),
        crop=(int(rng.integers(0, 2 * PAD + 1)), int(rng.integers(0, 2 * PAD + 1))),
    )


def augment_with_params(x: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Photometric jitter, zero-pad to 36x36, crop, clip to [0,1].

    Each stage short-circuits at its identity parameter so the identity draw
    reproduces the input bit for bit.
    """
    out = x
    if params.flip:
        out = out[:, ::-1, :]
    if params.saturation != 1.0:
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + out.dtype.type(params.saturation) * (out - gray)
    if params.contrast != 1.0:
        mean = out.mean(axis=(0, 1), keepdims=True)
        out = mean + out.dtype.type(params.contrast) * (out - mean)
    if params.brightness != 0.0:
        out = out + out.dtype.type(params.brightness)
    oy, ox = params.crop
    padded = np.pad(out, ((PAD, PAD), (PAD, PAD), (0, 0)))
    out = padded[oy : oy + x.shape[0], ox : ox + x.shape[1], :]
    return np.clip(out, 0.0, 1.0)


def augment(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return augment_with_params(x, draw_augment_params(rng))
