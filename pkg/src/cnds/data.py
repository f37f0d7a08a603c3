"""Datasets: IDX files, a seeded synthetic generator, augmentation, batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_UBYTE = 0x08


class IDXError(ValueError):
    """Malformed or inconsistent IDX input."""


@dataclass(frozen=True)
class Dataset:
    """Images ``(count, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (count, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def head(self, n: int) -> "Dataset":
        return self.subset(slice(0, n))


# ----------------------------------------------------------------------------
# IDX


def _read_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IDXError(f"{what}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IDXError(
            f"{what}: truncated payload ({len(raw) - header} of {size} bytes)"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def encode_idx(array) -> bytes:
    """Serialize an unsigned-byte array in IDX layout."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError(f"IDX payload must be uint8, got {array.dtype}")
    header = bytes([0, 0, _UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def load_idx(images_path, labels_path, num_classes=None) -> Dataset:
    """Load an IDX image/label file pair; pixels are scaled by 1/255."""
    images = _read_idx(Path(images_path).read_bytes(), IMAGE_MAGIC, str(images_path))
    labels = _read_idx(Path(labels_path).read_bytes(), LABEL_MAGIC, str(labels_path))
    if len(images) != len(labels):
        raise IDXError(
            f"count mismatch: {len(images)} images vs {len(labels)} labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, num_classes)


def save_idx(dataset: Dataset, images_path, labels_path):
    """Write ``dataset`` as an IDX pair, quantizing pixels to bytes.

    Single-channel images are written as ``(count, H, W)``.
    """
    images = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    if images.shape[1] == 1:
        images = images[:, 0]
    Path(images_path).write_bytes(encode_idx(images))
    Path(labels_path).write_bytes(encode_idx(dataset.labels.astype(np.uint8)))


# ----------------------------------------------------------------------------
# Synthetic data


def _class_patterns(pattern_seed, shape, num_classes, blobs=3):
    c, h, w = shape
    rng = np.random.default_rng(pattern_seed)
    yy, xx = np.mgrid[0:h, 0:w]
    patterns = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            for _ in range(blobs):
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                sigma = rng.uniform(0.12, 0.25) * max(h, w)
                patterns[k, ch] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return np.clip(patterns / blobs * 1.5, 0, 1)


def synthetic_dataset(seed, count, shape=(1, 28, 28), num_classes=10,
                      difficulty=1.0, pattern_seed=0) -> Dataset:
    """Class-conditional Gaussian-blob images with balanced labels.

    Each class has a fixed smooth blob pattern (drawn from ``pattern_seed``,
    so train and validation splits built with different ``seed`` share
    them).  Samples add Gaussian pixel noise of standard deviation
    ``0.5 * difficulty`` and are clipped to [0, 1].
    """
    if count < num_classes:
        raise ValueError(f"count {count} smaller than number of classes {num_classes}")
    shape = tuple(shape)
    patterns = _class_patterns(pattern_seed, shape, num_classes)
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % num_classes
    rng.shuffle(labels)
    images = patterns[labels]
    if difficulty > 0:
        images = images + rng.normal(0.0, 0.5 * difficulty, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes)


# ----------------------------------------------------------------------------
# Augmentation and batching


def augment(image, crop_size, flip, rng=None):
    """Crop a ``crop_size`` square and optionally mirror the width axis.

    With ``rng`` the crop offset is random; without it the crop is centred.
    Works on ``(C, H, W)`` or ``(H, W)`` arrays.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if crop_size > h or crop_size > w:
        raise ValueError(f"crop {crop_size} larger than image {h}x{w}")
    if rng is None:
        top, left = (h - crop_size) // 2, (w - crop_size) // 2
    else:
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
    out = image[..., top:top + crop_size, left:left + crop_size]
    if flip:
        out = out[..., ::-1]
    return out.copy()


def center_crop(images, crop_size):
    h, w = images.shape[-2:]
    top, left = (h - crop_size) // 2, (w - crop_size) // 2
    return images[..., top:top + crop_size, left:left + crop_size]


def epoch_permutation(count, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(count)


def batches(dataset: Dataset, batch_size, seed=0, epoch=0):
    """Yield ``(images, labels)`` over a permutation fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_permutation(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
