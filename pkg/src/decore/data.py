"""Datasets: IDX (MNIST-format) files and synthetic Gaussian-blob images."""
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IdxFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray     # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray     # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split=None):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


def _read_header(buf, magic, ndim, path):
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX magic number", offset=len(buf))
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: unexpected magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxFormatError(f"{path}: truncated dimension header", offset=len(buf))
    dims = struct.unpack(">" + "I" * ndim, buf[4:end])
    need = end + int(np.prod(dims))
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated data, expected {need} bytes, found {len(buf)}",
                             offset=len(buf))
    return dims, np.frombuffer(buf, dtype=np.uint8, count=need - end, offset=end)


def load_idx(images_path, labels_path, num_classes=None, split="train"):
    """Read an IDX image/label pair. Pixels are scaled by 1/255 and images get
    a single channel axis: (N, 1, H, W)."""
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()
    (n, h, w), pix = _read_header(ibuf, IDX_IMAGES_MAGIC, 3, images_path)
    (m,), lab = _read_header(lbuf, IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise IdxFormatError(f"{images_path} holds {n} images but {labels_path} holds {m} labels", offset=4)
    images = (pix.reshape(n, 1, h, w).astype(np.float32) / np.float32(255.0))
    labels = lab.astype(np.int64)
    k = int(labels.max()) + 1 if num_classes is None and n else (num_classes or 1)
    return Dataset(images, labels, k, split)


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def write_idx(images_path, labels_path, dataset):
    """Write single-channel images as IDX (pixels quantised to uint8)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError(f"IDX images are single-channel, dataset has {c} channels")
    pix = np.clip(np.rint(dataset.images[:, 0] * 255.0), 0, 255).astype(np.uint8)
    _atomic_write(images_path, struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pix.tobytes())
    _atomic_write(labels_path, struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def blob_centers(classes, h, w):
    """Class blob centres spread evenly on a ring around the image centre."""
    ang = 2 * np.pi * np.arange(classes) / classes
    r = 0.3 * min(h, w)
    return np.stack([(h - 1) / 2 + r * np.sin(ang), (w - 1) / 2 + r * np.cos(ang)], axis=1)


def synth_data(seed=0, n=1000, classes=10, shape=(1, 16, 16), noise=0.1, jitter=0.5, width=1.5,
               split="train", class_seed=0):
    """Class-conditional Gaussian blobs.

    Class c is a bump of radius ``width`` at its own ring position, shifted by
    up to ``jitter`` pixels, plus i.i.d. pixel noise and a per-channel gain.
    Labels cycle through the classes, so every class gets n // classes
    samples and n == classes yields exactly one per class.

    ``class_seed`` fixes the class gains independently of ``seed``, so
    datasets drawn with different seeds share one distribution (use distinct
    seeds for train and eval splits).
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    c, h, w = shape
    centers = blob_centers(classes, h, w)
    gains = 0.6 + 0.4 * np.random.default_rng([class_seed, classes, c]).random((classes, c))
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    shift = rng.uniform(-jitter, jitter, size=(n, 2))
    mu = centers[labels] + shift
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (yy[None] - mu[:, 0, None, None]) ** 2 + (xx[None] - mu[:, 1, None, None]) ** 2
    bump = np.exp(-d2 / (2 * width ** 2))
    images = gains[labels][:, :, None, None] * bump[:, None]
    images = images + noise * rng.standard_normal((n, c, h, w))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), classes, split)
