"""Synthetic and IDX-format image datasets, plus calibration sampling."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DEFAULT_N_CALIB = 64
DEFAULT_N_RECON = 1024


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32
    labels: np.ndarray  # [n] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("dataset must hold at least one sample")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)


def _class_patterns(num_classes: int, image_size: int, channels: int, pattern_seed: int, blobs: int = 3) -> np.ndarray:
    rng = np.random.default_rng(pattern_seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    pats = np.zeros((num_classes, channels, image_size, image_size))
    for k in range(num_classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * image_size
            width = rng.uniform(0.08, 0.2) * image_size
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            amp = rng.uniform(-1.0, 1.0, size=channels)
            pats[k] += amp[:, None, None] * bump
    return pats


def make_synthetic(
    num_classes: int,
    n: int,
    image_size: int,
    seed: int,
    channels: int = 3,
    noise: float = 0.5,
    max_shift: int = 2,
    class_sep: float = 1.0,
    pattern_seed: int = 1234,
    split: str = "train",
) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a fixed blob pattern (drawn from ``pattern_seed``); a
    sample is its class pattern with random gain, a small random shift and
    additive Gaussian noise. ``class_sep`` < 1 mixes a shared pattern into
    every class, shrinking the margins between classes. Labels are drawn
    uniformly at random.
    """
    if min(num_classes, n, image_size, channels) <= 0:
        raise ValueError("num_classes, n, image_size and channels must be positive")
    pats = _class_patterns(num_classes + 1, image_size, channels, pattern_seed)
    pats = pats[1:] * class_sep + pats[0] * (1.0 - class_sep)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    gain = rng.uniform(0.7, 1.3, size=n)
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    images = np.empty((n, channels, image_size, image_size))
    for i in range(n):
        images[i] = np.roll(pats[labels[i]] * gain[i], tuple(shifts[i]), axis=(1, 2))
    images += noise * rng.standard_normal(images.shape)
    return Dataset(images.astype(np.float32), labels.astype(np.int64), num_classes, split)


# IDX --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, expected_magic: int, path) -> np.ndarray:
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for a header (offset 0, {len(buf)} bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"{path}: truncated header at offset {len(buf)}, expected {header} bytes")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = header + int(np.prod(dims))
    if len(buf) < expected:
        raise IdxFormatError(
            f"{path}: truncated payload at offset {len(buf)}: expected {expected} bytes, got {len(buf)}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def _fit(images: np.ndarray, size: int) -> np.ndarray:
    """Center-pad smaller images; nearest-neighbour resample larger ones."""
    h, w = images.shape[-2:]
    if h > size or w > size:
        ys = (np.arange(size) * h / size).astype(int)
        xs = (np.arange(size) * w / size).astype(int)
        images = images[..., ys[:, None], xs[None, :]]
        h, w = size, size
    if h < size or w < size:
        top, left = (size - h) // 2, (size - w) // 2
        out = np.zeros(images.shape[:-2] + (size, size), dtype=images.dtype)
        out[..., top : top + h, left : left + w] = images
        images = out
    return images


def load_idx_images(
    images_path,
    labels_path=None,
    image_size: int | None = None,
    num_classes: int | None = None,
    split: str = "train",
) -> Dataset:
    """Parse an IDX image file (and optional label file) into a Dataset.

    Pixels are scaled to [0, 1]; images get a channel axis of size 1.
    """
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    if imgs.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 image dimensions, got {imgs.ndim}")
    if labels_path is not None:
        labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path).astype(np.int64)
        if len(labels) != len(imgs):
            raise IdxFormatError(f"label count {len(labels)} does not match image count {len(imgs)}")
    else:
        labels = np.zeros(len(imgs), dtype=np.int64)
    x = imgs.astype(np.float32)[:, None] / 255.0
    if image_size is not None:
        x = _fit(x, image_size)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(np.ascontiguousarray(x), labels, k, split)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x0801 for 1-D, 0x0803 for 3-D)."""
    a = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


# sampling ---------------------------------------------------------------------


def default_n_recon(n: int) -> int:
    return min(DEFAULT_N_RECON, n // 4)


def sample_calibration(
    data: Dataset, n_calib: int = DEFAULT_N_CALIB, n_recon: int | None = None, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Disjoint uniform subsets without replacement."""
    if n_recon is None:
        n_recon = default_n_recon(len(data))
    if n_calib < 1 or n_recon < 1:
        raise ValueError("n_calib and n_recon must be positive")
    if n_calib + n_recon > len(data):
        raise ValueError(f"need {n_calib + n_recon} samples, dataset has {len(data)}")
    perm = np.random.default_rng(seed).permutation(len(data))
    return data.subset(perm[:n_calib], "calib"), data.subset(perm[n_calib : n_calib + n_recon], "recon")
