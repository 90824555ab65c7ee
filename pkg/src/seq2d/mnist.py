"""MNIST ingestion and preprocessing.

IDX files are read directly (optionally gzip-compressed). The preprocessing
order is fixed: resize, random erase, perspective (a declared no-op), normalize.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blockmap import BlockPartition, PartitionMismatchError, StateBatch

__all__ = [
    "IdxCountMismatchError",
    "IdxFormatError",
    "IdxMagicError",
    "IdxTruncatedError",
    "ImageSet",
    "MNIST_MEAN",
    "MNIST_STD",
    "SplitSpec",
    "load_idx",
    "normalize",
    "perspective_noop",
    "preprocess",
    "random_erase",
    "read_idx",
    "resize_bilinear",
    "split",
    "to_state_batches",
    "write_idx",
]

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Raw ``uint8`` payload of an IDX file, shaped by its header."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(
            f"{path}: payload has {len(raw) - header} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I" + "I" * array.ndim, magic, *array.shape) + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    path.write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


@dataclass(frozen=True, eq=False)
class ImageSet:
    images: np.ndarray  # (count, H, W) float64
    labels: np.ndarray  # (count,) uint8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError(f"images must be (count, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise IdxCountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "ImageSet":
        return ImageSet(self.images[idx], self.labels[idx], dict(self.meta))

    def flat(self) -> np.ndarray:
        """Row-major flattened images, one example per row."""
        return self.images.reshape(len(self), -1)

    def _with(self, images, step) -> "ImageSet":
        meta = dict(self.meta)
        meta["transforms"] = list(meta.get("transforms", [])) + [step]
        return ImageSet(images, self.labels, meta)


def load_idx(images_path, labels_path) -> ImageSet:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {images.shape[0]} images, {labels_path} holds {labels.shape[0]} labels")
    return ImageSet(images.astype(np.float64) / 255.0, labels.copy(),
                    {"sources": [str(images_path), str(labels_path)], "transforms": []})


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centers: src = (i + 0.5) * n_in / n_out - 0.5, clamped to the image
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(images: ImageSet, out_h: int, out_w: int) -> ImageSet:
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    h, w = images.shape
    if (h, w) == (out_h, out_w):
        return images._with(images.images.copy(), f"resize({out_h},{out_w})")
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    x = images.images
    rows = x[:, r0, :] * (1.0 - fr)[None, :, None] + x[:, r1, :] * fr[None, :, None]
    out = rows[:, :, c0] * (1.0 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]
    return images._with(out, f"resize({out_h},{out_w})")


def normalize(images: ImageSet, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> ImageSet:
    if std == 0:
        raise ValueError("std must be non-zero")
    return images._with((images.images - mean) / std, f"normalize({mean},{std})")


def _erase_rect(rng, h: int, w: int, lo: float, hi: float):
    area = rng.uniform(lo, hi) * h * w
    aspect = rng.uniform(1.0 / 3.0, 3.0)
    eh = int(min(h, max(1, round(math.sqrt(area * aspect)))))
    ew = int(min(w, max(1, round(area / eh))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    return top, left, eh, ew


def random_erase(images: ImageSet, area_frac_range=(0.02, 0.05), seed: int = 0,
                 value: float = 0.0) -> ImageSet:
    """Zero one rectangle per image.

    Area fraction is uniform in the range and the aspect ratio uniform in
    [1/3, 3]; image ``k`` draws from a generator keyed by ``(seed, k)``.
    """
    lo, hi = area_frac_range
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"need 0 < lo <= hi < 1, got {area_frac_range}")
    h, w = images.shape
    out = images.images.copy()
    for k in range(len(images)):
        rng = np.random.default_rng([int(seed), k])
        top, left, eh, ew = _erase_rect(rng, h, w, lo, hi)
        out[k, top:top + eh, left:left + ew] = value
    return images._with(out, f"random_erase({lo},{hi},seed={seed})")


def perspective_noop(images: ImageSet, distortion: float = 0.5) -> ImageSet:
    """Placeholder for the random perspective warp; returns the images unchanged."""
    return images._with(images.images, f"perspective_noop({distortion})")


def preprocess(images: ImageSet, size=None, erase=(0.02, 0.05), seed: int = 0,
               mean: float = MNIST_MEAN, std: float = MNIST_STD,
               perspective: float | None = None) -> ImageSet:
    out = images
    if size is not None:
        out = resize_bilinear(out, *size)
    if erase is not None:
        out = random_erase(out, erase, seed)
    if perspective is not None:
        out = perspective_noop(out, perspective)
    return normalize(out, mean, std)


@dataclass(frozen=True)
class SplitSpec:
    train: int
    val: int
    test: int
    seed: int = 0


def split(images: ImageSet, spec: SplitSpec):
    """Disjoint random ``(train, val, test)`` subsets."""
    need = spec.train + spec.val + spec.test
    if min(spec.train, spec.val, spec.test) < 0:
        raise ValueError("split sizes must be >= 0")
    if need > len(images):
        raise ValueError(f"split needs {need} examples, only {len(images)} available")
    order = np.random.default_rng(spec.seed).permutation(len(images))
    a, b = spec.train, spec.train + spec.val
    parts = order[:a], order[a:b], order[b:need]
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        sub = images.subset(idx)
        sub = ImageSet(sub.images, sub.labels, {**sub.meta, "split": name,
                                                 "indices": idx.tolist()})
        out.append(sub)
    return tuple(out)


def to_state_batches(images: ImageSet, partition: BlockPartition, batch_size: int = 64):
    """``[(StateBatch, labels), ...]`` with flattened images filling the leading blocks.

    The last batch may be short.
    """
    h, w = images.shape
    try:
        partition.prefix_blocks(h * w)
    except PartitionMismatchError:
        raise PartitionMismatchError(
            f"leading blocks of {list(partition.sizes)} cannot hold {h * w} pixels") from None
    flat = images.flat()
    return [(StateBatch.from_inputs(partition, flat[s:s + batch_size]),
             images.labels[s:s + batch_size])
            for s in range(0, len(images), batch_size)]
