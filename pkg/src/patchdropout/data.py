"""TID image files, split files and the seeded synthetic benchmark.

TID layout (little-endian)::

    b"TID1" | u32 count | u16 H | u16 W | u8 C | u16 K
    count x ( H*W*C pixel bytes in (row, col, channel) order | u16 label )

Split layout: u32 n_train, u32 n_val, u32 n_test, then the three u32 index
arrays in that order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, LabelOutOfRange, TruncatedFile

TID_MAGIC = b"TID1"
_HEADER = struct.Struct("<4sIHHBH")


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [count, C, H, W]
    labels: np.ndarray  # int64 [count]
    num_classes: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes})")
        if not self.splits:
            self.splits = {"train": np.arange(len(self.labels)), "val": np.arange(0), "test": np.arange(0)}
        seen: set[int] = set()
        for name, idx in self.splits.items():
            s = set(int(i) for i in idx)
            if seen & s:
                raise ValueError(f"split {name!r} overlaps another split")
            if s and (min(s) < 0 or max(s) >= len(self.labels)):
                raise ValueError(f"split {name!r} indexes outside the dataset")
            seen |= s

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]


def encode_tid(images: np.ndarray, labels: np.ndarray, num_classes: int) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, C, H, W = images.shape
    labels = np.asarray(labels)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    rec = np.zeros(n, dtype=[("px", np.uint8, H * W * C), ("label", "<u2")])
    rec["px"] = images.transpose(0, 2, 3, 1).reshape(n, -1)
    rec["label"] = labels
    return _HEADER.pack(TID_MAGIC, n, H, W, C, num_classes) + rec.tobytes()


def decode_tid(blob: bytes) -> tuple[np.ndarray, np.ndarray, int]:
    if len(blob) < 4 or blob[:4] != TID_MAGIC:
        raise BadMagic("not a TID1 file")
    if len(blob) < _HEADER.size:
        raise TruncatedFile("TID header is incomplete")
    _, n, H, W, C, K = _HEADER.unpack_from(blob)
    dtype = np.dtype([("px", np.uint8, H * W * C), ("label", "<u2")])
    need = _HEADER.size + n * dtype.itemsize
    if len(blob) < need:
        raise TruncatedFile(f"TID file holds {len(blob)} bytes, header promises {need}")
    rec = np.frombuffer(blob, dtype=dtype, count=n, offset=_HEADER.size)
    labels = rec["label"].astype(np.int64)
    if n and labels.max() >= K:
        raise LabelOutOfRange(f"label {labels.max()} outside [0, {K})")
    images = rec["px"].reshape(n, H, W, C).transpose(0, 3, 1, 2).copy()
    return images, labels, K


def encode_splits(splits: dict[str, np.ndarray]) -> bytes:
    parts = [np.asarray(splits.get(s, []), dtype="<u4") for s in ("train", "val", "test")]
    return struct.pack("<III", *(len(p) for p in parts)) + b"".join(p.tobytes() for p in parts)


def decode_splits(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 12:
        raise TruncatedFile("split header is incomplete")
    counts = struct.unpack_from("<III", blob)
    if len(blob) < 12 + 4 * sum(counts):
        raise TruncatedFile("split file shorter than its counts")
    out, offset = {}, 12
    for name, c in zip(("train", "val", "test"), counts):
        out[name] = np.frombuffer(blob, dtype="<u4", count=c, offset=offset).astype(np.int64)
        offset += 4 * c
    return out


def split_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".split")


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(encode_tid(ds.images, ds.labels, ds.num_classes))
    split_path(path).write_bytes(encode_splits(ds.splits))


def load_dataset(path) -> Dataset:
    """Read a TID file plus its ``.split`` companion when present."""
    images, labels, K = decode_tid(Path(path).read_bytes())
    sp = split_path(path)
    splits = decode_splits(sp.read_bytes()) if sp.exists() else {}
    return Dataset(images, labels, K, splits)


# --------------------------------------------------------------------------
# synthetic benchmark

CLASS_NAMES = ("horizontal", "vertical", "diagonal", "antidiagonal")
ORIENTATIONS = (0.0, 90.0, 45.0, 135.0)


def synthetic_images(labels: np.ndarray, size: int, rng: np.random.Generator, noise: float = 0.2) -> np.ndarray:
    """Scattered bright bar segments whose orientation is set by the class.

    Classes 0-3 orient the bars at 0, 90, 45 and 135 degrees (+-10 degree
    jitter). Each image holds 5-8 segments of random position, length and
    brightness over Gaussian pixel noise, so a single 4x4 patch is weak
    evidence and the label is read off many patches. Horizontal flips swap
    classes 2 and 3; do not train with flip augmentation on this data.
    """
    n = len(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, size, size))
    for i in range(n):
        theta = np.deg2rad(ORIENTATIONS[labels[i]] + rng.uniform(-10, 10))
        s, c = np.sin(theta), np.cos(theta)
        bars = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(5, 9))):
            cy, cx = rng.uniform(0, size, 2)
            half_len = rng.uniform(4, 8)
            along = (yy - cy) * s + (xx - cx) * c
            across = (xx - cx) * s - (yy - cy) * c
            bars |= (np.abs(along) <= half_len) & (np.abs(across) <= 0.8)
        level = 0.6 * rng.uniform(0.6, 1.0)
        out[i] = 0.15 + level * bars + noise * rng.standard_normal((size, size))
    return np.clip(np.round(out * 255), 0, 255).astype(np.uint8)[:, None]


def make_synthetic(
    seed: int = 0,
    n_train: int = 4000,
    n_val: int = 500,
    n_test: int = 500,
    size: int = 32,
    noise: float = 0.2,
) -> Dataset:
    """The 4-class desk-scale benchmark with balanced labels and fixed splits."""
    rng = np.random.default_rng(seed)
    total = n_train + n_val + n_test
    labels = rng.permutation(np.arange(total) % len(CLASS_NAMES))
    images = synthetic_images(labels, size, rng, noise)
    idx = np.arange(total)
    splits = {"train": idx[:n_train], "val": idx[n_train : n_train + n_val], "test": idx[n_train + n_val :]}
    return Dataset(images, labels.astype(np.int64), len(CLASS_NAMES), splits)
