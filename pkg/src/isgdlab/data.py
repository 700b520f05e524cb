"""Dataset ingestion and construction.

Image files use the IDX binary layout: a big-endian header (magic 2051 for
images, 2049 for labels, then one 4-byte size per dimension) followed by
unsigned bytes. Files may be gzip-compressed; readers sniff the two-byte
gzip signature.

The training task is a two-class subset of a handwritten-digit corpus:
a balanced seeded draw for training, all matching items for evaluation.
Synthetic Gaussian blobs provide a fast substrate for property tests.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
ENV_DATA_DIR = "ISGDLAB_DATA"


class IdxFormatError(ValueError):
    """Malformed IDX payload; the message carries the failing byte offset."""


def _read_be_u32(data: bytes, offset: int, what: str) -> int:
    if len(data) < offset + 4:
        raise IdxFormatError(
            f"truncated at offset {offset}: {what} needs 4 bytes, "
            f"only {len(data) - offset} left"
        )
    return int.from_bytes(data[offset : offset + 4], "big")


def parse_idx_images(data: bytes) -> np.ndarray:
    """Decode an image IDX payload to float64 [n, rows, cols] in [0, 1]."""
    magic = _read_be_u32(data, 0, "magic")
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad magic {magic} at offset 0, expected {IMAGE_MAGIC}")
    n = _read_be_u32(data, 4, "image count")
    rows = _read_be_u32(data, 8, "row count")
    cols = _read_be_u32(data, 12, "column count")
    if n == 0 or rows == 0 or cols == 0:
        raise IdxFormatError(f"degenerate dimensions {n}x{rows}x{cols} in header")
    expected = 16 + n * rows * cols
    if len(data) != expected:
        raise IdxFormatError(
            f"payload length {len(data)} does not match header at offset 16: "
            f"{n}x{rows}x{cols} images need {expected} bytes"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return pixels.reshape(n, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode a label IDX payload to an int array."""
    magic = _read_be_u32(data, 0, "magic")
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad magic {magic} at offset 0, expected {LABEL_MAGIC}")
    n = _read_be_u32(data, 4, "label count")
    if n == 0:
        raise IdxFormatError("degenerate label count 0 in header")
    expected = 8 + n
    if len(data) != expected:
        raise IdxFormatError(
            f"payload length {len(data)} does not match header at offset 8: "
            f"{n} labels need {expected} bytes"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.intp)


def encode_idx_images(images: np.ndarray) -> bytes:
    """Inverse of parse_idx_images for uint8 image stacks [n, rows, cols]."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"expected [n, rows, cols], got shape {images.shape}")
    if images.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {images.dtype}")
    n, rows, cols = images.shape
    header = b"".join(
        v.to_bytes(4, "big") for v in (IMAGE_MAGIC, n, rows, cols)
    )
    return header + images.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError(f"expected 1-D labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("labels must fit in an unsigned byte")
    header = LABEL_MAGIC.to_bytes(4, "big") + labels.size.to_bytes(4, "big")
    return header + labels.astype(np.uint8).tobytes()


def read_idx_file(path) -> bytes:
    """Raw IDX bytes from a plain or gzip-compressed file."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


@dataclass(frozen=True)
class Dataset:
    """Immutable (inputs, labels) pair with a descriptive name.

    inputs is [n, ...] float64; labels is [n] ints in [0, n_classes).
    """

    inputs: np.ndarray
    labels: np.ndarray
    name: str
    n_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.intp)
        if inputs.shape[0] < 1:
            raise ValueError("dataset needs at least one item")
        if labels.shape != (inputs.shape[0],):
            raise ValueError(
                f"{inputs.shape[0]} inputs but labels have shape {labels.shape}"
            )
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes - 1}]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


def _split_file(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        candidate = directory / name
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"neither {stem} nor {stem}.gz found in {directory}")


def load_split(directory, split: str):
    """Images and labels for one split ('train' or 't10k') from a directory
    holding the four standard IDX files, compressed or not."""
    directory = Path(directory)
    if split not in ("train", "t10k"):
        raise ValueError(f"split must be 'train' or 't10k', got {split!r}")
    images = parse_idx_images(read_idx_file(_split_file(directory, f"{split}-images-idx3-ubyte")))
    labels = parse_idx_labels(read_idx_file(_split_file(directory, f"{split}-labels-idx1-ubyte")))
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{split}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    return images, labels


def binary_subset(
    images, labels, digits=(0, 1), n_train: int = 100, seed: int = 0
) -> Dataset:
    """Balanced two-class training set: n_train/2 seeded draws per digit,
    without replacement, labels remapped to 0/1, order shuffled."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(digits) != 2 or digits[0] == digits[1]:
        raise ValueError(f"digits must be two distinct classes, got {digits}")
    if n_train < 2 or n_train % 2 != 0:
        raise ValueError(f"n_train must be even and >= 2, got {n_train}")
    rng = np.random.default_rng(seed)
    need = n_train // 2
    picked = []
    new_labels = []
    for cls, digit in enumerate(digits):
        pool = np.flatnonzero(labels == digit)
        if pool.size < need:
            raise ValueError(
                f"need {need} items of digit {digit}, pool has only {pool.size}"
            )
        chosen = rng.choice(pool, size=need, replace=False)
        picked.append(chosen)
        new_labels.append(np.full(need, cls, dtype=np.intp))
    idx = np.concatenate(picked)
    y = np.concatenate(new_labels)
    perm = rng.permutation(n_train)
    return Dataset(
        inputs=images[idx][perm],
        labels=y[perm],
        name=f"digits{digits[0]}{digits[1]}-train-n{n_train}-seed{seed}",
        n_classes=2,
    )


def select_digits(images, labels, digits=(0, 1)) -> Dataset:
    """Every item of the named digits, in file order, labels remapped to
    0/1. Used for evaluation splits, which are taken whole."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(digits) != 2 or digits[0] == digits[1]:
        raise ValueError(f"digits must be two distinct classes, got {digits}")
    mask = (labels == digits[0]) | (labels == digits[1])
    if not mask.any():
        raise ValueError(f"no items of digits {digits} present")
    y = np.where(labels[mask] == digits[1], 1, 0).astype(np.intp)
    return Dataset(
        inputs=images[mask],
        labels=y,
        name=f"digits{digits[0]}{digits[1]}-all",
        n_classes=2,
    )


def synthetic_blobs(n: int, dim: int, separation: float, seed: int = 0) -> Dataset:
    """Two unit-variance Gaussian clusters of n/2 points each, centered at
    -separation/2 and +separation/2 along axis 0."""
    if n < 2 or n % 2 != 0:
        raise ValueError(f"n must be even and >= 2, got {n}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, dim))
    half = n // 2
    x[:half, 0] -= separation / 2.0
    x[half:, 0] += separation / 2.0
    y = np.concatenate([np.zeros(half, dtype=np.intp), np.ones(half, dtype=np.intp)])
    return Dataset(
        inputs=x, labels=y, name=f"blobs-n{n}-d{dim}-s{separation}-seed{seed}", n_classes=2
    )


def default_data_dir() -> Path:
    """Directory holding the four IDX files: the ISGDLAB_DATA environment
    variable if set, else data/binary01 next to this source tree."""
    env = os.environ.get(ENV_DATA_DIR)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data" / "binary01"


def load_binary_task(data_dir=None, n_train: int = 100, seed: int = 0):
    """The experiment's (train, test) pair: a balanced n_train-item training
    set and the full two-digit evaluation split.

    The evaluation split keeps every zero and one; for the standard corpus
    that is 2115 items, which the two digit populations split 980/1135
    rather than exactly in half.
    """
    directory = Path(data_dir) if data_dir is not None else default_data_dir()
    train_images, train_labels = load_split(directory, "train")
    train = binary_subset(train_images, train_labels, n_train=n_train, seed=seed)
    test_images, test_labels = load_split(directory, "t10k")
    test = select_digits(test_images, test_labels)
    return train, test
