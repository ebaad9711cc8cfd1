"""Dataset containers, loaders (IDX, CSV), synthetic blobs, label noise and sharding."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Raised when an input file cannot be parsed."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabeledSet:
    examples: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    n_classes: int

    def __post_init__(self):
        x = _frozen(self.examples, np.float64)
        if x.ndim != 2:
            x = x.reshape(len(x), -1)
        y = _frozen(self.labels, np.int64)
        ids = _frozen(self.ids, np.int64)
        if not (len(x) == len(y) == len(ids)):
            raise ValueError(f"length mismatch: {len(x)} examples, {len(y)} labels, {len(ids)} ids")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("ids must be unique")
        object.__setattr__(self, "examples", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.examples.shape[1]

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(self.examples[idx], self.labels[idx], self.ids[idx], self.n_classes)

    def with_labels(self, labels) -> "LabeledSet":
        return LabeledSet(self.examples, labels, self.ids, self.n_classes)

    def unlabeled(self) -> "UnlabeledSet":
        return UnlabeledSet(self.examples, self.ids)

    def label_of(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.labels.tolist()))


@dataclass(frozen=True)
class UnlabeledSet:
    examples: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        x = _frozen(self.examples, np.float64)
        if x.ndim != 2:
            x = x.reshape(len(x), -1)
        ids = _frozen(self.ids, np.int64)
        if len(x) != len(ids):
            raise ValueError(f"length mismatch: {len(x)} examples, {len(ids)} ids")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("ids must be unique")
        object.__setattr__(self, "examples", x)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.examples.shape[1]

    def subset(self, idx) -> "UnlabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return UnlabeledSet(self.examples[idx], self.ids[idx])


@dataclass
class NoiseMask:
    # id -> clean label, for every corrupted id
    original: dict[int, int] = field(default_factory=dict)

    @property
    def corrupted(self) -> set[int]:
        return set(self.original)

    def is_corrupted(self, ids) -> np.ndarray:
        return np.array([int(i) in self.original for i in ids], dtype=bool)


# -- loaders -----------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str):
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError(f"{what}: file too short for IDX magic ({len(raw)} bytes)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise DataFormatError(f"{what}: file too short for IDX header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < need:
        raise DataFormatError(f"{what}: truncated payload, {len(payload)} of {need} bytes present")
    return dims, np.frombuffer(payload, dtype=np.uint8, count=need)


def load_idx(images_path, labels_path, max_n: int | None = None, n_classes: int | None = None) -> LabeledSet:
    """Read an IDX image/label file pair (optionally gzipped).

    Pixels are scaled by 1/255 and images flattened row-major.
    """
    (n_img, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise DataFormatError(f"image count {n_img} != label count {n_lab}")
    n = n_img if max_n is None else min(n_img, int(max_n))
    x = pixels.reshape(n_img, rows * cols)[:n].astype(np.float64) / 255.0
    y = labels[:n].astype(np.int64)
    K = n_classes if n_classes is not None else max(int(y.max()) + 1 if n else 2, 2)
    return LabeledSet(x, y, np.arange(n), K)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``[n, rows, cols]`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def _label_sort_key(values):
    try:
        return sorted(values, key=float)
    except ValueError:
        return sorted(values)


def load_csv(path, label_column) -> LabeledSet:
    """Load a headered numeric CSV. ``label_column`` is a header name or an index.

    Features are min-max scaled per column into [0, 1] (constant columns
    become 0); labels are re-indexed densely in sorted order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header required") from None
        if isinstance(label_column, int):
            li = label_column
        elif label_column in header:
            li = header.index(label_column)
        else:
            raise DataFormatError(f"{path}: no column named {label_column!r}")
        if not 0 <= li < len(header):
            raise DataFormatError(f"{path}: label column index {li} out of range")

        feats, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}: row {lineno} has {len(row)} cells, header has {len(header)}")
            raw_labels.append(row[li].strip())
            try:
                feats.append([float(c) for j, c in enumerate(row) if j != li])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {lineno}: non-numeric cell ({exc})") from None

    x = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(header) - 1)
    lo, hi = x.min(axis=0, initial=np.inf), x.max(axis=0, initial=-np.inf)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    x = np.where(span > 0, (x - lo) / safe, 0.0)

    classes = _label_sort_key(set(raw_labels))
    index = {c: k for k, c in enumerate(classes)}
    y = np.array([index[c] for c in raw_labels], dtype=np.int64)
    return LabeledSet(x, y, np.arange(len(y)), max(len(classes), 2))


def class_means(K: int, dim: int) -> np.ndarray:
    """Cluster centres inside [0,1]^dim: a simplex when dim >= K, else a ring."""
    means = np.full((K, dim), 0.5)
    if dim >= K:
        u = np.eye(K) - 1.0 / K
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        means[:, :K] += 0.35 * u
    else:
        angles = 2 * np.pi * np.arange(K) / K
        means[:, 0] += 0.35 * np.cos(angles)
        means[:, 1] += 0.35 * np.sin(angles)
    return means


def synth_clusters(K: int, n_per_class: int, dim: int, spread: float, seed: int) -> LabeledSet:
    """Gaussian blobs around ``class_means``, shuffled, clipped to [0, 1]."""
    if K < 2 or dim < 2:
        raise ValueError("synth_clusters needs K >= 2 and dim >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    means = class_means(K, dim)
    y = np.repeat(np.arange(K), n_per_class)
    x = means[y] + spread * rng.standard_normal((len(y), dim))
    order = rng.permutation(len(y))
    return LabeledSet(np.clip(x[order], 0.0, 1.0), y[order], np.arange(len(y)), K)


def inject_label_noise(data: LabeledSet, rate: float, seed: int) -> tuple[LabeledSet, NoiseMask]:
    """Flip exactly floor(rate * N) labels, each to a uniformly chosen different class."""
    if not 0 <= rate < 1:
        raise ValueError(f"noise rate must be in [0, 1), got {rate}")
    rng = np.random.Generator(np.random.PCG64(seed))
    n_flip = math.floor(rate * len(data))
    if n_flip == 0:
        return data, NoiseMask()
    idx = np.sort(rng.choice(len(data), size=n_flip, replace=False))
    y = data.labels.copy()
    shift = rng.integers(1, data.n_classes, size=n_flip)
    y[idx] = (y[idx] + shift) % data.n_classes
    mask = NoiseMask({int(data.ids[i]): int(data.labels[i]) for i in idx})
    return data.with_labels(y), mask


def partition_disjoint(data: LabeledSet, n_teachers: int, seed: int) -> list[LabeledSet]:
    """Shuffle and split into ``n_teachers`` disjoint, near-equal shards.

    The remainder goes one extra example per shard, starting from the first.
    """
    n = len(data)
    if n_teachers < 1 or n_teachers > n:
        raise ValueError(f"cannot split {n} examples into {n_teachers} shards")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    base, extra = divmod(n, n_teachers)
    shards, start = [], 0
    for i in range(n_teachers):
        size = base + (1 if i < extra else 0)
        shards.append(data.subset(order[start:start + size]))
        start += size
    return shards


def split(data: LabeledSet, first: int, seed: int | None = None) -> tuple[LabeledSet, LabeledSet]:
    """Split into (first ``first`` examples, rest), after an optional seeded shuffle."""
    idx = np.arange(len(data))
    if seed is not None:
        idx = np.random.Generator(np.random.PCG64(seed)).permutation(len(data))
    return data.subset(idx[:first]), data.subset(idx[first:])
