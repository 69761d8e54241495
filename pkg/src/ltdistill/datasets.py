"""Dataset construction: long-tailed subsampling via exponential decay,
balanced resamples, toy generators, and IDX-format ingestion.

All operations are pure functions of (inputs, seed), so regenerating a
dataset from its spec is the canonical way to obtain it; nothing here is
persisted except what the caller writes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

TOY_KINDS = ("gaussian-blobs", "concentric-rings")
RESAMPLE_MODES = ("oversample", "undersample")


class IdxFormatError(ValueError):
    """Malformed IDX file: wrong magic, truncation, or count mismatch."""


def derive_seed(base: int, label: str) -> int:
    """Deterministically derive an independent sub-seed from (base, label)."""
    digest = hashlib.sha256(f"{base}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class LabeledSet:
    """Feature matrix with integer labels and per-class counts.

    Plays all dataset roles: the long-tailed target, its balanced resample,
    and the balanced test set.
    """

    features: np.ndarray  # n x d, float64
    labels: np.ndarray  # n, int64 in [0, C)
    class_counts: np.ndarray  # length C, int64

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_counts = np.asarray(self.class_counts, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        c = len(self.class_counts)
        if c < 2 or self.features.shape[1] < 1:
            raise ValueError("need at least 2 classes and 1 feature dimension")
        observed = np.bincount(self.labels, minlength=c)
        if len(observed) != c or not np.array_equal(observed, self.class_counts):
            raise ValueError("class_counts inconsistent with labels")

    @classmethod
    def from_arrays(cls, features, labels, num_classes=None):
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        counts = np.bincount(labels, minlength=num_classes)
        return cls(features, labels, counts)

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def fingerprint(self) -> str:
        """Content hash identifying the exact sample set."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass
class LongTailSpec:
    """Exponential-decay class profile: counts[c] ~ n_max * beta^(-c/C)."""

    beta: float
    num_classes: int
    n_max: int
    min_count: int = 1

    def __post_init__(self):
        if self.beta < 1.0:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.min_count < 1 or self.n_max < self.min_count:
            raise ValueError("require n_max >= min_count >= 1")


@dataclass
class ToySpec:
    """Synthetic generator config; regenerable from (spec, seed) alone."""

    kind: str = "gaussian-blobs"
    num_classes: int = 5
    dim: int = 16
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TOY_KINDS:
            raise ValueError(f"kind must be one of {TOY_KINDS}, got {self.kind!r}")
        if self.noise <= 0:
            raise ValueError("noise scale must be > 0")
        if self.dim < 2 or self.num_classes < 2:
            raise ValueError("require dim >= 2 and num_classes >= 2")


def longtail_counts(spec: LongTailSpec) -> np.ndarray:
    """Per-class sample counts under exponential decay.

    counts[c] = max(min_count, floor(n_max * beta^(-c/C))). Non-increasing
    in c; counts[0] = n_max since beta^0 = 1.
    """
    c_idx = np.arange(spec.num_classes)
    decay = spec.beta ** (-c_idx / spec.num_classes)
    counts = np.floor(spec.n_max * decay).astype(np.int64)
    return np.maximum(counts, spec.min_count)


def subsample_longtail(full: LabeledSet, counts, seed: int) -> LabeledSet:
    """Draw `counts[c]` samples per class uniformly without replacement."""
    counts = np.asarray(counts, dtype=np.int64)
    if len(counts) != full.num_classes:
        raise ValueError("counts length does not match the number of classes")
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(full.num_classes):
        pool = np.flatnonzero(full.labels == c)
        if len(pool) < counts[c]:
            raise ValueError(
                f"class {c} has {len(pool)} samples, cannot draw {counts[c]}"
            )
        picks.append(rng.choice(pool, size=counts[c], replace=False))
    idx = np.concatenate(picks)
    return LabeledSet(full.features[idx].copy(), full.labels[idx].copy(), counts)


def balanced_resample(d: LabeledSet, mode: str, seed: int) -> LabeledSet:
    """Equalize class counts by undersampling (min) or oversampling (max).

    Oversampling keeps every original item once and fills the deficit with
    draws with replacement, so each tail item appears at least once.
    """
    if mode not in RESAMPLE_MODES:
        raise ValueError(f"mode must be one of {RESAMPLE_MODES}, got {mode!r}")
    if (d.class_counts == 0).any():
        empty = int(np.flatnonzero(d.class_counts == 0)[0])
        raise ValueError(f"class {empty} is empty, cannot resample")
    rng = np.random.default_rng(seed)
    target = int(d.class_counts.min() if mode == "undersample" else d.class_counts.max())
    picks = []
    for c in range(d.num_classes):
        pool = np.flatnonzero(d.labels == c)
        if mode == "undersample":
            picks.append(rng.choice(pool, size=target, replace=False))
        else:
            deficit = target - len(pool)
            extra = rng.choice(pool, size=deficit, replace=True) if deficit else pool[:0]
            picks.append(np.concatenate([pool, extra]))
    idx = np.concatenate(picks)
    counts = np.full(d.num_classes, target, dtype=np.int64)
    return LabeledSet(d.features[idx].copy(), d.labels[idx].copy(), counts)


def _blob_centers(spec: ToySpec) -> np.ndarray:
    # Deterministic placement: class c sits on axis c % dim at the stated
    # separation, pushed one ring further out for every wrap-around.
    centers = np.zeros((spec.num_classes, spec.dim))
    for c in range(spec.num_classes):
        centers[c, c % spec.dim] = spec.separation * (1 + c // spec.dim)
    return centers


def gen_toy(spec: ToySpec, n_per_class: int) -> LabeledSet:
    """Generate a balanced toy set; bit-identical under the same spec.

    Disjoint splits (e.g. a test set) come from a second call with a
    different seed, typically via `derive_seed(seed, "test")`.
    """
    rng = np.random.default_rng(spec.seed)
    n, c_total, d = n_per_class, spec.num_classes, spec.dim
    feats = np.empty((n * c_total, d))
    labels = np.repeat(np.arange(c_total, dtype=np.int64), n)
    if spec.kind == "gaussian-blobs":
        centers = _blob_centers(spec)
        for c in range(c_total):
            block = centers[c] + spec.noise * rng.standard_normal((n, d))
            feats[c * n : (c + 1) * n] = block
    else:  # concentric-rings
        for c in range(c_total):
            radius = spec.separation * (c + 1)
            theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
            block = np.zeros((n, d))
            block[:, 0] = radius * np.cos(theta)
            block[:, 1] = radius * np.sin(theta)
            block += spec.noise * rng.standard_normal((n, d))
            feats[c * n : (c + 1) * n] = block
    counts = np.full(c_total, n, dtype=np.int64)
    return LabeledSet(feats, labels, counts)


def _read_be_u32(buf: bytes, offset: int, path: str) -> int:
    if len(buf) < offset + 4:
        raise IdxFormatError(f"{path}: truncated header")
    return int.from_bytes(buf[offset : offset + 4], "big")


def load_idx(images_path, labels_path) -> LabeledSet:
    """Load an IDX image/label file pair (the MNIST container format).

    Pixels are scaled to [0, 1] by dividing by 255; images are flattened to
    rows. Wrong magic numbers, truncated payloads, and image/label count
    mismatches raise distinct IdxFormatError messages.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lab_buf = f.read()

    magic = _read_be_u32(img_buf, 0, str(images_path))
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: wrong magic {magic}, expected {IDX_IMAGE_MAGIC}"
        )
    n = _read_be_u32(img_buf, 4, str(images_path))
    rows = _read_be_u32(img_buf, 8, str(images_path))
    cols = _read_be_u32(img_buf, 12, str(images_path))
    if len(img_buf) != 16 + n * rows * cols:
        raise IdxFormatError(
            f"{images_path}: truncated payload, expected {n * rows * cols} pixel "
            f"bytes, found {len(img_buf) - 16}"
        )

    magic = _read_be_u32(lab_buf, 0, str(labels_path))
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: wrong magic {magic}, expected {IDX_LABEL_MAGIC}"
        )
    n_lab = _read_be_u32(lab_buf, 4, str(labels_path))
    if len(lab_buf) != 8 + n_lab:
        raise IdxFormatError(
            f"{labels_path}: truncated payload, expected {n_lab} label bytes, "
            f"found {len(lab_buf) - 8}"
        )
    if n != n_lab:
        raise IdxFormatError(
            f"image/label count mismatch: {n} images vs {n_lab} labels"
        )

    pixels = np.frombuffer(img_buf, dtype=np.uint8, offset=16)
    feats = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_buf, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledSet.from_arrays(feats, labels)
