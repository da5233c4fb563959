"""Datasets, IDX/CSV ingestion, synthetic blobs and biased deletion sampling."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
BLOB_STD = 0.5


class FormatError(ValueError):
    """Raised when an IDX or CSV file cannot be decoded."""


class InfeasibleSpecError(ValueError):
    pass


class Example(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled examples stored as a feature matrix ``X`` (n x dim) and labels ``y``.

    For regression datasets ``num_classes`` is 0 and ``y`` holds real targets.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise ValueError(f"features must be a non-empty 2-D array, got shape {X.shape}")
        if self.num_classes > 0:
            y = np.asarray(self.y)
            if not np.issubdtype(y.dtype, np.integer):
                if not np.all(np.equal(np.mod(y, 1), 0)):
                    raise ValueError("class labels must be integers")
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= self.num_classes:
                raise ValueError(f"labels must lie in [0, {self.num_classes})")
        elif self.num_classes == 0:
            y = np.asarray(self.y, dtype=np.float64)
        else:
            raise ValueError("num_classes must be >= 0")
        if y.shape != (X.shape[0],):
            raise ValueError("one label per example required")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.num_classes > 0

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Example:
        return Example(self.X[i], int(self.y[i]) if self.is_classification else self.y[i])

    def class_counts(self, indices: np.ndarray | None = None) -> np.ndarray:
        y = self.y if indices is None else self.y[np.asarray(indices, dtype=np.int64)]
        return np.bincount(y, minlength=self.num_classes)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)


@dataclass(frozen=True)
class BiasSpec:
    """Per-class deletion weights; classes missing from ``bias_map`` get ``default_weight``."""

    bias_map: Mapping[int, float]
    deletion_count: int
    seed: int = 0
    default_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.deletion_count < 1:
            raise ValueError("deletion_count must be positive")
        weights = list(self.bias_map.values()) + [self.default_weight]
        if any(w < 0 for w in weights):
            raise ValueError("bias weights must be nonnegative")
        if not any(w > 0 for w in weights):
            raise ValueError("at least one bias weight must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def weights(self, num_classes: int) -> np.ndarray:
        w = np.full(num_classes, float(self.default_weight))
        for c, b in self.bias_map.items():
            if not 0 <= int(c) < num_classes:
                raise ValueError(f"bias_map class {c} outside [0, {num_classes})")
            w[int(c)] = float(b)
        return w


@dataclass(frozen=True, eq=False)
class SplitResult:
    forget_indices: np.ndarray
    retain_indices: np.ndarray
    achieved_kl: float
    bias: BiasSpec | None = field(default=None)

    @property
    def m(self) -> int:
        return len(self.forget_indices)


# ---------------------------------------------------------------- IDX / CSV


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _create(path: Path):
    return gzip.GzipFile(path, "wb", mtime=0) if path.suffix == ".gz" else open(path, "wb")


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    try:
        with _open(path) as fh:
            blob = fh.read()
    except (OSError, EOFError) as exc:
        raise FormatError(f"{path}: unreadable ({exc})") from exc
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated header")
    found = struct.unpack(">I", blob[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = int(np.prod(dims))
    payload = blob[header:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) into a Dataset scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{labels_path}: {labels.shape[0]} labels for {images.shape[0]} images"
        )
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} >= {num_classes}")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), num_classes)


def write_idx(images_path: str | Path, labels_path: str | Path, images: np.ndarray,
              labels: np.ndarray) -> None:
    """Write an IDX pair; paths ending in .gz are gzipped (with a zero mtime)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with _create(Path(images_path)) as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with _create(Path(labels_path)) as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def save_csv(data: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{j}" for j in range(data.dim)])
        for row, label in zip(data.X, data.y):
            writer.writerow([int(label) if data.is_classification else repr(float(label))]
                            + [repr(float(v)) for v in row])


def load_csv(path: str | Path, num_classes: int) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        dim = len(header) - 1
        if header[0] != "label" or header[1:] != [f"f{j}" for j in range(dim)]:
            raise FormatError(f"{path}: header must be label,f0,...,f{{d-1}}")
        rows = [r for r in reader if r]
    if not rows:
        raise FormatError(f"{path}: no examples")
    if any(len(r) != dim + 1 for r in rows):
        raise FormatError(f"{path}: ragged rows")
    table = np.array(rows, dtype=np.float64)
    return Dataset(table[:, 1:], table[:, 0], num_classes)


# ---------------------------------------------------------------- synthetic


def gen_synthetic(num_classes: int, dim: int, per_class: int, separation: float,
                  seed: int) -> Dataset:
    """Isotropic Gaussian blobs (std ``BLOB_STD``) whose means are pairwise ``separation`` apart.

    Means sit on scaled simplex vertices (needs ``dim >= num_classes - 1``; for
    larger class counts in low dimension they are spread on a circle instead).
    Features are then affinely mapped into [0, 1] by a fixed per-dataset scale.
    """
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ValueError("num_classes, dim and per_class must all be positive")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, separation)
    y = np.repeat(np.arange(num_classes), per_class)
    X = means[y] + BLOB_STD * rng.standard_normal((len(y), dim))
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    # Fixed affine map keeps geometry (separation in units of noise std) intact.
    lo, hi = X.min(), X.max()
    X = (X - lo) / (hi - lo)
    return Dataset(X, y, num_classes)


def _class_means(k: int, dim: int, separation: float) -> np.ndarray:
    if k == 1:
        return np.zeros((1, dim))
    if dim >= k:
        # orthonormal vertices e_c have pairwise distance sqrt(2)
        means = np.eye(k, dim) * (separation / np.sqrt(2.0))
        return means - means.mean(axis=0)
    if dim >= 2:
        angles = 2 * np.pi * np.arange(k) / k
        radius = separation / (2 * np.sin(np.pi / k))
        means = np.zeros((k, dim))
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
        return means
    return (np.arange(k) * separation)[:, None] - separation * (k - 1) / 2


# ---------------------------------------------------------------- deletion sampling


def sample_biased_deletion(data: Dataset, spec: BiasSpec, smoothing: float = 1e-9) -> SplitResult:
    """Draw ``spec.deletion_count`` examples without replacement, weight ∝ b_label.

    Uses Efraimidis-Spirakis keys ``u ** (1 / w)``: the top-m keys form a weighted
    sample without replacement, all from one seeded stream.
    """
    if not data.is_classification:
        raise ValueError("biased deletion needs class labels")
    m = spec.deletion_count
    if m >= data.n:
        raise InfeasibleSpecError(f"deletion_count {m} must be < n = {data.n}")
    w = spec.weights(data.num_classes)[data.y]
    positive = np.flatnonzero(w > 0)
    if m > len(positive):
        raise InfeasibleSpecError(
            f"deletion_count {m} exceeds the {len(positive)} examples with positive bias"
        )
    rng = np.random.default_rng(spec.seed)
    u = rng.random(data.n)
    # log-keys avoid underflow of u ** (1/w) for small weights
    keys = np.full(data.n, -np.inf)
    with np.errstate(over="ignore"):  # subnormal weights give -inf keys, i.e. never chosen first
        keys[positive] = np.log(u[positive]) / w[positive]
    # stable sort on (-key, index) keeps ties deterministic
    order = np.lexsort((np.arange(data.n), -keys))
    forget = np.sort(order[:m])
    mask = np.ones(data.n, dtype=bool)
    mask[forget] = False
    retain = np.flatnonzero(mask)
    kl = class_marginal_kl(data, retain, smoothing)
    return SplitResult(forget, retain, kl, spec)


def split_from_forget(data: Dataset, forget: Iterable[int], smoothing: float = 1e-9) -> SplitResult:
    forget = np.unique(np.asarray(list(forget), dtype=np.int64))
    if forget.size and (forget[0] < 0 or forget[-1] >= data.n):
        raise ValueError("forget index out of range")
    mask = np.ones(data.n, dtype=bool)
    mask[forget] = False
    retain = np.flatnonzero(mask)
    kl = class_marginal_kl(data, retain, smoothing) if data.is_classification else 0.0
    return SplitResult(forget, retain, kl)


def class_marginal_kl(full: Dataset, retained_indices: np.ndarray, smoothing: float = 1e-9) -> float:
    """KL(P_full || P_retained) between smoothed class-label histograms, in nats."""
    retained_indices = np.asarray(retained_indices, dtype=np.int64)
    if retained_indices.size == 0:
        raise ValueError("retained set is empty")
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    p = full.class_counts().astype(np.float64) + smoothing
    q = full.class_counts(retained_indices).astype(np.float64) + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


@dataclass(frozen=True)
class ShiftWitness:
    shifted: bool
    witness_class: int | None
    deletion_fractions: np.ndarray


def verify_shift(full: Dataset, split: SplitResult) -> ShiftWitness:
    """Check whether some class loses a fraction of its members different from m/n.

    Comparisons use exact integer cross-multiplication.
    """
    n, m = full.n, split.m
    totals = full.class_counts()
    deleted = full.class_counts(split.forget_indices)
    fractions = np.divide(deleted, np.maximum(totals, 1), dtype=np.float64)
    witness = None
    gap = -1
    for c in np.flatnonzero(totals > 0):
        diff = abs(int(deleted[c]) * n - m * int(totals[c]))
        if diff > gap and diff > 0:
            gap, witness = diff, int(c)
    return ShiftWitness(witness is not None, witness, fractions)


def deletion_count_for_kl(data: Dataset, bias_map: Mapping[int, float], target_kl: float,
                          seed: int = 0, default_weight: float = 1.0) -> int:
    """Smallest deletion count whose sampled split reaches ``target_kl`` (bisection)."""
    w = BiasSpec(bias_map, 1, seed, default_weight).weights(data.num_classes)[data.y]
    hi = min(int(np.count_nonzero(w > 0)), data.n - 1)

    def kl_at(m: int) -> float:
        return sample_biased_deletion(data, BiasSpec(bias_map, m, seed, default_weight)).achieved_kl

    if kl_at(hi) < target_kl:
        raise InfeasibleSpecError(f"target KL {target_kl} unreachable with this bias pattern")
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if kl_at(mid) >= target_kl:
            hi = mid
        else:
            lo = mid + 1
    return lo
