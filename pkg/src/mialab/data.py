"""Datasets: synthetic generation, CSV ingestion, the five-fold split, batching.

All randomness flows through numpy Generators seeded explicitly, so every
dataset, split, and batch order is a pure function of its seed.
"""

import csv

import numpy as np

from .errors import ConfigError, DimensionError, ParseError

ROLES = ("target_train", "target_test", "shadow_train", "shadow_test", "surrogate")

FEATURE_KINDS = ("real_valued", "binary")
SYNTHETIC_MODES = ("gaussian_blobs", "binary_records")


class Dataset:
    """Feature matrix (N x d) plus integer class labels in [0, C)."""

    def __init__(self, features, labels, name="dataset", feature_kind="real_valued"):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2:
            raise DimensionError("features must be a 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise DimensionError("one label per feature row required")
        if feature_kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature_kind {feature_kind!r}")
        if labels.size and labels.min() < 0:
            raise ConfigError("labels must be non-negative class indices")
        self.features = features
        self.labels = labels
        self.name = name
        self.feature_kind = feature_kind
        self.num_classes = int(labels.max()) + 1 if labels.size else 0
        if self.size < self.num_classes:
            raise ConfigError("fewer samples than classes")

    @property
    def size(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


class SyntheticSpec:
    """Recipe for a deterministic synthetic classification task."""

    def __init__(self, classes, dim, per_class, class_separation, noise_sigma,
                 mode="gaussian_blobs", seed=0):
        if classes < 2 or dim < 1 or per_class < 1:
            raise ConfigError("classes >= 2, dim >= 1, per_class >= 1 required")
        if class_separation < 0 or noise_sigma <= 0:
            raise ConfigError("class_separation >= 0 and noise_sigma > 0 required")
        if mode not in SYNTHETIC_MODES:
            raise ConfigError(f"unknown synthetic mode {mode!r}")
        self.classes = int(classes)
        self.dim = int(dim)
        self.per_class = int(per_class)
        self.class_separation = float(class_separation)
        self.noise_sigma = float(noise_sigma)
        self.mode = mode
        self.seed = int(seed)


def generate_synthetic(spec):
    """Deterministic dataset from a SyntheticSpec.

    gaussian_blobs: class means sit on a seeded sphere of radius
    class_separation; samples are mean + N(0, noise_sigma^2 I).
    binary_records: per-(class, feature) template logits scaled by
    class_separation, each bit set iff template + noise_sigma * N(0,1) > 0.
    With class_separation = 0 both modes carry no label signal.
    """
    rng = np.random.default_rng(spec.seed)
    c, d, n = spec.classes, spec.dim, spec.classes * spec.per_class
    labels = np.repeat(np.arange(c), spec.per_class)
    if spec.mode == "gaussian_blobs":
        directions = rng.standard_normal((c, d))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        means = spec.class_separation * directions / norms
        noise = rng.standard_normal((n, d)) * spec.noise_sigma
        features = means[labels] + noise
        kind = "real_valued"
    else:
        templates = spec.class_separation * rng.standard_normal((c, d))
        noise = rng.standard_normal((n, d)) * spec.noise_sigma
        features = (templates[labels] + noise > 0.0).astype(np.float64)
        kind = "binary"
    name = f"synthetic-{spec.mode}-c{c}-d{d}-n{n}-seed{spec.seed}"
    return Dataset(features, labels, name=name, feature_kind=kind)


class SplitPlan:
    """Five disjoint folds with fixed experiment roles.

    Fold order maps to roles target_train, target_test, shadow_train,
    shadow_test, surrogate. Fold sizes differ by at most one.
    """

    def __init__(self, folds):
        if len(folds) != len(ROLES):
            raise ConfigError(f"exactly {len(ROLES)} folds required")
        self.folds = [np.asarray(f, dtype=np.int64) for f in folds]
        self.role_to_fold = {role: i for i, role in enumerate(ROLES)}

    def indices(self, role):
        return self.folds[self.role_to_fold[role]]

    def fold_sizes(self):
        return [len(f) for f in self.folds]


def five_fold_split(dataset, seed):
    """Seeded shuffle, then contiguous slices; remainder spread over the first folds."""
    n = dataset.size
    k = len(ROLES)
    if n < k:
        raise ConfigError(f"need at least {k} samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(perm[start:start + size])
        start += size
    return SplitPlan(folds)


def load_csv(path, label_column, feature_kind="real_valued"):
    """Read a rectangular numeric CSV with a header row.

    Labels are re-indexed onto a dense [0, C) range (sorted by original
    value); row order is preserved. Malformed input raises ParseError with
    the offending 1-based line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not in header", line=1)
        label_idx = header.index(label_column)
        width = len(header)
        raw_labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise ParseError(
                    f"expected {width} cells, got {len(row)}", line=lineno
                )
            try:
                values = [float(cell) for cell in row]
            except ValueError:
                raise ParseError("non-numeric cell", line=lineno) from None
            raw_labels.append(values.pop(label_idx))
            rows.append(values)
    if not rows:
        raise ParseError("no data rows", line=2)
    dense = np.unique(np.asarray(raw_labels), return_inverse=True)[1]
    features = np.asarray(rows, dtype=np.float64)
    return Dataset(features, dense, name=str(path), feature_kind=feature_kind)


def save_csv(dataset, path, label_column="label"):
    """Emit the dataset in the same CSV format load_csv reads."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([label_column] + [f"x{j}" for j in range(dataset.dim)])
        for i in range(dataset.size):
            writer.writerow(
                [int(dataset.labels[i])] + [repr(float(v)) for v in dataset.features[i]]
            )


def batch_iter(dataset, indices, batch_size, seed=0, shuffle=False):
    """Yield (features, labels) batches over the given index set.

    K = ceil(len(indices) / batch_size) batches; the last may be short.
    Shuffling is a seeded permutation, so iteration order is reproducible.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    indices = np.asarray(indices, dtype=np.int64)
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(indices))
        indices = indices[order]
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        yield dataset.features[chunk], dataset.labels[chunk]


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DimensionError("label outside [0, num_classes)")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
