"""Dataset ingestion, synthetic generation, Dirichlet partitioning, splits.

Clients receive disjoint index shards of one global pool. Each shard is
further cut into train / validation / holdout pieces: validation drives
the error rates behind aggregation weights, holdout is the per-client
slice of the global evaluation set.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Bounded resampling budget for partition constraints.
PARTITION_MAX_RETRIES = 200


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # [N, d] float64
    labels: np.ndarray  # [N] int64
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be [N, d], labels [N]")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on N")
        if self.features.shape[0] == 0:
            raise ValueError("empty dataset")
        if int(self.labels.min()) < 0 or int(self.labels.max()) >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClientDataset:
    """One client's shard, split into disjoint train/validation/holdout."""

    client_id: int
    train: Dataset
    validation: Dataset
    holdout: Dataset
    class_count_local: int  # classes with at least one training example

    def __post_init__(self):
        if self.class_count_local < 2:
            raise ValueError(f"client {self.client_id} has {self.class_count_local} classes; need >= 2")


def subset(data: Dataset, indices: np.ndarray) -> Dataset:
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(
        features=data.features[idx],
        labels=data.labels[idx],
        class_count=data.class_count,
    )


def _read_exact(path: str, header_fmt: str, magic_expected: int, kind: str) -> tuple[tuple[int, ...], bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    header_size = struct.calcsize(header_fmt)
    if len(raw) < header_size:
        raise ValueError(f"truncated {kind} file {path}: missing header")
    header = struct.unpack(header_fmt, raw[:header_size])
    if header[0] != magic_expected:
        raise ValueError(
            f"bad magic 0x{header[0]:08x} in {kind} file {path}, expected 0x{magic_expected:08x}"
        )
    return header[1:], raw[header_size:]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label pair (big-endian, as published for MNIST).

    Pixels are scaled to [0, 1]; images are flattened row-wise; the class
    count is inferred as max label + 1.
    """
    (count, rows, cols), image_body = _read_exact(images_path, ">iiii", IDX_IMAGES_MAGIC, "images")
    expected = count * rows * cols
    if len(image_body) != expected:
        raise ValueError(f"truncated images file {images_path}: "
                         f"expected {expected} pixel bytes, found {len(image_body)}")
    (label_count,), label_body = _read_exact(labels_path, ">ii", IDX_LABELS_MAGIC, "labels")
    if len(label_body) != label_count:
        raise ValueError(f"truncated labels file {labels_path}: "
                         f"expected {label_count} label bytes, found {len(label_body)}")
    if label_count != count:
        raise ValueError(f"count mismatch: {count} images vs {label_count} labels")
    pixels = np.frombuffer(image_body, dtype=np.uint8).reshape(count, rows * cols)
    labels = np.frombuffer(label_body, dtype=np.uint8).astype(np.int64)
    return Dataset(
        features=pixels.astype(np.float64) / 255.0,
        labels=labels,
        class_count=int(labels.max()) + 1,
    )


def gen_synthetic(classes: int, dims: int, per_class: int, separation: float, seed: int) -> Dataset:
    """Gaussian blobs with unit noise, one mean per class.

    Class means sit on signed orthonormal axes scaled by ``separation``, so
    every pair of means is separation*sqrt(2) or 2*separation apart. Needs
    classes <= 2*dims for the means to stay distinct.
    """
    if classes < 2 or per_class < 1 or dims < 1:
        raise ValueError(f"invalid sizes: classes={classes}, dims={dims}, per_class={per_class}")
    if classes > 2 * dims:
        raise ValueError(f"dims={dims} too small to separate {classes} classes")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dims, dims)))
    means = np.zeros((classes, dims))
    for c in range(classes):
        sign = -1.0 if (c // dims) % 2 else 1.0
        means[c] = sign * separation * basis[:, c % dims]
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    features = means[labels] + rng.standard_normal((labels.shape[0], dims))
    return Dataset(features=features, labels=labels, class_count=classes)


def dirichlet_partition(data: Dataset, k: int, concentration: float, seed: int,
                        min_per_client: int = 20) -> list[np.ndarray]:
    """Label-skewed partition of ``data`` into k disjoint index shards.

    For each class, a Dirichlet(concentration * 1_k) draw fixes the share
    of that class's samples each client receives; smaller concentrations
    give more skewed (less IID) shards. Draws are resampled until every
    client holds at least ``min_per_client`` samples and two distinct
    classes, up to a bounded retry budget.
    """
    if k < 2:
        raise ValueError("need k >= 2 clients")
    if not concentration > 0:
        raise ValueError("concentration must be > 0")
    if min_per_client < 0:
        raise ValueError("min_per_client must be >= 0")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(data.labels == c) for c in range(data.class_count)]
    for _ in range(PARTITION_MAX_RETRIES):
        parts: list[list[np.ndarray]] = [[] for _ in range(k)]
        for class_indices in by_class:
            if class_indices.size == 0:
                continue
            order = rng.permutation(class_indices)
            shares = rng.dirichlet(np.full(k, concentration))
            cuts = (np.cumsum(shares)[:-1] * order.size).astype(np.int64)
            for client, chunk in enumerate(np.split(order, cuts)):
                parts[client].append(chunk)
        shards = [
            np.sort(np.concatenate(p)) if p else np.empty(0, dtype=np.int64)
            for p in parts
        ]
        ok = all(
            s.size >= min_per_client and np.unique(data.labels[s]).size >= 2
            for s in shards
        )
        if ok:
            return shards
    raise ValueError(
        f"could not satisfy partition constraints (min {min_per_client} samples, "
        f">= 2 classes per client) within {PARTITION_MAX_RETRIES} attempts"
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _proportional_quota(counts: np.ndarray, total: int, soft_cap: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of ``total`` across classes.

    Stays at or below soft_cap while possible, overflowing to the class
    counts themselves only when the caps cannot absorb the total.
    """
    ideal = counts * (total / counts.sum())
    quota = np.minimum(np.floor(ideal).astype(np.int64), soft_cap)
    remainder = ideal - np.floor(ideal)
    order = sorted(range(len(counts)), key=lambda c: (-remainder[c], c))
    for cap in (soft_cap, counts):
        while quota.sum() < total:
            grew = False
            for c in order:
                if quota.sum() == total:
                    break
                if quota[c] < cap[c]:
                    quota[c] += 1
                    grew = True
            if not grew:
                break
    return quota


def split_client(shard: Dataset, holdout_frac: float, validation_frac: float,
                 seed: int, client_id: int = 0) -> ClientDataset:
    """Stratified-where-possible split of a client shard.

    Holdout and validation sizes are round(frac * N) globally; within each
    class the allocation follows largest-remainder rounding, keeping at
    least one training example per class whenever the shard allows it.
    """
    for name, frac in (("holdout_frac", holdout_frac), ("validation_frac", validation_frac)):
        if not 0.0 < frac < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {frac}")
    if holdout_frac + validation_frac >= 1.0:
        raise ValueError("holdout_frac + validation_frac must be < 1")
    n = shard.n
    n_hold = _round_half_up(holdout_frac * n)
    n_val = _round_half_up(validation_frac * n)
    n_train = n - n_hold - n_val
    if min(n_hold, n_val, n_train) < 1:
        raise ValueError(f"shard of {n} samples is too small to split "
                         f"{n_train}/{n_val}/{n_hold} (train/validation/holdout)")
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(shard.labels, return_counts=True)
    hold_quota = _proportional_quota(counts, n_hold, np.maximum(counts - 1, 0))
    remaining = counts - hold_quota
    val_quota = _proportional_quota(remaining, n_val, np.maximum(remaining - 1, 0))
    hold_parts, val_parts, train_parts = [], [], []
    for c, label in enumerate(classes):
        order = rng.permutation(np.flatnonzero(shard.labels == label))
        h, v = int(hold_quota[c]), int(val_quota[c])
        hold_parts.append(order[:h])
        val_parts.append(order[h:h + v])
        train_parts.append(order[h + v:])
    def gather(parts):
        return subset(shard, np.sort(np.concatenate(parts)))
    train = gather(train_parts)
    return ClientDataset(
        client_id=client_id,
        train=train,
        validation=gather(val_parts),
        holdout=gather(hold_parts),
        class_count_local=int(np.unique(train.labels).size),
    )
