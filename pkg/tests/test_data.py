"""Data layer: IDX parsing, synthetic blobs, Dirichlet partitions, splits."""

import struct

import numpy as np
import pytest

from conftest import write_idx_pair
from fedaboost.data import (
    Dataset,
    dirichlet_partition,
    gen_synthetic,
    load_idx,
    split_client,
    subset,
)
from fedaboost.losses import cross_entropy
from fedaboost.metrics import error_rate
from fedaboost.nn import Batch, backward, forward, init_mlp, sgd_step, softmax


class TestLoadIdx:
    def test_round_trip(self, tmp_path):
        pixels = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        labels = np.array([1, 0], dtype=np.uint8)
        img, lab = tmp_path / "img", tmp_path / "lab"
        write_idx_pair(img, lab, pixels, labels)
        ds = load_idx(str(img), str(lab))
        assert ds.n == 2 and ds.feature_dim == 12 and ds.class_count == 2
        np.testing.assert_allclose(ds.features, pixels.reshape(2, 12) / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)

    def test_bad_magic(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        write_idx_pair(img, lab, np.zeros((1, 2, 2), np.uint8), np.array([0], np.uint8))
        raw = bytearray(img.read_bytes())
        raw[3] = 0x09
        img.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="magic"):
            load_idx(str(img), str(lab))

    def test_count_mismatch(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        write_idx_pair(img, tmp_path / "unused", np.zeros((6, 2, 2), np.uint8),
                       np.zeros(6, np.uint8))
        with open(lab, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 5))
            f.write(bytes(5))
        with pytest.raises(ValueError, match="mismatch"):
            load_idx(str(img), str(lab))

    def test_truncated_images(self, tmp_path):
        img, lab = tmp_path / "img", tmp_path / "lab"
        write_idx_pair(img, lab, np.zeros((2, 2, 2), np.uint8), np.zeros(2, np.uint8))
        img.write_bytes(img.read_bytes()[:-3])
        with pytest.raises(ValueError, match="truncated"):
            load_idx(str(img), str(lab))


class TestGenSynthetic:
    def test_deterministic(self):
        a = gen_synthetic(3, 6, 10, separation=2.0, seed=42)
        b = gen_synthetic(3, 6, 10, separation=2.0, seed=42)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_sample_count(self):
        ds = gen_synthetic(3, 4, 10, separation=1.0, seed=0)
        assert ds.n == 30 and ds.class_count == 3

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            gen_synthetic(1, 4, 10, 1.0, 0)
        with pytest.raises(ValueError):
            gen_synthetic(2, 4, 0, 1.0, 0)
        with pytest.raises(ValueError):
            gen_synthetic(9, 4, 10, 1.0, 0)  # > 2 * dims

    def test_well_separated_blobs_are_learnable(self):
        """Train-and-check oracle: a tiny model should nail large separations."""
        ds = gen_synthetic(2, 5, 100, separation=8.0, seed=7)
        model = init_mlp([5, 2], seed=1)
        rng = np.random.default_rng(3)
        for _ in range(5):
            order = rng.permutation(ds.n)
            for start in range(0, ds.n, 20):
                idx = order[start:start + 20]
                batch = Batch(inputs=ds.features[idx], labels=ds.labels[idx])
                logits, cache = forward(model, batch)
                _, grad_logits = cross_entropy(softmax(logits), batch.labels)
                model = sgd_step(model, backward(model, cache, grad_logits), lr=0.1)
        assert error_rate(model, ds) < 0.05


def max_class_share(data: Dataset, shard: np.ndarray) -> float:
    counts = np.bincount(data.labels[shard], minlength=data.class_count)
    return counts.max() / counts.sum()


class TestDirichletPartition:
    def test_partition_property(self):
        ds = gen_synthetic(4, 6, 50, separation=2.0, seed=5)
        shards = dirichlet_partition(ds, k=5, concentration=0.5, seed=9, min_per_client=5)
        combined = np.concatenate(shards)
        assert combined.size == ds.n
        assert np.array_equal(np.sort(combined), np.arange(ds.n))

    def test_near_iid_limit(self):
        """Huge concentration: per-client class histograms close to uniform."""
        for seed in range(5):
            ds = gen_synthetic(5, 6, 200, separation=2.0, seed=seed)
            shards = dirichlet_partition(ds, k=10, concentration=1e6, seed=seed,
                                         min_per_client=10)
            for shard in shards:
                hist = np.bincount(ds.labels[shard], minlength=5) / shard.size
                assert np.all(np.abs(hist - 0.2) <= 0.2 * 0.2)

    def test_low_concentration_is_more_skewed(self):
        skew = {0.2: [], 1e6: []}
        for seed in range(5):
            ds = gen_synthetic(5, 6, 200, separation=2.0, seed=seed)
            for conc in skew:
                shards = dirichlet_partition(ds, k=10, concentration=conc,
                                             seed=seed, min_per_client=5)
                skew[conc].append(np.mean([max_class_share(ds, s) for s in shards]))
        assert np.mean(skew[0.2]) > np.mean(skew[1e6])

    def test_every_client_keeps_two_classes(self):
        ds = gen_synthetic(4, 6, 100, separation=2.0, seed=2)
        shards = dirichlet_partition(ds, k=6, concentration=0.2, seed=4, min_per_client=10)
        for shard in shards:
            assert shard.size >= 10
            assert np.unique(ds.labels[shard]).size >= 2

    def test_unsatisfiable_constraints_raise(self):
        ds = gen_synthetic(2, 4, 20, separation=2.0, seed=1)  # 40 samples
        with pytest.raises(ValueError, match="constraints"):
            dirichlet_partition(ds, k=4, concentration=1.0, seed=0, min_per_client=30)

    def test_deterministic(self):
        ds = gen_synthetic(3, 5, 60, separation=2.0, seed=8)
        a = dirichlet_partition(ds, k=4, concentration=0.4, seed=12, min_per_client=5)
        b = dirichlet_partition(ds, k=4, concentration=0.4, seed=12, min_per_client=5)
        for s1, s2 in zip(a, b):
            np.testing.assert_array_equal(s1, s2)


class TestSplitClient:
    def shard(self, n=100, classes=4, seed=0):
        rng = np.random.default_rng(seed)
        # tag each row with a unique id in feature 0 to track disjointness
        features = rng.standard_normal((n, 3))
        features[:, 0] = np.arange(n)
        labels = rng.integers(0, classes, size=n).astype(np.int64)
        labels[:classes] = np.arange(classes)  # every class present
        return Dataset(features=features, labels=labels, class_count=classes)

    def test_sizes_60_20_20(self):
        cd = split_client(self.shard(), 0.2, 0.2, seed=1, client_id=1)
        assert cd.holdout.n == 20 and cd.validation.n == 20 and cd.train.n == 60

    @pytest.mark.parametrize("seed", [0, 1, 17])
    def test_disjoint_for_any_seed(self, seed):
        cd = split_client(self.shard(), 0.2, 0.25, seed=seed)
        ids = [set(part.features[:, 0].astype(int))
               for part in (cd.train, cd.validation, cd.holdout)]
        assert ids[0] | ids[1] | ids[2] == set(range(100))
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_deterministic(self):
        a = split_client(self.shard(), 0.2, 0.2, seed=5)
        b = split_client(self.shard(), 0.2, 0.2, seed=5)
        np.testing.assert_array_equal(a.train.features, b.train.features)
        np.testing.assert_array_equal(a.holdout.features, b.holdout.features)

    def test_local_class_count_matches_train_labels(self):
        cd = split_client(self.shard(), 0.2, 0.2, seed=3)
        assert cd.class_count_local == np.unique(cd.train.labels).size
        assert cd.class_count_local <= cd.train.class_count

    def test_stratification_keeps_rare_class_in_train(self):
        # class 3 has a single example; it must stay in train
        rng = np.random.default_rng(0)
        features = rng.standard_normal((41, 2))
        labels = np.array([0] * 20 + [1] * 10 + [2] * 10 + [3], dtype=np.int64)
        shard = Dataset(features=features, labels=labels, class_count=4)
        cd = split_client(shard, 0.2, 0.2, seed=9)
        assert 3 in cd.train.labels

    def test_shard_too_small(self):
        with pytest.raises(ValueError, match="too small"):
            split_client(self.shard(n=2, classes=2), 0.2, 0.2, seed=0)

    def test_fraction_validation(self):
        with pytest.raises(ValueError):
            split_client(self.shard(), 0.0, 0.2, seed=0)
        with pytest.raises(ValueError):
            split_client(self.shard(), 0.6, 0.5, seed=0)


def test_subset_preserves_class_count():
    ds = gen_synthetic(3, 4, 10, separation=1.0, seed=0)
    sub = subset(ds, np.array([0, 1, 2]))
    assert sub.class_count == 3 and sub.n == 3


def test_real_mnist_dimensions_when_available():
    import os
    mnist_dir = os.environ.get("MNIST_DIR")
    if not mnist_dir:
        pytest.skip("MNIST_DIR not set; no IDX files in this environment")
    ds = load_idx(os.path.join(mnist_dir, "train-images-idx3-ubyte"),
                  os.path.join(mnist_dir, "train-labels-idx1-ubyte"))
    assert ds.n == 60000 and ds.feature_dim == 784 and ds.class_count == 10
    assert float(ds.features.min()) >= 0.0 and float(ds.features.max()) <= 1.0
