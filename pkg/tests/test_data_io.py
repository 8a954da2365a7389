"""Binary format round-trips and partition invariants."""

import math
import struct

import numpy as np
import pytest

from flprivlab.data_io import (CIFAR10_ENTROPY_BITS, Dataset, FormatError,
                               MNIST_ENTROPY_BITS, PartitionError, load_cifar10,
                               load_mnist, parse_cifar10, parse_idx,
                               partition_dirichlet, partition_iid, sample_batch,
                               synth_gaussian, synth_images, write_cifar10,
                               write_idx_images, write_idx_labels)


def _toy_images(n=7, h=5, w=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, h, w)).astype(np.uint8)


class TestIdx:
    def test_images_round_trip_bit_exact(self):
        imgs = _toy_images()
        blob = write_idx_images(imgs / 255.0)
        back = parse_idx(blob)
        assert back.dtype == np.float64
        np.testing.assert_allclose(back, imgs / 255.0)
        assert write_idx_images(back) == blob

    def test_labels_round_trip(self):
        labels = np.array([0, 9, 3, 3, 7], dtype=np.uint8)
        back = parse_idx(write_idx_labels(labels))
        np.testing.assert_array_equal(back, labels)

    def test_header_layout(self):
        imgs = _toy_images(n=2, h=3, w=4)
        blob = write_idx_images(imgs)
        magic, n, h, w = struct.unpack(">IIII", blob[:16])
        assert magic == 0x803
        assert (n, h, w) == (2, 3, 4)
        assert len(blob) == 16 + 2 * 3 * 4

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            parse_idx(struct.pack(">II", 0xDEAD, 1) + b"\x00")

    def test_truncated_payload(self):
        blob = write_idx_images(_toy_images())
        with pytest.raises(FormatError):
            parse_idx(blob[:-1])
        with pytest.raises(FormatError):
            parse_idx(blob[:10])

    def test_trailing_bytes_rejected(self):
        with pytest.raises(FormatError):
            parse_idx(write_idx_labels(np.zeros(3, dtype=np.uint8)) + b"\x00")

    def test_load_mnist_scales_to_unit_interval(self, tmp_path):
        imgs = _toy_images(n=6, h=5, w=5)
        labels = np.arange(6, dtype=np.uint8) % 3
        ip = tmp_path / "imgs.idx"
        lp = tmp_path / "labels.idx"
        ip.write_bytes(write_idx_images(imgs / 255.0))
        lp.write_bytes(write_idx_labels(labels))
        ds = load_mnist(str(ip), str(lp))
        assert ds.images.shape == (6, 5, 5)
        assert ds.images.dtype == np.float64
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        np.testing.assert_allclose(ds.images, imgs / 255.0)
        np.testing.assert_array_equal(ds.labels, labels)
        assert ds.entropy_bits_per_image == MNIST_ENTROPY_BITS

    def test_load_mnist_count_mismatch(self, tmp_path):
        ip = tmp_path / "imgs.idx"
        lp = tmp_path / "labels.idx"
        ip.write_bytes(write_idx_images(_toy_images(n=4) / 255.0))
        lp.write_bytes(write_idx_labels(np.zeros(5, dtype=np.uint8)))
        with pytest.raises(FormatError):
            load_mnist(str(ip), str(lp))


class TestCifar10:
    def _toy_dataset(self, n=5, seed=1):
        rng = np.random.default_rng(seed)
        images = rng.integers(0, 256, size=(n, 3, 32, 32)) / 255.0
        labels = rng.integers(0, 10, size=n)
        return Dataset(images=images, labels=labels, class_count=10,
                       entropy_bits_per_image=CIFAR10_ENTROPY_BITS, name="toy")

    def test_round_trip_bit_exact(self):
        ds = self._toy_dataset()
        blob = write_cifar10(ds)
        assert len(blob) == 5 * 3073
        back = parse_cifar10(blob)
        np.testing.assert_array_equal(back.images, ds.images)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert write_cifar10(back) == blob

    def test_record_layout(self):
        ds = self._toy_dataset(n=1)
        blob = write_cifar10(ds)
        assert blob[0] == ds.labels[0]
        red_first = blob[1]
        assert red_first == round(ds.images[0, 0, 0, 0] * 255)

    def test_ragged_length_rejected(self):
        with pytest.raises(FormatError):
            parse_cifar10(b"\x00" * 3072)

    def test_load_concatenates_batches(self, tmp_path):
        a, b = self._toy_dataset(n=3, seed=2), self._toy_dataset(n=4, seed=3)
        pa, pb = tmp_path / "b1.bin", tmp_path / "b2.bin"
        pa.write_bytes(write_cifar10(a))
        pb.write_bytes(write_cifar10(b))
        ds = load_cifar10([str(pa), str(pb)])
        assert len(ds) == 7
        np.testing.assert_array_equal(ds.labels[:3], a.labels)
        np.testing.assert_array_equal(ds.labels[3:], b.labels)


class TestPartitions:
    def test_iid_is_a_permutation_partition(self):
        ds = synth_images(120, seed=4)
        parts = partition_iid(ds, 6, seed=9)
        assert len(parts) == 6
        assert all(len(p) == 20 for p in parts)
        combined = np.concatenate(parts)
        np.testing.assert_array_equal(np.sort(combined), np.arange(120))

    def test_iid_deterministic(self):
        ds = synth_images(60, seed=4)
        a = partition_iid(ds, 3, seed=1)
        b = partition_iid(ds, 3, seed=1)
        c = partition_iid(ds, 3, seed=2)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)
        assert any(not np.array_equal(pa, pc) for pa, pc in zip(a, c))

    def test_iid_drops_the_remainder(self):
        ds = synth_images(10, seed=0)
        parts = partition_iid(ds, 3, seed=0)
        assert all(len(p) == 3 for p in parts)
        assert len(np.unique(np.concatenate(parts))) == 9

    def test_dirichlet_partition_covers_everything(self):
        ds = synth_images(300, seed=5)
        parts = partition_dirichlet(ds, 5, alpha=0.5, seed=3)
        assert len(parts) == 5
        assert all(len(p) >= 1 for p in parts)
        combined = np.sort(np.concatenate(parts))
        np.testing.assert_array_equal(combined, np.arange(300))

    def test_dirichlet_low_alpha_is_more_skewed(self):
        ds = synth_images(600, seed=6)

        def class_spread(alpha):
            parts = partition_dirichlet(ds, 4, alpha=alpha, seed=11)
            counts = np.zeros((4, ds.class_count))
            for u, idx in enumerate(parts):
                for c in range(ds.class_count):
                    counts[u, c] = (ds.labels[idx] == c).sum()
            frac = counts / counts.sum(axis=0, keepdims=True)
            return frac.std()

        assert class_spread(0.1) > class_spread(100.0)

    def test_dirichlet_infinite_alpha_matches_iid(self):
        ds = synth_images(80, seed=7)
        a = partition_dirichlet(ds, 4, alpha=math.inf, seed=13)
        b = partition_iid(ds, 4, seed=13)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)

    def test_bad_user_count(self):
        ds = synth_images(20, seed=0)
        with pytest.raises(PartitionError):
            partition_iid(ds, 0, seed=0)
        with pytest.raises(PartitionError):
            partition_dirichlet(ds, 40, alpha=1.0, seed=0)


class TestSynth:
    def test_gaussian_moments(self):
        cov = np.array([[2.0, 0.6], [0.6, 1.0]])
        ds = synth_gaussian(2, 20000, mean=[1.0, -1.0], cov=cov, seed=8)
        x = ds.images.reshape(20000, 2)
        np.testing.assert_allclose(x.mean(axis=0), [1.0, -1.0], atol=0.05)
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.08)

    def test_gaussian_rejects_asymmetric_cov(self):
        with pytest.raises(ValueError):
            synth_gaussian(2, 10, mean=[0, 0], cov=[[1.0, 0.9], [0.1, 1.0]], seed=0)

    def test_images_deterministic_and_bounded(self):
        a = synth_images(50, seed=21)
        b = synth_images(50, seed=21)
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0
        assert a.images.shape == (50, 28, 28)

    def test_images_balanced_labels(self):
        ds = synth_images(100, class_count=10, seed=2)
        counts = np.bincount(ds.labels, minlength=10)
        np.testing.assert_array_equal(counts, np.full(10, 10))

    def test_images_classes_are_separable(self):
        # same-class pairs sit closer than cross-class pairs on average
        ds = synth_images(200, noise=0.1, seed=3)
        flat = ds.images.reshape(200, -1)
        same, cross = [], []
        for i in range(0, 60):
            for j in range(i + 1, 60):
                d = np.linalg.norm(flat[i] - flat[j])
                (same if ds.labels[i] == ds.labels[j] else cross).append(d)
        assert np.mean(same) < np.mean(cross)

    def test_subset_view(self):
        ds = synth_images(40, seed=1)
        sub = ds.subset(np.arange(10))
        assert len(sub) == 10
        np.testing.assert_array_equal(sub.labels, ds.labels[:10])


class TestSampleBatch:
    def test_within_bounds_no_replacement(self):
        rng = np.random.default_rng(0)
        idx = np.arange(100, 140)
        batch = sample_batch(idx, 16, rng)
        assert len(batch) == 16
        assert len(np.unique(batch)) == 16
        assert set(batch).issubset(set(idx.tolist()))

    def test_oversized_batch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            sample_batch(np.arange(5), 6, rng)
