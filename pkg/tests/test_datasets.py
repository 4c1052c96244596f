import struct

import numpy as np
import pytest

from seqembed.datasets import (
    IDENTITY,
    SEQUENCE,
    BatchPlan,
    Dataset,
    LabelSpace,
    epoch_batches,
    iterate_batches,
    load_idx,
    make_synthetic_clusters,
    read_sqfd,
    save_idx,
    sequence_length_histogram,
    split_identity_sequence,
    write_sqfd,
)
from seqembed.errors import (
    ConfigurationError,
    ConsistencyError,
    FormatError,
    LabelError,
    ParameterError,
)
from seqembed.numerics import Rng


def write_idx_pair(tmp_path, pixels, labels):
    n, h, w = pixels.shape
    ip = tmp_path / "imgs.idx3-ubyte"
    lp = tmp_path / "labels.idx1-ubyte"
    ip.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + pixels.tobytes())
    lp.write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
    return ip, lp


class TestIdx:
    def test_load_and_normalization(self, tmp_path):
        px = np.array([[[0, 255], [128, 127]], [[10, 20], [30, 40]]], dtype=np.uint8)
        labels = np.array([3, 7], dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, px, labels)
        ds = load_idx(ip, lp)
        assert len(ds) == 2
        assert ds.images.shape == (2, 2, 2, 1)
        assert ds.images[0, 0, 0, 0] == -0.99609375
        assert ds.images[0, 0, 1, 0] == 0.99609375
        assert np.all(ds.sources == IDENTITY)
        assert ds.label_space.num_identities == 8
        assert ds.label_space.num_sequences == 0

    def test_bad_magic(self, tmp_path):
        ip, lp = write_idx_pair(tmp_path, np.zeros((1, 2, 2), np.uint8),
                                np.zeros(1, np.uint8))
        bad = tmp_path / "bad"
        bad.write_bytes(b"\x00\x00\x08\x09" + ip.read_bytes()[4:])
        with pytest.raises(FormatError):
            load_idx(bad, lp)

    def test_count_mismatch(self, tmp_path):
        ip, _ = write_idx_pair(tmp_path, np.zeros((2, 2, 2), np.uint8),
                               np.zeros(2, np.uint8))
        lp = tmp_path / "short.idx1-ubyte"
        lp.write_bytes(struct.pack(">II", 0x801, 1) + b"\x00")
        with pytest.raises(ConsistencyError):
            load_idx(ip, lp)

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = Rng(5)
        px = (rng.uniform_array(3 * 4 * 4) * 256).astype(np.uint8).reshape(3, 4, 4)
        labels = np.array([0, 1, 2], dtype=np.uint8)
        ip, lp = write_idx_pair(tmp_path, px, labels)
        ds = load_idx(ip, lp)
        ip2, lp2 = tmp_path / "i2", tmp_path / "l2"
        save_idx(ds, ip2, lp2)
        assert ip2.read_bytes() == ip.read_bytes()
        assert lp2.read_bytes() == lp.read_bytes()


class TestSynthetic:
    def test_zero_spread_degenerate(self):
        ds = make_synthetic_clusters(Rng(1), 3, 4, 5, spread=0.0, separation=2.0)
        for c in range(3):
            block = ds.images[ds.labels == c]
            assert np.all(block == block[0])

    def test_counts_and_labels(self):
        ds = make_synthetic_clusters(Rng(2), 2, 3, 4, 0.1, 1.0)
        assert len(ds) == 6
        assert list(ds.labels) == [0, 0, 0, 1, 1, 1]

    def test_nearest_centroid_separable(self):
        ds = make_synthetic_clusters(Rng(3), 10, 100, 8, spread=0.1,
                                     separation=1.0)
        means = np.stack([ds.images[ds.labels == c].mean(axis=0)
                          for c in range(10)])
        d = ((ds.images[:, None, :] - means[None]) ** 2).sum(axis=2)
        assert np.array_equal(d.argmin(axis=1), ds.labels)

    def test_deterministic(self):
        a = make_synthetic_clusters(Rng(4), 3, 5, 2, 0.5, 1.0)
        b = make_synthetic_clusters(Rng(4), 3, 5, 2, 0.5, 1.0)
        assert np.array_equal(a.images, b.images)


def ten_class_dataset(per_class=30, seed=9):
    return make_synthetic_clusters(Rng(seed), 10, per_class, 3, 0.2, 1.0)


class TestSplit:
    def test_partition_property(self):
        ds = split_identity_sequence(ten_class_dataset(), Rng(10), 5, 2, 5)
        assert ds.label_space.num_identities == 5
        id_truth = set(ds.true_labels[ds.sources == IDENTITY].tolist())
        seq_truth = set(ds.true_labels[ds.sources == SEQUENCE].tolist())
        assert id_truth & seq_truth == set()
        assert len(id_truth) == 5 and len(seq_truth) == 5

    def test_no_overlap_many_seeds(self):
        base = ten_class_dataset(per_class=12)
        for seed in range(100):
            ds = split_identity_sequence(base, Rng(seed), 4, 1, 4)
            id_truth = set(ds.true_labels[ds.sources == IDENTITY].tolist())
            seq_truth = set(ds.true_labels[ds.sources == SEQUENCE].tolist())
            assert not (id_truth & seq_truth)
            assert ds.labels.max() == ds.label_space.total - 1

    def test_singleton_sequences(self):
        ds = split_identity_sequence(ten_class_dataset(), Rng(11), 5, 1, 1)
        seq_labels = ds.labels[ds.sources == SEQUENCE]
        _, counts = np.unique(seq_labels, return_counts=True)
        assert np.all(counts == 1)

    def test_conservation(self):
        base = ten_class_dataset()
        ds = split_identity_sequence(base, Rng(12), 5, 3, 7)
        n_seq_samples = int((ds.sources == SEQUENCE).sum())
        held_out = set(ds.true_labels[ds.sources == SEQUENCE].tolist())
        expected = sum(int((base.labels == c).sum()) for c in held_out)
        assert n_seq_samples == expected
        hist = sequence_length_histogram(ds)
        assert sum(k * v for k, v in hist.items()) == n_seq_samples

    def test_too_many_identity_classes(self):
        with pytest.raises(ParameterError):
            split_identity_sequence(ten_class_dataset(), Rng(0), 10, 1, 2)


class TestBatches:
    def test_fixed_fraction_counts(self):
        ds = split_identity_sequence(ten_class_dataset(50), Rng(1), 5, 2, 6)
        plan = BatchPlan(batch_size=32, sequence_fraction=0.5, shuffle_seed=3)
        for idx in epoch_batches(ds, plan, 0):
            assert (ds.sources[idx] == IDENTITY).sum() == 16
            assert (ds.sources[idx] == SEQUENCE).sum() == 16

    def test_identity_only_stream(self):
        ds = ten_class_dataset()
        plan = BatchPlan(batch_size=16, shuffle_seed=0)
        it = iterate_batches(ds, plan)
        for _ in range(5):
            assert np.all(next(it).sources == IDENTITY)

    def test_epoch_is_permutation(self):
        ds = ten_class_dataset()
        plan = BatchPlan(batch_size=7, shuffle_seed=5)
        seen = np.concatenate(epoch_batches(ds, plan, 0))
        assert np.array_equal(np.sort(seen), np.arange(len(ds)))

    def test_fraction_with_empty_side(self):
        ds = ten_class_dataset()  # identity only
        with pytest.raises(ConfigurationError):
            epoch_batches(ds, BatchPlan(8, sequence_fraction=0.5), 0)

    def test_stream_resume_matches(self):
        ds = ten_class_dataset()
        plan = BatchPlan(batch_size=13, shuffle_seed=2)
        full = iterate_batches(ds, plan)
        batches = [next(full).indices for _ in range(40)]
        resumed = iterate_batches(ds, plan, start_iteration=25)
        for k in range(25, 40):
            assert np.array_equal(next(resumed).indices, batches[k])

    def test_deterministic_across_recreation(self):
        ds = ten_class_dataset()
        plan = BatchPlan(batch_size=8, shuffle_seed=77)
        a = [b.indices for b in
             (next(iterate_batches(ds, plan)) for _ in range(1))]
        b = [next(iterate_batches(ds, plan)).indices]
        assert np.array_equal(a[0], b[0])


class TestSqfd:
    def test_roundtrip_identity_dataset(self, tmp_path):
        ds = ten_class_dataset()
        p = tmp_path / "a.sqfd"
        write_sqfd(ds, p)
        back = read_sqfd(p)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.sources, ds.sources)
        assert back.label_space == ds.label_space
        # version 1 when true labels coincide with labels
        assert struct.unpack_from("<I", p.read_bytes(), 4)[0] == 1

    def test_roundtrip_split_dataset(self, tmp_path):
        ds = split_identity_sequence(ten_class_dataset(), Rng(4), 5, 2, 4)
        p = tmp_path / "b.sqfd"
        write_sqfd(ds, p)
        back = read_sqfd(p)
        assert np.array_equal(back.true_labels, ds.true_labels)
        assert np.array_equal(back.labels, ds.labels)
        assert struct.unpack_from("<I", p.read_bytes(), 4)[0] == 2

    def test_deterministic_bytes(self, tmp_path):
        ds = make_synthetic_clusters(Rng(6), 4, 3, 2, 0.3, 1.0)
        p1, p2 = tmp_path / "x.sqfd", tmp_path / "y.sqfd"
        write_sqfd(ds, p1)
        write_sqfd(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.sqfd"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError):
            read_sqfd(p)


class TestDatasetInvariants:
    def test_label_band_enforced(self):
        space = LabelSpace(2, 1)
        with pytest.raises(LabelError):
            Dataset(np.zeros((1, 2)), [2], [IDENTITY], space)
        with pytest.raises(LabelError):
            Dataset(np.zeros((1, 2)), [0], [SEQUENCE], space)

    def test_label_range(self):
        with pytest.raises(LabelError):
            Dataset(np.zeros((1, 2)), [5], [IDENTITY], LabelSpace(2))
