import struct

import numpy as np
import pytest

from embed_eval.dataio import (
    LabeledDataset,
    SplitSpec,
    class_disjoint_split,
    load_dataset,
    load_features,
    load_labels,
    save_features,
    save_labels,
    subsample_per_class,
)
from embed_eval.errors import ConfigError, DataFormatError


def _emb1(n, d, values):
    return struct.pack("<4sII", b"EMB1", n, d) + np.asarray(values, "<f4").tobytes()


class TestFeatureFiles:
    def test_decode_binary(self, tmp_path):
        p = tmp_path / "x.emb1"
        p.write_bytes(_emb1(2, 3, [1, 2, 3, 4, 5, 6]))
        np.testing.assert_array_equal(load_features(p), [[1, 2, 3], [4, 5, 6]])

    def test_empty_payload_rejected(self, tmp_path):
        p = tmp_path / "x.emb1"
        p.write_bytes(_emb1(0, 3, []))
        with pytest.raises(DataFormatError, match="n_rows must be >= 1"):
            load_features(p)

    def test_decode_csv(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1.0,2.0\n3.0,4.0")
        np.testing.assert_array_equal(load_features(p), [[1, 2], [3, 4]])

    @pytest.mark.parametrize(
        "raw, msg",
        [
            (b"EMB", "truncated"),
            (b"XXXX" + struct.pack("<II", 1, 1) + b"\0\0\0\0", "bad magic"),
            (_emb1(2, 2, [1, 2, 3]), "shape mismatch"),
            (_emb1(1, 2, [1, np.nan]), "row 0, column 1"),
            (_emb1(2, 1, [1, np.inf]), "row 1, column 0"),
        ],
    )
    def test_malformed_binary(self, tmp_path, raw, msg):
        p = tmp_path / "bad.emb1"
        p.write_bytes(raw)
        with pytest.raises(DataFormatError, match=msg):
            load_features(p)

    def test_csv_ragged(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("1,2\n3\n")
        with pytest.raises(DataFormatError, match="row 1"):
            load_features(p)

    def test_round_trip_scalar(self, tmp_path):
        save_features([[0.5]], tmp_path / "a.emb1")
        np.testing.assert_array_equal(load_features(tmp_path / "a.emb1"), [[0.5]])

    @pytest.mark.parametrize("suffix", [".emb1", ".csv"])
    def test_round_trip_random(self, tmp_path, suffix):
        m = np.random.default_rng(3).standard_normal((3, 4)).astype(np.float32).astype(np.float64)
        save_features(m, tmp_path / f"m{suffix}")
        back = load_features(tmp_path / f"m{suffix}")
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, m)

    def test_stored_precision_is_float32(self, tmp_path):
        m = np.array([[1 / 3]])
        save_features(m, tmp_path / "a.emb1")
        once = load_features(tmp_path / "a.emb1")
        assert once[0, 0] == np.float32(1 / 3)
        save_features(once, tmp_path / "b.emb1")
        assert (tmp_path / "a.emb1").read_bytes() == (tmp_path / "b.emb1").read_bytes()

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            save_features([[1.0]], tmp_path / "no" / "such" / "dir" / "x.emb1")

    def test_binary_layout(self, tmp_path):
        save_features([[1.0, 2.0]], tmp_path / "x.emb1")
        raw = (tmp_path / "x.emb1").read_bytes()
        assert raw[:4] == b"EMB1"
        assert struct.unpack("<II", raw[4:12]) == (1, 2)
        assert len(raw) == 12 + 8


class TestLabels:
    def test_decode(self, tmp_path):
        p = tmp_path / "l.csv"
        p.write_text("index,label\n0,5\n1,5\n2,7")
        labels, ids = load_labels(p)
        np.testing.assert_array_equal(labels, [5, 5, 7])
        assert ids == ["0", "1", "2"]

    def test_aligned_by_index(self, tmp_path):
        p = tmp_path / "l.csv"
        p.write_text("index,label\n2,9\n0,1\n1,4\n")
        np.testing.assert_array_equal(load_labels(p)[0], [1, 4, 9])

    @pytest.mark.parametrize(
        "text, msg",
        [
            ("index,label\n0,1\n0,2\n", "duplicate index 0"),
            ("index,label\n0,1\n2,2\n", "missing index 1"),
            ("index,label\n0,-1\n", "negative label"),
            ("idx,label\n0,1\n", "header"),
            ("index,label\n", "no label rows"),
            ("index,label\n0,a\n", "non-integer"),
        ],
    )
    def test_errors(self, tmp_path, text, msg):
        p = tmp_path / "l.csv"
        p.write_text(text)
        with pytest.raises(DataFormatError, match=msg):
            load_labels(p)

    def test_save_load(self, tmp_path):
        save_labels([3, 1, 2], tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "index,label"
        np.testing.assert_array_equal(load_labels(tmp_path / "l.csv")[0], [3, 1, 2])

    def test_load_dataset_length_mismatch(self, tmp_path):
        save_features(np.zeros((3, 2)), tmp_path / "x.emb1")
        save_labels([0, 1], tmp_path / "l.csv")
        with pytest.raises(DataFormatError, match="2 labels for 3"):
            load_dataset(tmp_path / "x.emb1", tmp_path / "l.csv")


def _random_dataset(rng, n_classes=None, n=None):
    n_classes = n_classes or int(rng.integers(2, 12))
    n = n or int(rng.integers(n_classes, 80))
    labels = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, n - n_classes)])
    labels = rng.permutation(labels) * int(rng.integers(1, 4))  # sparse class ids
    return LabeledDataset(rng.standard_normal((n, 3)), labels)


class TestSplit:
    def test_first_half(self):
        ds = LabeledDataset(np.zeros((8, 1)), [3, 2, 1, 0, 0, 1, 2, 3])
        train, test = class_disjoint_split(ds, SplitSpec())
        assert set(train.labels) == {0, 1}
        assert set(test.labels) == {2, 3}

    def test_cub_class_counts(self):
        # 200 classes -> 100 / 100, as for CUB
        ds = LabeledDataset(np.zeros((400, 1)), np.repeat(np.arange(200), 2))
        train, test = class_disjoint_split(ds)
        assert len(train.classes) == 100 and len(test.classes) == 100

    def test_odd_class_count_rounds_up_for_train(self):
        ds = LabeledDataset(np.zeros((5, 1)), [0, 1, 2, 3, 4])
        train, test = class_disjoint_split(ds)
        assert list(train.classes) == [0, 1, 2]

    def test_one_class(self):
        with pytest.raises(ConfigError):
            class_disjoint_split(LabeledDataset(np.zeros((3, 1)), [4, 4, 4]))

    def test_explicit(self):
        ds = LabeledDataset(np.zeros((4, 1)), [0, 1, 2, 3])
        train, test = class_disjoint_split(ds, SplitSpec("explicit", (3, 0), (1, 2)))
        assert set(train.labels) == {0, 3}

    @pytest.mark.parametrize("tr, te", [((0, 1), (1, 2, 3)), ((0,), (1, 2))])
    def test_explicit_invalid(self, tr, te):
        ds = LabeledDataset(np.zeros((4, 1)), [0, 1, 2, 3])
        with pytest.raises(ConfigError):
            class_disjoint_split(ds, SplitSpec("explicit", tr, te))

    def test_partition_property(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            ds = _random_dataset(rng)
            train, test = class_disjoint_split(ds)
            assert not set(train.labels) & set(test.labels)
            assert sorted(train.ids + test.ids, key=int) == ds.ids
            assert len(train) + len(test) == len(ds)


class TestSubsample:
    def test_full_fraction_is_identity(self):
        ds = _random_dataset(np.random.default_rng(1))
        out = subsample_per_class(ds, 1.0, seed=5)
        np.testing.assert_array_equal(out.features, ds.features)
        assert out.ids == ds.ids

    def test_five_percent_of_sixty(self):
        ds = LabeledDataset(np.zeros((60, 1)), np.zeros(60, int))
        assert len(subsample_per_class(ds, 0.05, 0)) == 3

    def test_floor_guard(self):
        ds = LabeledDataset(np.zeros((4, 1)), [0, 0, 1, 1])
        out = subsample_per_class(ds, 0.05, 0)
        np.testing.assert_array_equal(out.labels, [0, 1])

    def test_round_half_up(self):
        ds = LabeledDataset(np.zeros((10, 1)), np.zeros(10, int))
        assert len(subsample_per_class(ds, 0.25, 0)) == 3  # 2.5 -> 3

    @pytest.mark.parametrize("fraction", [0.0, -0.1, 1.01])
    def test_fraction_range(self, fraction):
        ds = LabeledDataset(np.zeros((2, 1)), [0, 1])
        with pytest.raises(ConfigError):
            subsample_per_class(ds, fraction, 0)

    def test_deterministic_and_seed_dependent(self):
        ds = LabeledDataset(np.arange(200.0)[:, None], np.repeat(np.arange(4), 50))
        a = subsample_per_class(ds, 0.2, 11)
        b = subsample_per_class(ds, 0.2, 11)
        c = subsample_per_class(ds, 0.2, 12)
        assert a.ids == b.ids
        assert a.ids != c.ids

    def test_every_class_kept(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            ds = _random_dataset(rng)
            for f in (0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0):
                out = subsample_per_class(ds, f, 3)
                assert set(out.labels) == set(ds.labels)
                assert set(out.ids) <= set(ds.ids)
