import csv
import struct

import numpy as np
import pytest

from uflst import cluster, data, evaluate
from uflst.errors import DatasetParseError, InputError


class TestSynthetic:
    def test_shapes_and_labels(self):
        spec = data.SyntheticSpec(num_classes=4, points_per_class=10, dim=6,
                                  heldout_classes=2, seed=0)
        train, test = data.generate_synthetic(spec)
        assert train.features.shape == (40, 6)
        assert test.features.shape == (20, 6)
        assert np.array_equal(np.unique(train.labels), np.arange(4))
        assert np.array_equal(np.unique(test.labels), np.arange(2))
        assert train.split == "train" and test.split == "test"

    def test_deterministic(self):
        spec = data.SyntheticSpec(num_classes=3, points_per_class=5, dim=4, seed=9)
        a, _ = data.generate_synthetic(spec)
        b, _ = data.generate_synthetic(spec)
        assert np.array_equal(a.features, b.features)

    def test_centers_on_sphere(self):
        spec = data.SyntheticSpec(num_classes=6, points_per_class=200, dim=8,
                                  separation=50.0, within_std=1.0,
                                  heldout_classes=0, seed=1)
        train, _ = data.generate_synthetic(spec)
        for c in range(6):
            center = train.features[train.labels == c].mean(axis=0)
            # empirical mean of 200 points: radius within sampling noise
            assert np.linalg.norm(center) == pytest.approx(50.0, abs=0.5)

    def test_noise_dims_are_class_independent(self):
        spec = data.SyntheticSpec(num_classes=4, points_per_class=100, dim=10,
                                  separation=20.0, within_std=1.0,
                                  heldout_classes=0, seed=2,
                                  noise_dims=4, noise_std=5.0)
        train, _ = data.generate_synthetic(spec)
        info = train.features[:, :6]
        noise = train.features[:, 6:]
        # class means separate in the informative subspace only
        info_means = np.stack([info[train.labels == c].mean(0) for c in range(4)])
        noise_means = np.stack([noise[train.labels == c].mean(0) for c in range(4)])
        assert np.ptp(info_means) > 10.0
        assert np.all(np.abs(noise_means) < 2.5)  # 5/sqrt(100) * few sigma
        assert np.std(noise) == pytest.approx(5.0, rel=0.1)

    def test_validation(self):
        with pytest.raises(ValueError):
            data.SyntheticSpec(num_classes=0).validate()
        with pytest.raises(ValueError):
            data.SyntheticSpec(dim=4, noise_dims=4).validate()
        with pytest.raises(ValueError):
            data.SyntheticSpec(within_std=-1.0).validate()

    def test_subset(self):
        spec = data.SyntheticSpec(num_classes=2, points_per_class=5, dim=3)
        train, _ = data.generate_synthetic(spec)
        sub = train.subset([0, 5, 9])
        assert sub.n == 3
        assert np.array_equal(sub.labels, train.labels[[0, 5, 9]])


class TestRaySynthetic:
    def make_spec(self, **kw):
        base = dict(kind="rays", num_classes=20, points_per_class=50, dim=32,
                    heldout_classes=5, seed=2)
        base.update(kw)
        return data.SyntheticSpec(**base)

    def test_shapes_and_labels(self):
        train, test = data.generate_synthetic(self.make_spec())
        assert train.features.shape == (1000, 32)
        assert test.features.shape == (250, 32)
        assert np.array_equal(np.unique(train.labels), np.arange(20))
        assert np.array_equal(np.unique(test.labels), np.arange(5))
        assert train.split == "train" and test.split == "test"

    def test_deterministic(self):
        a_train, a_test = data.generate_synthetic(self.make_spec())
        b_train, b_test = data.generate_synthetic(self.make_spec())
        assert np.array_equal(a_train.features, b_train.features)
        assert np.array_equal(a_test.features, b_test.features)

    def test_radii_within_declared_range(self):
        spec = self.make_spec(radial_noise=0.0, heldout_radial_noise=0.0)
        train, test = data.generate_synthetic(spec)
        for ds in (train, test):
            r = np.linalg.norm(ds.features, axis=1)
            assert np.all(r >= spec.radius_min)
            assert np.all(r <= spec.radius_min * spec.radius_ratio)

    def test_class_directions_are_unit_rays(self):
        spec = self.make_spec(radial_noise=0.0, heldout_radial_noise=0.0)
        train, _ = data.generate_synthetic(spec)
        for c in range(20):
            pts = train.features[train.labels == c]
            dirs = pts / np.linalg.norm(pts, axis=1, keepdims=True)
            # all points of a noiseless class lie on a single ray
            assert np.max(np.abs(dirs - dirs[0])) < 1e-12

    def test_heldout_directions_hug_tight_rays(self):
        spec = self.make_spec(radial_noise=0.0, heldout_radial_noise=0.0)
        train, test = data.generate_synthetic(spec)

        def class_dirs(ds, k):
            out = []
            for c in range(k):
                p = ds.features[ds.labels == c][0]
                out.append(p / np.linalg.norm(p))
            return np.array(out)

        train_dirs = class_dirs(train, 20)
        held_dirs = class_dirs(test, 5)
        cos = held_dirs @ train_dirs.T
        hosts = np.argmax(cos, axis=1)
        # each heldout class sits next to a distinct tight host (classes 15-19)
        assert np.array_equal(np.sort(hosts), np.arange(15, 20))
        angles = np.arccos(np.clip(cos[np.arange(5), hosts], -1, 1))
        assert np.all(angles < 0.05)
        # but never coincides with its host exactly
        assert np.all(angles > 1e-4)

    def test_spread_rays_are_separated(self):
        spec = self.make_spec(radial_noise=0.0, heldout_radial_noise=0.0)
        train, _ = data.generate_synthetic(spec)
        dirs = []
        for c in range(20):
            p = train.features[train.labels == c][0]
            dirs.append(p / np.linalg.norm(p))
        dirs = np.array(dirs)
        cos = dirs @ dirs.T
        np.fill_diagonal(cos, -1.0)
        angles = np.arccos(np.clip(cos, -1, 1))
        np.fill_diagonal(angles, np.inf)
        # greedy max-min spacing keeps every pair of rays apart
        assert angles.min() > 0.01

    def test_validation(self):
        with pytest.raises(ValueError):
            data.SyntheticSpec(kind="spiral").validate()
        with pytest.raises(ValueError):
            self.make_spec(heldout_classes=3).validate()
        with pytest.raises(ValueError):
            self.make_spec(radius_ratio=0.5).validate()
        with pytest.raises(ValueError):
            self.make_spec(tight_classes=0).validate()
        with pytest.raises(ValueError):
            self.make_spec(direction_candidates=10).validate()


class TestRaw64:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(7, 3))
        path = tmp_path / "x.raw64"
        data.save_raw64(path, feats)
        ds = data.load_matrix_dataset(path, "raw64")
        assert np.array_equal(ds.features, feats)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.raw64"
        path.write_bytes(b"WRONGMAG" + struct.pack("<II", 1, 1) + b"\0" * 8)
        with pytest.raises(DatasetParseError, match="byte 0"):
            data.load_matrix_dataset(path, "raw64")

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "x.raw64"
        data.save_raw64(path, np.zeros((4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(DatasetParseError, match="payload"):
            data.load_matrix_dataset(path, "raw64")

    def test_nonfinite_rejected(self, tmp_path):
        path = tmp_path / "x.raw64"
        data.save_raw64(path, np.array([[1.0, np.nan]]))
        with pytest.raises(InputError):
            data.load_matrix_dataset(path, "raw64")


class TestDsv:
    def test_basic(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("1.0,2.0\n3.0,4.0\n\n5.0,6.0\n")
        ds = data.load_matrix_dataset(path, "dsv")
        assert np.array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])

    def test_label_column(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("1.0,2.0,0\n3.0,4.0,1\n")
        ds = data.load_matrix_dataset(path, "dsv", label_column=True)
        assert ds.features.shape == (2, 2)
        assert np.array_equal(ds.labels, [0, 1])

    def test_ragged_row_line_number(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("1,2\n3,4\n5,6,7\n")
        with pytest.raises(DatasetParseError, match="line 3"):
            data.load_matrix_dataset(path, "dsv")

    def test_non_numeric_line_number(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("1,2\n3,oops\n")
        with pytest.raises(DatasetParseError, match="line 2"):
            data.load_matrix_dataset(path, "dsv")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("\n\n")
        with pytest.raises(DatasetParseError):
            data.load_matrix_dataset(path, "dsv")

    def test_alternate_delimiter(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("1\t2\n3\t4\n")
        ds = data.load_matrix_dataset(path, "dsv", delimiter="\t")
        assert ds.features.shape == (2, 2)


class TestIdx:
    def write_idx(self, path, array):
        array = np.asarray(array, dtype=np.uint8)
        with open(path, "wb") as f:
            f.write(bytes([0, 0, 0x08, array.ndim]))
            for d in array.shape:
                f.write(struct.pack(">I", d))
            f.write(array.tobytes())

    def test_images_flattened_scaled(self, tmp_path):
        path = tmp_path / "x.idx"
        imgs = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        self.write_idx(path, imgs)
        ds = data.load_matrix_dataset(path, "idx")
        assert ds.features.shape == (2, 12)
        assert np.allclose(ds.features, imgs.reshape(2, 12) / 255.0)

    def test_bad_type_code(self, tmp_path):
        path = tmp_path / "x.idx"
        path.write_bytes(bytes([0, 0, 0x0D, 1]) + struct.pack(">I", 0))
        with pytest.raises(DatasetParseError, match="byte 2"):
            data.load_matrix_dataset(path, "idx")

    def test_truncated_pixels(self, tmp_path):
        path = tmp_path / "x.idx"
        self.write_idx(path, np.zeros((3, 4), dtype=np.uint8))
        blob = path.read_bytes()
        path.write_bytes(blob[:-2])
        with pytest.raises(DatasetParseError, match="pixel"):
            data.load_matrix_dataset(path, "idx")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DatasetParseError):
            data.load_matrix_dataset(tmp_path / "x", "parquet")


class TestNumberFormatting:
    def test_round_trip_float64(self):
        rng = np.random.default_rng(1)
        for x in rng.normal(size=50) * 10.0 ** rng.integers(-20, 20, size=50):
            assert float(data.format_number(float(x))) == x

    def test_nan_is_empty(self):
        assert data.format_number(float("nan")) == ""

    def test_int_passthrough(self):
        assert data.format_number(7) == "7"
        assert data.format_number(np.int64(7)) == "7"


class TestMetricsOutput:
    def make_history(self):
        return [
            evaluate.RoundMetrics(1, 0.5, 10, 3, 9.7, 0.81, 0.05, 1.234),
            evaluate.RoundMetrics(2, float("nan"), 0, 100, 0.0, float("nan"),
                                  float("nan"), float("nan")),
        ]

    def test_header_and_rows(self, tmp_path):
        path = tmp_path / "metrics.csv"
        data.write_metrics(self.make_history(), path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == evaluate.RoundMetrics.FIELDS
        assert rows[1][0] == "1"
        assert float(rows[1][1]) == 0.5
        # nan cells are empty
        assert rows[2][1] == "" and rows[2][5] == ""

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(InputError):
            data.write_metrics([], tmp_path / "metrics.csv")


class TestPseudoLabelOutput:
    def test_layout(self, tmp_path):
        pl = cluster.build_pseudo_labeled_set(
            np.array([0, cluster.NOISE, 0, 1])
        )
        path = tmp_path / "labels.csv"
        data.write_pseudo_labels(path, pl, 4, 3)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["index", "pseudo_label", "round"]
        assert rows[1] == ["0", "0", "3"]
        assert rows[2] == ["1", "-1", "3"]
        assert rows[4] == ["3", "1", "3"]
