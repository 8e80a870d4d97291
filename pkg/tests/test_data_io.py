"""Tests for dataset generators, CSV loading, checkpoints and the atomic writers."""

import json

import numpy as np
import pytest

from data_io import (
    gen_blobs,
    gen_two_moons,
    load_candidates,
    load_checkpoint,
    load_csv,
    load_dataset_meta,
    read_jsonl,
    read_records_csv,
    save_candidates,
    save_checkpoint,
    save_csv,
    write_json,
    write_jsonl,
    write_records_csv,
)
from errors import CheckpointFormatError, CSVParseError, RejectedInputError
from model_core import init_params
from models import CandidateModel, MLPSpec


class TestGenerators:

    def test_noiseless_moons_lie_on_half_circles(self):
        data = gen_two_moons(n=100, noise_sigma=0.0, test_frac=0.2, seed=0)
        x, y = data.features[:, 0], data.features[:, 1]
        outer = data.labels == 0
        np.testing.assert_allclose(x[outer] ** 2 + y[outer] ** 2, 1.0, atol=1e-12)
        np.testing.assert_allclose((x[~outer] - 1) ** 2 + (y[~outer] - 0.5) ** 2, 1.0, atol=1e-12)

    def test_moons_split_is_stratified(self, moons):
        assert moons.X_train.shape[0] == 160
        assert moons.X_test.shape[0] == 40
        assert abs(np.sum(moons.y_test == 0) - np.sum(moons.y_test == 1)) <= 1

    def test_moons_are_seeded(self):
        a = gen_two_moons(n=50, noise_sigma=0.1, test_frac=0.2, seed=3)
        b = gen_two_moons(n=50, noise_sigma=0.1, test_frac=0.2, seed=3)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.split, b.split)

    def test_blobs_shape_and_provenance(self, blobs):
        assert blobs.features.shape == (300, 2)
        assert blobs.n_classes == 3
        assert np.bincount(blobs.labels).tolist() == [100, 100, 100]
        assert len(blobs.provenance["centers"]) == 3
        assert 0.0 <= blobs.provenance["nearest_center_acc"] <= 1.0

    def test_tiny_moons_rejected(self):
        with pytest.raises(RejectedInputError):
            gen_two_moons(n=10, noise_sigma=0.1, test_frac=0.2, seed=0)

    def test_bad_test_frac_rejected(self):
        with pytest.raises(RejectedInputError):
            gen_blobs(n=100, n_classes=2, dim=2, centers_scale=5.0, sigma=1.0, test_frac=1.0, seed=0)


class TestCSV:

    def _write(self, tmp_path, text, name="data.csv"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_explicit_split_without_normalization(self, tmp_path):
        path = self._write(tmp_path, "a,b,label,split\n1,2,0,train\n3,4,1,train\n5,6,1,test\n")
        data = load_csv(path, split_column="split", normalize=False)
        np.testing.assert_array_equal(data.X_test, [[5.0, 6.0]])
        assert data.n_classes == 2
        assert data.provenance["feature_columns"] == ["a", "b"]

    def test_normalization_uses_train_statistics(self, tmp_path):
        path = self._write(tmp_path, "a,c,label,split\n0,7,0,train\n2,7,1,train\n4,7,1,test\n")
        data = load_csv(path, split_column="split")
        np.testing.assert_allclose(data.X_train[:, 0], [-1.0, 1.0])
        assert data.X_test[0, 0] == pytest.approx(3.0)
        # constant column untouched
        np.testing.assert_array_equal(data.features[:, 1], 7.0)
        assert data.provenance["train_std"] == [1.0, 0.0]

    def test_non_numeric_cell_reports_line(self, tmp_path):
        path = self._write(tmp_path, "a,label\n1,0\n2,1\nabc,0\n")
        with pytest.raises(CSVParseError) as info:
            load_csv(path)
        assert info.value.line_number == 4
        assert str(info.value).startswith("line 4:")

    def test_ragged_row_reports_line(self, tmp_path):
        path = self._write(tmp_path, "a,b,label\n1,2,0\n1,1\n")
        with pytest.raises(CSVParseError) as info:
            load_csv(path)
        assert info.value.line_number == 3

    def test_non_integer_label(self, tmp_path):
        path = self._write(tmp_path, "a,label\n1,0.5\n")
        with pytest.raises(CSVParseError):
            load_csv(path)

    def test_unknown_label_column(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1,0\n")
        with pytest.raises(CSVParseError) as info:
            load_csv(path)
        assert info.value.line_number == 1

    def test_bad_split_tag(self, tmp_path):
        path = self._write(tmp_path, "a,label,split\n1,0,train\n2,1,validate\n")
        with pytest.raises(CSVParseError):
            load_csv(path, split_column="split")

    def test_save_then_load_preserves_features(self, tmp_path, blobs):
        path = save_csv(blobs, tmp_path / "blobs.csv")
        loaded = load_csv(path, split_column="split", normalize=False)
        np.testing.assert_array_equal(loaded.features, blobs.features)
        np.testing.assert_array_equal(loaded.labels, blobs.labels)
        np.testing.assert_array_equal(loaded.split, blobs.split)
        assert load_dataset_meta(path)["provenance"]["generator"] == "blobs"


class TestCheckpoints:

    def test_round_trip_is_exact(self, tmp_path, small_spec):
        params = init_params(small_spec, 0)
        save_checkpoint(tmp_path / "m.ckpt", small_spec, params)
        spec, loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert spec == small_spec
        np.testing.assert_array_equal(loaded, params)

    def test_header_format(self, tmp_path, small_spec):
        save_checkpoint(tmp_path / "m.ckpt", small_spec, init_params(small_spec, 0))
        data = (tmp_path / "m.ckpt").read_bytes()
        assert data.startswith(b"TODLAB-CKPT v1\n2,8,8,3\n")
        assert len(data) == len(b"TODLAB-CKPT v1\n2,8,8,3\n") + 8 * small_spec.n_params

    def test_truncated_payload(self, tmp_path, small_spec):
        save_checkpoint(tmp_path / "m.ckpt", small_spec, init_params(small_spec, 0))
        path = tmp_path / "m.ckpt"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"TODLAB-CKPT v2\n1,1\n" + np.zeros(2).astype("<f8").tobytes())
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE v1\n1,1\n" + np.zeros(2).astype("<f8").tobytes())
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_wrong_param_count_rejected(self, tmp_path, small_spec):
        with pytest.raises(RejectedInputError):
            save_checkpoint(tmp_path / "m.ckpt", small_spec, np.zeros(3))

    def test_candidates_round_trip(self, tmp_path, small_spec):
        candidates = [
            CandidateModel(id=i, params=init_params(small_spec, i), baseline=init_params(small_spec, 10 + i),
                           final_train_loss=0.1 * i, seed=i, epochs=5, gap_steps=3)
            for i in range(2)
        ]
        save_candidates(tmp_path / "pool", small_spec, candidates)
        spec, loaded = load_candidates(tmp_path / "pool")
        assert spec == small_spec
        for original, restored in zip(candidates, loaded):
            assert restored.id == original.id and restored.epochs == 5
            np.testing.assert_array_equal(restored.params, original.params)
            np.testing.assert_array_equal(restored.baseline, original.baseline)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointFormatError):
            load_candidates(tmp_path)


class TestWriters:

    def test_records_csv_cells(self, tmp_path):
        path = write_records_csv(tmp_path / "out" / "r.csv",
                                 [{"a": 0.1, "b": None, "c": True}, {"a": 2, "c": False}], ("a", "b", "c"))
        assert path.read_text(encoding="utf-8") == "a,b,c\n0.1,,true\n2,,false\n"
        assert read_records_csv(path)[0] == {"a": "0.1", "b": "", "c": "true"}

    def test_json_handles_numpy(self, tmp_path):
        path = write_json(tmp_path / "x.json", {"arr": np.arange(2), "n": np.int64(3), 1: "key"})
        assert json.loads(path.read_text(encoding="utf-8")) == {"arr": [0, 1], "n": 3, "1": "key"}

    def test_jsonl(self, tmp_path):
        path = write_jsonl(tmp_path / "x.jsonl", [{"a": 1}, {"a": 2}])
        assert read_jsonl(path) == [{"a": 1}, {"a": 2}]

    def test_no_temp_files_left(self, tmp_path):
        write_json(tmp_path / "x.json", {"a": 1})
        write_json(tmp_path / "x.json", {"a": 2})
        assert [p.name for p in tmp_path.iterdir()] == ["x.json"]
