"""Tests for seeds, fingerprints, atomic writes and model containers."""

import json

import numpy as np
import pytest

from workflow_recognition.utils import (
    ContainerError,
    atomic_write_text,
    derive_seed,
    fingerprint,
    read_container,
    sanitize_video_id,
    write_container,
)


class TestSeedsAndFingerprints:
    def test_derive_seed_is_stable(self):
        assert derive_seed(7, "video", 3) == derive_seed(7, "video", 3)
        assert derive_seed(7, "video", 3) != derive_seed(7, "video", 4)
        assert 0 <= derive_seed(0, "x") < 2 ** 32

    def test_fingerprint_ignores_key_order(self):
        assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
        assert fingerprint({"a": 1}) != fingerprint({"a": 2})


class TestSanitizeVideoId:
    def test_valid_ids(self):
        assert sanitize_video_id("video01") == "video01"
        assert sanitize_video_id("case_7-b") == "case_7-b"

    @pytest.mark.parametrize("video_id", ["../etc", "video 01", "a/b"])
    def test_invalid_ids(self, video_id):
        with pytest.raises(ValueError, match="Invalid video id"):
            sanitize_video_id(video_id)

    def test_empty_id(self):
        with pytest.raises(ValueError, match="cannot be empty"):
            sanitize_video_id("")


class TestAtomicWrite:
    def test_creates_parents_and_leaves_no_temp_files(self, tmp_path):
        path = tmp_path / "nested" / "out.txt"
        atomic_write_text(path, "hello\n")
        assert path.read_text() == "hello\n"
        assert [p.name for p in path.parent.iterdir()] == ["out.txt"]

    def test_overwrites(self, tmp_path):
        path = tmp_path / "out.txt"
        atomic_write_text(path, "one")
        atomic_write_text(path, "two")
        assert path.read_text() == "two"


class TestContainer:
    def _write(self, tmp_path):
        path = tmp_path / "model.json"
        arrays = {"weights": np.arange(6, dtype=float).reshape(2, 3) / 7, "counts": np.array([1, 2, 3])}
        write_container(path, "svm", {"C": 1.0}, arrays)
        return path, arrays

    def test_round_trip_is_exact(self, tmp_path):
        path, arrays = self._write(tmp_path)
        header, loaded = read_container(path, "svm")
        assert header == {"C": 1.0}
        np.testing.assert_array_equal(loaded["weights"], arrays["weights"])
        assert loaded["counts"].dtype == np.int64

    def test_wrong_kind(self, tmp_path):
        path, _ = self._write(tmp_path)
        with pytest.raises(ContainerError, match="expected 'hhmm'"):
            read_container(path, "hhmm")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ContainerError, match="not found"):
            read_container(tmp_path / "absent.json", "svm")

    def test_corrupted_json(self, tmp_path):
        path, _ = self._write(tmp_path)
        path.write_text(path.read_text()[:-10])
        with pytest.raises(ContainerError, match="Corrupted container"):
            read_container(path, "svm")

    def test_tampered_header(self, tmp_path):
        path, _ = self._write(tmp_path)
        document = json.loads(path.read_text())
        document["header"]["C"] = 2.0
        path.write_text(json.dumps(document))
        with pytest.raises(ContainerError, match="Checksum mismatch"):
            read_container(path, "svm")

    def test_missing_keys(self, tmp_path):
        path, _ = self._write(tmp_path)
        document = json.loads(path.read_text())
        del document["checksum"]
        path.write_text(json.dumps(document))
        with pytest.raises(ContainerError, match="missing keys: checksum"):
            read_container(path, "svm")
