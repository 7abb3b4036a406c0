"""Tests for reading, writing and validating dataset directories."""

import json

import numpy as np
import pytest

from workflow_recognition.corpus.dataset_io import (
    DatasetFormatError,
    dataset_fingerprint,
    read_dataset,
    validate_dataset,
    write_dataset,
)
from workflow_recognition.corpus.split import make_split


def _replace_line(path, number, transform):
    lines = path.read_text().splitlines()
    lines[number - 1] = transform(lines[number - 1])
    path.write_text("\n".join(lines) + "\n")


def _set_field(index, value):
    def transform(line):
        fields = line.split("\t")
        fields[index] = value
        return "\t".join(fields)
    return transform


class TestRoundTrip:
    def test_three_videos_bit_exact(self, tiny_videos, tmp_path):
        videos = tiny_videos[:3]
        write_dataset(videos, tmp_path, "cholec80")
        dataset = read_dataset(tmp_path)

        assert dataset.vocabulary == "cholec80"
        assert dataset.observation_shape == (16,)
        assert [v.video_id for v in dataset.videos] == [v.video_id for v in videos]
        for original, loaded in zip(videos, dataset.videos):
            np.testing.assert_array_equal(loaded.phases, original.phases)
            np.testing.assert_array_equal(loaded.tools, original.tools)
            np.testing.assert_array_equal(loaded.observations, original.observations)

    def test_empty_corpus(self, tmp_path):
        write_dataset([], tmp_path, "cholec80")
        dataset = read_dataset(tmp_path)
        assert dataset.videos == []
        assert dataset.observation_shape is None

    def test_annotations_without_observations(self, tiny_videos, tmp_path):
        video = tiny_videos[0]
        bare = type(video)(video_id=video.video_id, phases=video.phases, tools=video.tools)
        write_dataset([bare], tmp_path, "endovis")
        loaded = read_dataset(tmp_path).videos[0]
        assert loaded.observations is None
        np.testing.assert_array_equal(loaded.phases, video.phases)

    def test_split_is_persisted(self, tiny_videos, tmp_path):
        split = make_split([v.video_id for v in tiny_videos], 0.5, 2, seed=0)
        write_dataset(tiny_videos, tmp_path, "cholec80", split)
        assert read_dataset(tmp_path).split == split

    def test_mixed_observations_rejected(self, tiny_videos, tmp_path):
        video = tiny_videos[0]
        bare = type(video)(video_id="bare", phases=video.phases, tools=video.tools)
        with pytest.raises(ValueError, match="Either every video or no video"):
            write_dataset([video, bare], tmp_path, "cholec80")


class TestValidation:
    def test_pristine_dataset_has_no_problems(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos, tmp_path, "cholec80")
        assert validate_dataset(tmp_path) == []

    def test_wrong_tool_flag_count_reported_at_its_line(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:1], tmp_path, "cholec80")
        path = tmp_path / "video01.tsv"
        _replace_line(path, 3, _set_field(3, "1,0,0,0,0,0"))

        problems = validate_dataset(tmp_path)
        assert len(problems) == 1
        assert problems[0].line == 3
        assert problems[0].reason == "expected 7 binary tool flags, got '1,0,0,0,0,0'"
        assert str(problems[0]).endswith("video01.tsv:3: expected 7 binary tool flags, got '1,0,0,0,0,0'")

        with pytest.raises(DatasetFormatError) as excinfo:
            read_dataset(tmp_path)
        assert excinfo.value.line == 3

    def test_unknown_phase(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:1], tmp_path, "cholec80")
        _replace_line(tmp_path / "video01.tsv", 2, _set_field(2, "P9"))
        problems = validate_dataset(tmp_path)
        assert [(p.line, p.reason) for p in problems] == [(2, "phase 'P9' is not in the vocabulary")]

    def test_timestamp_gap(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:1], tmp_path, "cholec80")
        _replace_line(tmp_path / "video01.tsv", 4, _set_field(1, "5"))
        problems = validate_dataset(tmp_path)
        assert problems[0].line == 4
        assert problems[0].reason == "timestamp 5 is not consecutive (expected 2)"

    def test_every_problem_is_listed(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:2], tmp_path, "cholec80")
        _replace_line(tmp_path / "video01.tsv", 2, _set_field(2, "P9"))
        _replace_line(tmp_path / "video02.tsv", 5, _set_field(3, "2,0,0,0,0,0,0"))
        problems = validate_dataset(tmp_path)
        assert [p.line for p in problems] == [2, 5]

    def test_missing_header(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:1], tmp_path, "cholec80")
        _replace_line(tmp_path / "video01.tsv", 1, lambda line: "video01")
        problems = validate_dataset(tmp_path)
        assert problems[0].line == 1 and "header" in problems[0].reason

    def test_missing_manifest(self, tmp_path):
        tmp_path.joinpath("video01.tsv").write_text("#schema=1\n")
        problems = validate_dataset(tmp_path)
        assert problems[0].reason == "manifest not found"

    @pytest.mark.parametrize("content", ["[]", "3", '"videos"', "null"])
    def test_manifest_must_be_an_object(self, tmp_path, content):
        tmp_path.joinpath("manifest.json").write_text(content)
        problems = validate_dataset(tmp_path)
        assert [p.reason for p in problems] == ["manifest must be a JSON object"]
        with pytest.raises(DatasetFormatError, match="must be a JSON object"):
            read_dataset(tmp_path)

    def test_missing_directory(self, tmp_path):
        problems = validate_dataset(tmp_path / "absent")
        assert problems[0].reason == "dataset directory not found"

    def test_unknown_vocabulary(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:1], tmp_path, "cholec80")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["vocabulary"] = "m2cai"
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        assert validate_dataset(tmp_path)[0].reason == "unknown vocabulary 'm2cai'"

    def test_unsafe_video_id(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:1], tmp_path, "cholec80")
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["videos"].append("../outside")
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        problems = validate_dataset(tmp_path)
        assert any("Invalid video id" in p.reason for p in problems)


class TestFingerprint:
    def test_changes_with_content(self, tiny_videos, tmp_path):
        write_dataset(tiny_videos[:2], tmp_path, "cholec80")
        before = dataset_fingerprint(tmp_path)
        assert dataset_fingerprint(tmp_path) == before
        _replace_line(tmp_path / "video02.tsv", 2, _set_field(1, "99"))
        assert dataset_fingerprint(tmp_path) != before
