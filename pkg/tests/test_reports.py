"""Tests for report aggregation and rendering."""

import json

import numpy as np
import pandas as pd
import pytest

from workflow_recognition.evaluation.metrics import block_detection_report, boundary_table, phase_scores, tool_blocks
from workflow_recognition.evaluation.reports import (
    aggregate,
    block_to_dict,
    boundary_to_dict,
    render_text,
    ribbon_frame,
    run_summary,
    scores_to_dict,
    video_ranking,
    write_report,
)

PHASE_IDS = ("P1", "P2", "P3", "P4", "P5", "P6", "P7")


def make_report(run: int, error_rate: float, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    truth = np.repeat(np.arange(7), 20)
    noisy = np.where(rng.uniform(size=truth.size) < error_rate, rng.integers(0, 7, size=truth.size), truth)
    presence = np.zeros(140, dtype=int)
    presence[30:60] = 1
    blocks = tool_blocks(presence, tool="clipper")
    return {
        "run": run,
        "phase": {
            "offline": scores_to_dict(phase_scores(truth, truth, PHASE_IDS)),
            "online": scores_to_dict(phase_scores(noisy, truth, PHASE_IDS)),
            "pre_hhmm": scores_to_dict(phase_scores(noisy, truth, PHASE_IDS)),
        },
        "per_video": {"video02": {"offline": 90.0, "online": 80.0}, "video01": {"offline": 95.0, "online": 85.0}},
        "boundaries": boundary_to_dict(boundary_table(noisy, truth, PHASE_IDS)),
        "tool_ap": {"grasper": 0.8, "clipper": 0.6, "mean": 0.7},
        "blocks": {"clipper": block_to_dict(block_detection_report(blocks, presence.astype(float), 0.5), 0.5)},
    }


class TestAggregate:
    def test_single_run_has_zero_std(self):
        summary = aggregate([make_report(1, 0.2)])
        assert summary["runs"] == 1
        assert summary["metrics"]["offline_accuracy"] == {"mean": 100.0, "std": 0.0}
        assert summary["metrics"]["tool_map"]["mean"] == 0.7

    def test_mean_and_population_std(self):
        reports = [make_report(1, 0.0), make_report(2, 1.0, seed=5)]
        accuracies = [r["phase"]["online"]["accuracy"] for r in reports]
        stats = aggregate(reports)["metrics"]["online_accuracy"]
        assert stats["mean"] == pytest.approx(np.mean(accuracies))
        assert stats["std"] == pytest.approx(np.std(accuracies))

    def test_variants_and_sweep_columns(self):
        report = make_report(1, 0.1)
        report["variants"] = {"gt_tools": {"offline": {"accuracy": 91.0}, "online": {"accuracy": 88.0}}}
        report["finetune_sweep"] = {"4": {"offline_accuracy": 80.0, "online_accuracy": 70.0}}
        row = run_summary(report)
        assert row["gt_tools_offline_accuracy"] == 91.0
        assert row["sweep_4_offline_accuracy"] == 80.0


class TestRender:
    def test_video_ranking(self):
        best, worst = video_ranking(make_report(1, 0.1), 1)
        assert best == [("video01", 95.0)]
        assert worst == [("video02", 90.0)]

    def test_render_is_deterministic(self):
        reports = [make_report(1, 0.1), make_report(2, 0.3, seed=1)]
        summary = aggregate(reports)
        first = render_text(reports, summary)
        assert first == render_text(reports, summary)
        assert "Runs: 2" in first
        assert "Tool presence average precision (%)" in first
        assert "clipper" in first

    def test_write_report(self, tmp_path):
        reports = [make_report(1, 0.1)]
        write_report(tmp_path, reports, ribbon_videos=2)
        assert json.loads((tmp_path / "aggregate.json").read_text())["runs"] == 1
        summary = pd.read_csv(tmp_path / "summary.tsv", sep="\t", index_col="run")
        assert summary.loc[1, "offline_accuracy"] == 100.0
        assert (tmp_path / "report.txt").read_text().startswith("Runs: 1")

    def test_ribbon_frame_columns(self):
        frame = ribbon_frame([{"video_id": "video01", "timestamp": 0, "truth": "P1", "offline": "P1", "online": "P2"}])
        assert list(frame.columns) == ["video_id", "timestamp", "truth", "offline", "online"]
