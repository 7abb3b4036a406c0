"""Report tables: per-run summaries, mean ± std aggregation, text and delimited output."""

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import pandas as pd

from ..models import PhaseScores
from ..utils import atomic_write_text
from .metrics import BlockReport, BoundaryTable

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.2f"


def scores_to_dict(scores: PhaseScores) -> dict:
    return asdict(scores)


def boundary_to_dict(table: BoundaryTable) -> dict:
    return {"buckets": table.buckets, "counts": table.counts, "missed": table.missed, "errors": table.errors}


def block_to_dict(report: BlockReport, threshold: Optional[float]) -> dict:
    return {
        "latency": report.latency,
        "missed": report.missed,
        "truth_blocks": report.truth_blocks,
        "detected_blocks": report.detected_blocks,
        "false_positives": report.false_positives,
        "false_positive_rate": report.false_positive_rate,
        "threshold": threshold,
        "empty": report.empty,
    }


def phase_table(scores: dict) -> pd.DataFrame:
    """Per-phase precision/recall, one row per phase."""
    frame = pd.DataFrame({"precision": scores["precision"], "recall": scores["recall"]})
    frame.index.name = "phase"
    return frame


def run_summary(report: dict) -> dict:
    """Flat headline metrics of one run."""
    row = {"run": report["run"]}
    for mode in ("offline", "online", "pre_hhmm"):
        scores = report["phase"].get(mode)
        if scores is None:
            continue
        row[f"{mode}_accuracy"] = scores["accuracy"]
        row[f"{mode}_precision"] = scores["mean_precision"]
        row[f"{mode}_recall"] = scores["mean_recall"]
    if report.get("tool_ap"):
        row["tool_map"] = report["tool_ap"].get("mean")
    for name, variant in report.get("variants", {}).items():
        row[f"{name}_offline_accuracy"] = variant["offline"]["accuracy"]
        row[f"{name}_online_accuracy"] = variant["online"]["accuracy"]
    for size, entry in report.get("finetune_sweep", {}).items():
        row[f"sweep_{size}_offline_accuracy"] = entry["offline_accuracy"]
    return row


def summary_frame(reports: list[dict]) -> pd.DataFrame:
    return pd.DataFrame([run_summary(r) for r in reports]).set_index("run").astype(float)


def aggregate(reports: list[dict]) -> dict:
    """Mean and population std of every headline metric across runs."""
    frame = summary_frame(reports)
    stats = frame.agg(["mean", lambda column: column.std(ddof=0)])
    stats.index = ["mean", "std"]
    result = {}
    for metric in frame.columns:
        values = stats[metric]
        result[metric] = {
            "mean": None if pd.isna(values["mean"]) else float(values["mean"]),
            "std": None if pd.isna(values["std"]) else float(values["std"]),
        }
    return {"runs": len(reports), "metrics": result}


def tool_ap_frame(reports: list[dict]) -> pd.DataFrame:
    rows = [{k: v for k, v in r["tool_ap"].items()} for r in reports if r.get("tool_ap")]
    if not rows:
        return pd.DataFrame()
    frame = pd.DataFrame(rows).astype(float) * 100.0
    return frame.agg(["mean", lambda column: column.std(ddof=0)]).set_axis(["mean", "std"]).T


def boundary_frame(report: dict) -> pd.DataFrame:
    boundaries = report["boundaries"]
    frame = pd.DataFrame.from_dict(boundaries["counts"], orient="index", columns=boundaries["buckets"])
    frame["total"] = frame.sum(axis=1)
    frame["missed"] = pd.Series(boundaries["missed"])
    frame.index.name = "phase"
    return frame


def block_frame(report: dict) -> pd.DataFrame:
    rows = {}
    for tool, entry in report.get("blocks", {}).items():
        rows[tool] = {**entry["latency"], "missed": entry["missed"], "fp_rate": 100.0 * entry["false_positive_rate"]}
    return pd.DataFrame.from_dict(rows, orient="index")


def video_ranking(report: dict, count: int) -> tuple[list[tuple[str, float]], list[tuple[str, float]]]:
    """Best and worst evaluation videos by offline accuracy."""
    ranked = sorted(report["per_video"].items(), key=lambda item: (-item[1]["offline"], item[0]))
    pairs = [(video_id, entry["offline"]) for video_id, entry in ranked]
    return pairs[:count], pairs[::-1][:count]


def ribbon_frame(rows: list[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["video_id", "timestamp", "truth", "offline", "online"])


def _section(title: str, frame: pd.DataFrame) -> str:
    if frame.empty:
        return f"{title}\n  (none)\n"
    return f"{title}\n{frame.to_string(float_format=lambda v: FLOAT_FORMAT % v, na_rep='-')}\n"


def render_text(reports: list[dict], summary: dict, ribbon_videos: int = 5) -> str:
    """Aligned plain-text report; contains no timestamps so it is reproducible."""
    stats = pd.DataFrame(summary["metrics"]).T
    parts = [f"Runs: {summary['runs']}\n", _section("Headline metrics (mean, std across runs)", stats)]

    tool_ap = tool_ap_frame(reports)
    parts.append(_section("Tool presence average precision (%)", tool_ap))

    last = reports[-1]
    parts.append(_section(f"Per-phase precision/recall, offline (run {last['run']})", phase_table(last["phase"]["offline"])))
    parts.append(_section(f"Phase boundaries within tolerance (run {last['run']})", boundary_frame(last)))
    parts.append(_section(f"Tool block detection latency (run {last['run']})", block_frame(last)))

    best, worst = video_ranking(last, ribbon_videos)
    ranking = pd.DataFrame({
        "best": [f"{v} {a:.2f}" for v, a in best],
        "worst": [f"{v} {a:.2f}" for v, a in worst],
    })
    parts.append(_section("Per-video offline accuracy", ranking))
    return "\n".join(parts)


def write_report(output_dir: str | Path, reports: list[dict], ribbon_videos: int = 5) -> dict:
    out = Path(output_dir)
    summary = aggregate(reports)
    atomic_write_text(out / "aggregate.json", json.dumps(summary, indent=2, sort_keys=True))
    atomic_write_text(out / "summary.tsv", summary_frame(reports).to_csv(sep="\t", float_format="%.6f"))
    atomic_write_text(out / "report.txt", render_text(reports, summary, ribbon_videos))
    logger.info(f"Wrote aggregate report for {len(reports)} run(s) to {out}")
    return summary
