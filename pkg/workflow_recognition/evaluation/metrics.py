"""Tool-presence AP, phase precision/recall, boundary tolerance and tool-block statistics."""

import bisect
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn import metrics as sk_metrics

from ..models import PhaseScores, PrPoint, ToolBlock

logger = logging.getLogger(__name__)

LATENCY_BUCKETS = ("<5", "6-29", "30-59", ">=60")
LATENCY_EDGES = (5, 30, 60)


class MetricError(ValueError):
    pass


def _check_scores(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(f"Scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    return scores, labels


def precision_recall_curve(scores: np.ndarray, labels: np.ndarray) -> list[PrPoint]:
    """One point per distinct score, thresholds descending; tied scores share a point."""
    scores, labels = _check_scores(scores, labels)
    if not labels.any():
        return []
    precision, recall, thresholds = sk_metrics.precision_recall_curve(labels, scores, pos_label=1)
    # sklearn orders by ascending threshold and appends a (1, 0) end point
    return [
        PrPoint(threshold=float(t), precision=float(p), recall=float(r))
        for t, p, r in zip(thresholds[::-1], precision[-2::-1], recall[-2::-1])
    ]


def average_precision(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Step-integrated area under the PR curve; None when there are no positives."""
    scores, labels = _check_scores(scores, labels)
    if not labels.any():
        return None
    return float(sk_metrics.average_precision_score(labels, scores, pos_label=1))


def phase_scores(predicted: np.ndarray, truth: np.ndarray, phase_ids: Sequence[str]) -> PhaseScores:
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape:
        raise MetricError(f"Prediction length {predicted.shape} differs from ground truth {truth.shape}")
    if truth.size == 0:
        raise MetricError("Cannot score an empty sequence")

    precision: dict[str, Optional[float]] = {}
    recall: dict[str, Optional[float]] = {}
    undefined = []
    for p, name in enumerate(phase_ids):
        correct = np.sum((predicted == p) & (truth == p))
        in_truth = np.sum(truth == p)
        in_prediction = np.sum(predicted == p)
        recall[name] = 100.0 * correct / in_truth if in_truth else None
        precision[name] = 100.0 * correct / in_prediction if in_prediction else None
        if in_truth and not in_prediction:
            undefined.append(name)

    present = [name for p, name in enumerate(phase_ids) if np.any(truth == p)]
    recalls = [recall[n] for n in present]
    precisions = [precision[n] for n in present if precision[n] is not None]
    return PhaseScores(
        precision=precision,
        recall=recall,
        mean_precision=float(np.mean(precisions)) if precisions else None,
        mean_recall=float(np.mean(recalls)),
        accuracy=100.0 * float(np.mean(predicted == truth)),
        undefined_precision=undefined,
    )


def bucket_labels(tolerances: Sequence[int]) -> list[str]:
    if not tolerances:
        raise MetricError("At least one boundary tolerance is required")
    labels = [f"<{tolerances[0]}"]
    labels += [f"{lo}-{hi - 1}" for lo, hi in zip(tolerances[:-1], tolerances[1:])]
    labels.append(f">={tolerances[-1]}")
    return labels


@dataclass
class BoundaryTable:
    buckets: list[str]
    counts: dict[str, list[int]]  # phase -> count per bucket
    errors: dict[str, list[int]] = field(default_factory=dict)  # phase -> boundary errors (s)
    missed: dict[str, int] = field(default_factory=dict)

    def merge(self, other: "BoundaryTable") -> "BoundaryTable":
        if other.buckets != self.buckets:
            raise MetricError("Cannot merge boundary tables with different buckets")
        counts = {p: list(c) for p, c in self.counts.items()}
        errors = {p: list(e) for p, e in self.errors.items()}
        missed = dict(self.missed)
        for phase, row in other.counts.items():
            counts[phase] = [a + b for a, b in zip(counts.get(phase, [0] * len(row)), row)]
            errors[phase] = errors.get(phase, []) + other.errors.get(phase, [])
            missed[phase] = missed.get(phase, 0) + other.missed.get(phase, 0)
        return BoundaryTable(buckets=self.buckets, counts=counts, errors=errors, missed=missed)

    def totals(self) -> dict[str, int]:
        return {phase: sum(row) for phase, row in self.counts.items()}


def boundary_table(
    predicted: np.ndarray,
    truth: np.ndarray,
    phase_ids: Sequence[str],
    tolerances: Sequence[int] = (30, 60, 90, 120),
) -> BoundaryTable:
    """First-occurrence boundary error of every phase present in the ground truth."""
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape:
        raise MetricError(f"Prediction length {predicted.shape} differs from ground truth {truth.shape}")

    buckets = bucket_labels(tolerances)
    table = BoundaryTable(buckets=buckets, counts={})
    for p, name in enumerate(phase_ids):
        truth_frames = np.flatnonzero(truth == p)
        if truth_frames.size == 0:
            continue
        row = [0] * len(buckets)
        predicted_frames = np.flatnonzero(predicted == p)
        if predicted_frames.size == 0:
            row[-1] = 1
            table.missed[name] = 1
            table.errors[name] = []
        else:
            error = int(abs(predicted_frames[0] - truth_frames[0]))
            row[bisect.bisect_right(list(tolerances), error)] += 1
            table.errors[name] = [error]
            table.missed[name] = 0
        table.counts[name] = row
    return table


def tool_blocks(presence: np.ndarray, gap: int = 15, tool: str = "") -> list[ToolBlock]:
    """Maximal runs of presence, merging runs separated by fewer than `gap` absent frames."""
    presence = np.asarray(presence).astype(bool)
    if presence.size == 0 or not presence.any():
        return []
    padded = np.concatenate([[False], presence, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    runs = list(zip(edges[0::2].tolist(), (edges[1::2] - 1).tolist()))

    merged = [list(runs[0])]
    for start, end in runs[1:]:
        if start - merged[-1][1] - 1 < gap:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    return [ToolBlock(tool=tool, start=s, end=e) for s, e in merged]


@dataclass
class BlockReport:
    tool: str
    latency: dict[str, int]  # bucket -> identified truth blocks
    missed: int
    detected_blocks: int
    false_positives: int

    @property
    def truth_blocks(self) -> int:
        return sum(self.latency.values()) + self.missed

    @property
    def empty(self) -> bool:
        return self.truth_blocks == 0

    @property
    def false_positive_rate(self) -> float:
        return self.false_positives / self.detected_blocks if self.detected_blocks else 0.0

    def merge(self, other: "BlockReport") -> "BlockReport":
        return BlockReport(
            tool=self.tool,
            latency={k: self.latency[k] + other.latency[k] for k in LATENCY_BUCKETS},
            missed=self.missed + other.missed,
            detected_blocks=self.detected_blocks + other.detected_blocks,
            false_positives=self.false_positives + other.false_positives,
        )


def block_detection_report(
    truth_blocks: Sequence[ToolBlock],
    confidences: np.ndarray,
    threshold: float,
    gap: int = 15,
    tool: str = "",
) -> BlockReport:
    """Latency of the first detection inside each truth block, plus false-positive detections."""
    detected = np.asarray(confidences, dtype=np.float64) >= threshold
    latency = {k: 0 for k in LATENCY_BUCKETS}
    missed = 0
    for block in truth_blocks:
        hits = np.flatnonzero(detected[block.start:block.end + 1])
        if hits.size == 0:
            missed += 1
        else:
            latency[LATENCY_BUCKETS[bisect.bisect_right(LATENCY_EDGES, int(hits[0]))]] += 1

    detected_blocks = tool_blocks(detected, gap, tool)
    false_positives = sum(
        1 for d in detected_blocks
        if not any(d.start <= t.end and t.start <= d.end for t in truth_blocks)
    )
    report = BlockReport(tool, latency, missed, len(detected_blocks), false_positives)
    if report.empty:
        logger.debug(f"No ground-truth blocks for {tool or 'tool'}; report is empty")
    return report


def select_detection_threshold(scores: np.ndarray, labels: np.ndarray, min_precision: float = 0.95) -> Optional[float]:
    """Smallest threshold whose precision reaches `min_precision`; None when no threshold does."""
    feasible = [p.threshold for p in precision_recall_curve(scores, labels) if p.precision >= min_precision]
    return min(feasible) if feasible else None
