"""generate / validate verbs."""

import logging

import numpy as np

from ..corpus.dataset_io import validate_dataset, write_dataset
from ..corpus.split import SplitError, make_split, summarize_split
from ..corpus.synth import ObservationModel, bayes_phase_posterior, generate_corpus
from ..models import ExperimentConfig, SurgeryVideo

logger = logging.getLogger(__name__)


def _bayes_accuracy(videos: list[SurgeryVideo], observation_model: ObservationModel) -> float | None:
    """Frame accuracy of the ideal phase classifier; an upper bound for any feature extractor."""
    if observation_model.mode != "features" or not videos:
        return None
    labels = np.concatenate([v.phases for v in videos])
    prior = np.bincount(labels, minlength=observation_model.anchors.shape[0]) / labels.size
    correct = sum(
        int(np.sum(np.argmax(bayes_phase_posterior(observation_model, v.observations, prior), axis=1) == v.phases))
        for v in videos
    )
    accuracy = correct / labels.size
    logger.info(f"Bayes phase accuracy on the generated corpus: {accuracy:.3f}")
    return accuracy


def handle_generate(config: ExperimentConfig) -> dict:
    """Write a synthetic corpus, with its split, to `dataset_path`."""
    corpus = config.corpus
    if corpus.videos < 2 * config.evaluation.folds:
        return {
            "error": f"corpus.videos ({corpus.videos}) must be at least twice evaluation.folds ({config.evaluation.folds})",
            "exit_code": 1,
        }
    videos, observation_model = generate_corpus(corpus)
    try:
        split = make_split(
            [v.video_id for v in videos],
            config.evaluation.finetune_fraction,
            config.evaluation.folds,
            config.seed,
        )
    except SplitError as e:
        return {"error": str(e), "exit_code": 1}

    path = write_dataset(videos, config.dataset_path, corpus.vocabulary, split)
    return {
        "dataset_path": str(path),
        "vocabulary": corpus.vocabulary,
        "videos": len(videos),
        "frames": sum(len(v) for v in videos),
        "observation_shape": list(observation_model.observation_shape),
        "split": summarize_split(split),
        "bayes_accuracy": _bayes_accuracy(videos, observation_model),
    }


def handle_validate(dataset_path: str) -> dict:
    diagnostics = validate_dataset(dataset_path)
    for diagnostic in diagnostics:
        logger.warning(str(diagnostic))
    result = {
        "dataset_path": dataset_path,
        "valid": not diagnostics,
        "diagnostics": [{"path": d.path, "line": d.line, "reason": d.reason} for d in diagnostics],
    }
    if diagnostics:
        result["error"] = f"{len(diagnostics)} problem(s) found in {dataset_path}"
        result["exit_code"] = 1
    return result
