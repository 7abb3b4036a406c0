"""Configuration loading for workflow recognition experiments."""

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Iterable

from .corpus.vocabulary import VOCABULARIES
from .models import (
    CorpusConfig,
    EvaluationConfig,
    ExperimentConfig,
    HhmmConfig,
    LossWeights,
    NetworkConfig,
    SgdSchedule,
    SvmConfig,
)
from .utils import TOOLS

MODES = ("offline", "online")

SECTIONS = {
    "loss_weights": LossWeights,
    "schedule": SgdSchedule,
    "network": NetworkConfig,
    "svm": SvmConfig,
    "hhmm": HhmmConfig,
    "corpus": CorpusConfig,
    "evaluation": EvaluationConfig,
}


class ConfigError(Exception):
    pass


def load_config(config_path: str | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    if config_path is None:
        config_path = os.environ.get("WORKFLOW_CONFIG")

    if not config_path:
        raise ConfigError(
            "No config path provided. Set WORKFLOW_CONFIG environment variable "
            "or pass --config."
        )

    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {config_path}")

    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in config file: {e}")

    for override in overrides:
        apply_override(data, override)

    return _parse_config(data)


def apply_override(data: dict, override: str) -> None:
    """Apply one `section.key=value` override; value is parsed as JSON when possible."""
    if "=" not in override:
        raise ConfigError(f"Override must look like key.path=value: {override}")
    key_path, raw_value = override.split("=", 1)
    keys = [k for k in key_path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"Override has an empty key: {override}")

    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value

    if len(keys) > 1 and keys[0] not in SECTIONS:
        raise ConfigError(f"Cannot override inside non-section '{keys[0]}'")

    target = data
    for key in keys[:-1]:
        node = target.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override inside non-section '{key}'")
        target = node
    target[keys[-1]] = value


def _parse_section(section_data: Any, cls: type, section: str):
    if not isinstance(section_data, dict):
        raise ConfigError(f"Section '{section}' must be an object")

    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in section_data if k not in known and not k.startswith("_")]
    if unknown:
        raise ConfigError(f"Unknown keys in {section}: {', '.join(sorted(unknown))}")

    kwargs = {}
    for name, value in section_data.items():
        if name.startswith("_"):
            continue
        # JSON has no tuples
        if isinstance(value, list) and isinstance(getattr(cls(), name, None), tuple):
            value = tuple(value)
        kwargs[name] = value

    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {section}: {e}")


def _parse_config(data: dict) -> ExperimentConfig:
    _validate_required_keys(data, ["dataset_path", "output_dir"], "config")

    sections = {}
    for name, cls in SECTIONS.items():
        sections[name] = _parse_section(data.get(name, {}), cls, name)

    vocabulary = data.get("vocabulary", "cholec80")
    if vocabulary not in VOCABULARIES:
        raise ConfigError(f"Unknown vocabulary '{vocabulary}'. Available: {', '.join(VOCABULARIES)}")

    mode = data.get("mode", "offline")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}, got '{mode}'")

    runs = data.get("runs", 5)
    if not isinstance(runs, int) or runs < 1:
        raise ConfigError("runs must be an integer >= 1")

    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")

    top_level = {"dataset_path", "output_dir", "vocabulary", "mode", "runs", "seed", *SECTIONS}
    unknown = [k for k in data if k not in top_level and not k.startswith("_")]
    if unknown:
        raise ConfigError(f"Unknown keys in config: {', '.join(sorted(unknown))}")

    config = ExperimentConfig(
        dataset_path=str(data["dataset_path"]),
        output_dir=str(data["output_dir"]),
        vocabulary=vocabulary,
        mode=mode,
        runs=runs,
        seed=seed,
        **sections,
    )
    # the corpus section follows the experiment vocabulary unless set explicitly
    if "vocabulary" not in data.get("corpus", {}):
        config.corpus.vocabulary = vocabulary
    _validate_semantics(config)
    return config


def _validate_semantics(config: ExperimentConfig) -> None:
    corpus = config.corpus
    if corpus.vocabulary not in VOCABULARIES:
        raise ConfigError(f"Unknown corpus.vocabulary '{corpus.vocabulary}'")
    if corpus.mode not in ("features", "images"):
        raise ConfigError(f"corpus.mode must be 'features' or 'images', got '{corpus.mode}'")
    if corpus.scale <= 0:
        raise ConfigError("corpus.scale must be positive")
    if corpus.videos < 1:
        raise ConfigError("corpus.videos must be >= 1")

    svm = config.svm
    if svm.C <= 0 or svm.epochs < 1:
        raise ConfigError("svm.C must be positive and svm.epochs >= 1")

    hhmm = config.hhmm
    if hhmm.bottom_state_policy not in ("duration", "single"):
        raise ConfigError(f"hhmm.bottom_state_policy must be 'duration' or 'single', got '{hhmm.bottom_state_policy}'")
    if hhmm.gmm_components < 1 or hhmm.binary_components < 1 or hhmm.max_bottom_states < 1:
        raise ConfigError("hhmm component and bottom-state counts must be >= 1")

    evaluation = config.evaluation
    if not 0 <= evaluation.finetune_fraction < 1:
        raise ConfigError("evaluation.finetune_fraction must lie in [0, 1)")
    if evaluation.folds < 1:
        raise ConfigError("evaluation.folds must be >= 1")
    if evaluation.classifier_training not in ("finetune", "cross_validation"):
        raise ConfigError(
            "evaluation.classifier_training must be 'finetune' or 'cross_validation'"
        )
    if evaluation.confidence_source not in ("svm", "fc_phase"):
        raise ConfigError("evaluation.confidence_source must be 'svm' or 'fc_phase'")
    if evaluation.confidence_source == "fc_phase" and config.loss_weights.b == 0:
        raise ConfigError("confidence_source 'fc_phase' needs a phase head (loss_weights.b > 0)")
    unknown_tools = [t for t in evaluation.block_tools if t not in TOOLS]
    if unknown_tools:
        raise ConfigError(f"Unknown tools in evaluation.block_tools: {', '.join(unknown_tools)}")
    tolerances = list(evaluation.boundary_tolerances)
    if not tolerances or tolerances != sorted(set(tolerances)):
        raise ConfigError("evaluation.boundary_tolerances must be a non-empty, strictly increasing list")


def validate_paths(config: ExperimentConfig) -> None:
    """Referenced inputs must exist before a stage touches them."""
    if not Path(config.dataset_path).exists():
        raise ConfigError(f"Dataset path not found: {config.dataset_path}")


def config_to_dict(config: ExperimentConfig) -> dict:
    return dataclasses.asdict(config)


def _validate_required_keys(data: dict, keys: list[str], section: str) -> None:
    missing = [k for k in keys if k not in data]
    if missing:
        raise ConfigError(
            f"Missing required keys in {section}: {', '.join(missing)}"
        )
