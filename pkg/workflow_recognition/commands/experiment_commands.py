"""train / evaluate / report verbs."""

import logging
from pathlib import Path

from ..config import ConfigError
from ..corpus.dataset_io import validate_dataset
from ..evaluation.reports import write_report
from ..models import ExperimentConfig
from ..pipeline import StageError, load_run_reports, run_experiment

logger = logging.getLogger(__name__)


def _check_dataset(config: ExperimentConfig) -> dict | None:
    diagnostics = validate_dataset(config.dataset_path)
    if diagnostics:
        for diagnostic in diagnostics[:20]:
            logger.error(str(diagnostic))
        return {
            "error": f"Dataset {config.dataset_path} failed validation with {len(diagnostics)} problem(s)",
            "diagnostics": [str(d) for d in diagnostics],
            "exit_code": 1,
        }
    return None


def _run(config: ExperimentConfig, until: str) -> dict:
    invalid = _check_dataset(config)
    if invalid:
        return invalid
    try:
        result = run_experiment(config, until=until)
    except ConfigError as e:
        return {"error": str(e), "exit_code": 1}
    except StageError as e:
        return {"error": str(e), "stage": e.stage, "exit_code": 2}

    return {
        "output_dir": config.output_dir,
        "runs": [
            {
                "run": r.run_index + 1,
                "run_dir": r.run_dir,
                "network": r.network_path,
                "svm": r.svm_paths,
                "hhmm": r.hhmm_paths,
            }
            for r in result.runs
        ],
        "summary": result.summary,
    }


def handle_train(config: ExperimentConfig) -> dict:
    """Train every stage up to and including the HHMM for each run."""
    return _run(config, until="hhmm")


def handle_evaluate(config: ExperimentConfig) -> dict:
    """Full pipeline; trained artifacts from `train` are reused."""
    return _run(config, until="metrics")


def handle_report(config: ExperimentConfig) -> dict:
    """Re-render the aggregate report from existing per-run reports."""
    reports = load_run_reports(config.output_dir)
    if not reports:
        return {"error": f"No run reports under {config.output_dir}; run 'evaluate' first", "exit_code": 1}
    report_dir = Path(config.output_dir) / "report"
    summary = write_report(report_dir, reports, config.evaluation.ribbon_videos)
    return {"report_dir": str(report_dir), "summary": summary}
