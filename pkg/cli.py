#!/usr/bin/env python3
"""Surgical workflow recognition - generate, validate, train, evaluate, report."""

import argparse
import json
import logging
import sys

from workflow_recognition.commands.corpus_commands import handle_generate, handle_validate
from workflow_recognition.commands.experiment_commands import handle_evaluate, handle_report, handle_train
from workflow_recognition.config import ConfigError, load_config

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)

COMMANDS = {
    "generate": handle_generate,
    "train": handle_train,
    "evaluate": handle_evaluate,
    "report": handle_report,
}


def validate(config_path: str | None, overrides: list[str]) -> int:
    """Check config and dataset.

    Returns:
        Exit code: 0 if all checks pass, 1 otherwise.
    """
    print("Validating config...")
    try:
        cfg = load_config(config_path, overrides)
        print("✓ Config file loaded")
    except ConfigError as e:
        print(f"✗ Config file: {e}")
        return 1

    result = handle_validate(cfg.dataset_path)
    if result["valid"]:
        print(f"✓ Dataset {cfg.dataset_path}: no problems")
        print()
        print("All checks passed!")
        return 0

    print(f"✗ Dataset {cfg.dataset_path}:")
    for diagnostic in result["diagnostics"]:
        location = f"{diagnostic['path']}:{diagnostic['line']}" if diagnostic["line"] else diagnostic["path"]
        print(f"    - {location}: {diagnostic['reason']}")
    print()
    print(f"{len(result['diagnostics'])} error(s) found. Fix and re-run validation.")
    return 1


def run_command(command: str, config_path: str | None, overrides: list[str]) -> int:
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 1

    try:
        result = COMMANDS[command](cfg)
    except Exception as e:
        logger.exception(f"Command {command} failed")
        result = {"error": str(e), "exit_code": 2}

    print(json.dumps(result, indent=2, default=str))
    if "error" in result:
        return result.get("exit_code", 2)
    return 0


def main():
    """Entry point with argument parsing."""
    parser = argparse.ArgumentParser(description="Surgical workflow recognition experiments")
    parser.add_argument("command", choices=["generate", "validate", "train", "evaluate", "report"])
    parser.add_argument(
        "--config",
        help="Path to the JSON config (default: $WORKFLOW_CONFIG)",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override a config value; repeatable. VALUE is parsed as JSON when possible",
    )
    parser.add_argument("--verbose", action="store_true", help="Log per-iteration details")
    args = parser.parse_args()

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    if args.command == "validate":
        sys.exit(validate(args.config, args.overrides))
    sys.exit(run_command(args.command, args.config, args.overrides))


if __name__ == "__main__":
    main()
