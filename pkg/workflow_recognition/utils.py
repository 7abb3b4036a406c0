"""Shared utilities for workflow recognition."""

import base64
import hashlib
import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

# Tool order of the Cholec80 annotation
TOOLS = ("grasper", "bipolar", "hook", "scissors", "clipper", "irrigator", "specimen_bag")
N_TOOLS = len(TOOLS)

CONTAINER_FORMAT = "workflow-recognition"
CONTAINER_VERSION = "1.0"


class ContainerError(Exception):
    pass


def sanitize_video_id(video_id: str) -> str:
    """Prevent path traversal through video ids used as file names."""
    safe_id = re.sub(r"[^a-zA-Z0-9_-]", "", video_id)
    if safe_id != video_id:
        raise ValueError(f"Invalid video id for filesystem: {video_id}")
    if not safe_id:
        raise ValueError("Video id cannot be empty")
    return safe_id


def derive_seed(base_seed: int, *keys: Any) -> int:
    """Stable per-stage seed; independent of PYTHONHASHSEED."""
    text = ":".join(str(k) for k in (base_seed, *keys))
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:4], "little")


def fingerprint(data: Any) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def atomic_write_text(path: str | Path, text: str) -> None:
    """Atomic write prevents half-written artifacts after a crash."""
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)

    temp_fd, temp_path = tempfile.mkstemp(
        dir=file_path.parent,
        prefix=f".{file_path.name}.",
        suffix=".tmp"
    )

    try:
        with os.fdopen(temp_fd, "w", encoding="utf-8") as f:
            f.write(text)

        os.replace(temp_path, file_path)
    except Exception:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise


def _encode_array(array: np.ndarray) -> dict:
    array = np.asarray(array)
    dtype = "<i8" if np.issubdtype(array.dtype, np.integer) else "<f8"
    data = np.ascontiguousarray(array, dtype=dtype)
    return {
        "dtype": dtype,
        "shape": list(data.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_array(entry: dict, name: str) -> np.ndarray:
    try:
        raw = base64.b64decode(entry["data"])
        return np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    except (KeyError, ValueError, TypeError) as e:
        raise ContainerError(f"Malformed array '{name}': {e}")


def _checksum(document: dict) -> str:
    payload = {k: document[k] for k in ("format", "version", "kind", "header", "arrays")}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def write_container(path: str | Path, kind: str, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Persist a model as a self-describing, checksummed JSON document."""
    document = {
        "format": CONTAINER_FORMAT,
        "version": CONTAINER_VERSION,
        "kind": kind,
        "header": header,
        "arrays": {name: _encode_array(a) for name, a in arrays.items()},
    }
    document["checksum"] = _checksum(document)
    atomic_write_text(path, json.dumps(document, sort_keys=True))
    logger.debug(f"Wrote {kind} container to {path}")


def read_container(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    file_path = Path(path)
    if not file_path.exists():
        raise ContainerError(f"Container not found: {path}")

    try:
        with open(file_path, encoding="utf-8") as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ContainerError(f"Corrupted container {path}: {e}")

    missing = [k for k in ("format", "version", "kind", "header", "arrays", "checksum") if k not in document]
    if missing:
        raise ContainerError(f"Container {path} is missing keys: {', '.join(missing)}")
    if document["format"] != CONTAINER_FORMAT:
        raise ContainerError(f"{path} is not a {CONTAINER_FORMAT} container")
    if document["version"] != CONTAINER_VERSION:
        raise ContainerError(
            f"Container version mismatch for {path}: expected {CONTAINER_VERSION}, got {document['version']}"
        )
    if document["kind"] != kind:
        raise ContainerError(f"{path} holds a '{document['kind']}', expected '{kind}'")
    if document["checksum"] != _checksum(document):
        raise ContainerError(f"Checksum mismatch for {path}")

    arrays = {name: _decode_array(entry, name) for name, entry in document["arrays"].items()}
    return document["header"], arrays
