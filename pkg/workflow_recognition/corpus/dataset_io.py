"""Dataset directory: manifest.json plus one tab-delimited annotation file per video.

Annotation line layout (after the `#schema=1` header):

    video_id <TAB> timestamp <TAB> phase_id <TAB> f1,f2,...,f7 [<TAB> x1 x2 ... xD]

The optional payload holds the flattened observation as repr() floats, so a
write/read cycle is bit-exact.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..models import CorpusSplit, SurgeryVideo
from ..utils import N_TOOLS, atomic_write_text, sanitize_video_id
from .vocabulary import VOCABULARIES

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
HEADER = f"#schema={SCHEMA_VERSION}\tvideo_id\ttimestamp\tphase\ttools\tobservation"


class DatasetFormatError(ValueError):
    def __init__(self, path: str, line: Optional[int], reason: str):
        self.path = path
        self.line = line
        self.reason = reason
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{location}: {reason}")


@dataclass(frozen=True)
class Diagnostic:
    path: str
    line: Optional[int]
    reason: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line}: {self.reason}" if self.line is not None else f"{self.path}: {self.reason}"


@dataclass
class Dataset:
    vocabulary: str
    phase_ids: tuple[str, ...]
    videos: list[SurgeryVideo]
    observation_shape: Optional[tuple[int, ...]] = None
    split: Optional[CorpusSplit] = None

    def by_id(self) -> dict[str, SurgeryVideo]:
        return {v.video_id: v for v in self.videos}


def video_file(path: Path, video_id: str) -> Path:
    return path / f"{sanitize_video_id(video_id)}.tsv"


def _format_line(video: SurgeryVideo, t: int, phase_ids: tuple[str, ...]) -> str:
    fields = [
        video.video_id,
        str(t),
        phase_ids[int(video.phases[t])],
        ",".join(str(int(f)) for f in video.tools[t]),
    ]
    if video.observations is not None:
        fields.append(" ".join(repr(float(v)) for v in np.ravel(video.observations[t])))
    return "\t".join(fields)


def write_dataset(
    videos: list[SurgeryVideo],
    path: str | Path,
    vocabulary: str,
    split: Optional[CorpusSplit] = None,
) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    phase_ids = VOCABULARIES[vocabulary].phase_ids

    shapes = {tuple(v.observations.shape[1:]) for v in videos if v.observations is not None}
    if len(shapes) > 1:
        raise ValueError(f"Videos disagree on observation shape: {sorted(shapes)}")
    if shapes and any(v.observations is None for v in videos):
        raise ValueError("Either every video or no video carries observations")
    observation_shape = next(iter(shapes), None)

    for video in videos:
        lines = [HEADER] + [_format_line(video, t, phase_ids) for t in range(len(video))]
        atomic_write_text(video_file(root, video.video_id), "\n".join(lines) + "\n")

    manifest = {
        "schema": SCHEMA_VERSION,
        "vocabulary": vocabulary,
        "phase_ids": list(phase_ids),
        "videos": [v.video_id for v in videos],
        "observation_shape": list(observation_shape) if observation_shape else None,
        "split": None if split is None else {
            "finetune": split.finetune,
            "evaluation": split.evaluation,
            "folds": split.folds,
        },
    }
    atomic_write_text(root / MANIFEST, json.dumps(manifest, indent=2))
    logger.info(f"Wrote {len(videos)} videos to {root}")
    return root


def _read_manifest(root: Path) -> tuple[dict, list[Diagnostic]]:
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        return {}, [Diagnostic(str(manifest_path), None, "manifest not found")]
    try:
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        return {}, [Diagnostic(str(manifest_path), e.lineno, f"invalid JSON: {e.msg}")]
    if not isinstance(manifest, dict):
        return {}, [Diagnostic(str(manifest_path), None, "manifest must be a JSON object")]

    problems = []
    if manifest.get("schema") != SCHEMA_VERSION:
        problems.append(Diagnostic(str(manifest_path), None, f"unsupported schema {manifest.get('schema')}"))
    vocabulary = manifest.get("vocabulary")
    if vocabulary not in VOCABULARIES:
        problems.append(Diagnostic(str(manifest_path), None, f"unknown vocabulary '{vocabulary}'"))
    elif tuple(manifest.get("phase_ids", ())) != VOCABULARIES[vocabulary].phase_ids:
        problems.append(Diagnostic(str(manifest_path), None, f"phase ids do not match vocabulary '{vocabulary}'"))
    if not isinstance(manifest.get("videos"), list):
        problems.append(Diagnostic(str(manifest_path), None, "'videos' must be a list"))
    return manifest, problems


def _parse_video_file(
    file_path: Path,
    video_id: str,
    phase_ids: tuple[str, ...],
    observation_shape: Optional[tuple[int, ...]],
) -> tuple[Optional[SurgeryVideo], list[Diagnostic]]:
    name = str(file_path)
    if not file_path.exists():
        return None, [Diagnostic(name, None, "annotation file not found")]

    with open(file_path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].split("\t", 1)[0] != f"#schema={SCHEMA_VERSION}":
        return None, [Diagnostic(name, 1, f"missing '#schema={SCHEMA_VERSION}' header")]

    problems: list[Diagnostic] = []
    phase_index = {p: i for i, p in enumerate(phase_ids)}
    width = int(np.prod(observation_shape)) if observation_shape else 0
    expected_fields = 5 if observation_shape else 4
    phases, tools, observations = [], [], []
    expected_t = 0

    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != expected_fields:
            problems.append(Diagnostic(name, line_number, f"expected {expected_fields} fields, got {len(fields)}"))
            expected_t += 1
            continue
        row_video, timestamp, phase, flags = fields[:4]
        if row_video != video_id:
            problems.append(Diagnostic(name, line_number, f"video id '{row_video}' differs from '{video_id}'"))
        try:
            t = int(timestamp)
        except ValueError:
            problems.append(Diagnostic(name, line_number, f"timestamp '{timestamp}' is not an integer"))
            expected_t += 1
            continue
        if t != expected_t:
            problems.append(Diagnostic(name, line_number, f"timestamp {t} is not consecutive (expected {expected_t})"))
        expected_t = t + 1
        if phase not in phase_index:
            problems.append(Diagnostic(name, line_number, f"phase '{phase}' is not in the vocabulary"))
            continue
        flag_values = flags.split(",")
        if len(flag_values) != N_TOOLS or any(v not in ("0", "1") for v in flag_values):
            problems.append(Diagnostic(name, line_number, f"expected {N_TOOLS} binary tool flags, got '{flags}'"))
            continue
        if observation_shape:
            try:
                payload = np.array([float(v) for v in fields[4].split()])
            except ValueError:
                problems.append(Diagnostic(name, line_number, "observation payload is not numeric"))
                continue
            if payload.size != width:
                problems.append(Diagnostic(name, line_number, f"observation has {payload.size} values, expected {width}"))
                continue
            observations.append(payload.reshape(observation_shape))
        phases.append(phase_index[phase])
        tools.append([int(v) for v in flag_values])

    if problems:
        return None, problems
    video = SurgeryVideo(
        video_id=video_id,
        phases=np.asarray(phases, dtype=np.int64),
        tools=np.asarray(tools, dtype=np.int64).reshape(-1, N_TOOLS),
        observations=np.asarray(observations).reshape((-1, *observation_shape)) if observation_shape else None,
    )
    return video, []


def _load(path: str | Path) -> tuple[Optional[Dataset], list[Diagnostic]]:
    root = Path(path)
    if not root.is_dir():
        return None, [Diagnostic(str(root), None, "dataset directory not found")]
    manifest, problems = _read_manifest(root)
    if problems:
        return None, problems

    phase_ids = tuple(manifest["phase_ids"])
    shape = tuple(manifest["observation_shape"]) if manifest.get("observation_shape") else None
    videos = []
    for video_id in manifest["videos"]:
        try:
            file_path = video_file(root, video_id)
        except ValueError as e:
            problems.append(Diagnostic(str(root / MANIFEST), None, str(e)))
            continue
        video, video_problems = _parse_video_file(file_path, video_id, phase_ids, shape)
        problems.extend(video_problems)
        if video is not None:
            videos.append(video)

    split = None
    if manifest.get("split"):
        raw = manifest["split"]
        split = CorpusSplit(finetune=list(raw["finetune"]), evaluation=list(raw["evaluation"]), folds=[list(f) for f in raw["folds"]])
        known = set(manifest["videos"])
        unknown = [v for v in split.finetune + split.evaluation if v not in known]
        if unknown:
            problems.append(Diagnostic(str(root / MANIFEST), None, f"split names unknown videos: {', '.join(unknown)}"))

    dataset = Dataset(
        vocabulary=manifest["vocabulary"],
        phase_ids=phase_ids,
        videos=videos,
        observation_shape=shape,
        split=split,
    )
    return dataset, problems


def validate_dataset(path: str | Path) -> list[Diagnostic]:
    """Every schema violation found, each with its file and line."""
    _, problems = _load(path)
    return problems


def read_dataset(path: str | Path) -> Dataset:
    dataset, problems = _load(path)
    if problems:
        first = problems[0]
        raise DatasetFormatError(first.path, first.line, first.reason)
    return dataset


def dataset_fingerprint(path: str | Path) -> str:
    """Digest of the manifest and every annotation file it lists."""
    root = Path(path)
    digest = hashlib.sha256((root / MANIFEST).read_bytes())
    with open(root / MANIFEST, encoding="utf-8") as f:
        video_ids = json.load(f).get("videos", [])
    for video_id in video_ids:
        digest.update(video_file(root, video_id).read_bytes())
    return digest.hexdigest()[:16]
