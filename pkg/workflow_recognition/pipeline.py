"""Experiment orchestration: pretrain, finetune, extract, svm, hhmm, decode, metrics.

Every run owns `<output_dir>/run-NN/`. Stage artifacts are versioned
containers whose header carries a fingerprint of everything that produced
them; a re-run reuses an artifact only when its checksum and fingerprint
both match, so a crashed experiment resumes where it stopped.
"""

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.special import expit

from .config import config_to_dict, validate_paths
from .corpus.dataset_io import Dataset, dataset_fingerprint, read_dataset
from .corpus.split import fold_of, make_split
from .corpus.synth import make_proxy_corpus
from .corpus.vocabulary import VOCABULARIES, PhaseVocabulary
from .evaluation import metrics
from .evaluation.reports import block_to_dict, boundary_to_dict, ribbon_frame, scores_to_dict, write_report
from .learning.endonet import (
    EndoNetModel,
    Extraction,
    extract,
    finetune,
    load_endonet,
    pretrain,
    save_endonet,
    write_loss_log,
)
from .learning.svm import OvrSvmModel, load_svm, save_svm, score, train_ovr
from .learning.tensor_net import load_network, save_network
from .models import DecodeResult, ExperimentConfig, LossWeights, RunArtifacts, SurgeryVideo
from .temporal.hhmm import (
    Hhmm,
    PhaseTopology,
    iter_forward_filter,
    load_hhmm,
    save_hhmm,
    train_hhmm,
    viterbi,
    write_topology,
)
from .utils import TOOLS, ContainerError, atomic_write_text, derive_seed, fingerprint, read_container, write_container

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "extract", "svm", "hhmm", "decode", "metrics")


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"Stage '{stage}' failed: {message}")


class LookaheadError(RuntimeError):
    pass


@contextmanager
def stage(name: str) -> Iterator[None]:
    logger.info(f"Stage {name}: start")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.exception(f"Stage {name} failed")
        raise StageError(name, str(e)) from e
    logger.info(f"Stage {name}: done")


class ObservationStream:
    """Hands out one observation per step and remembers how far it has been read."""

    def __init__(self, observations: np.ndarray):
        self._observations = observations
        self.consumed = 0

    def __iter__(self) -> Iterator[np.ndarray]:
        for row in self._observations:
            self.consumed += 1
            yield row


@dataclass
class ExperimentResult:
    runs: list[RunArtifacts]
    summary: dict
    report_dir: str


@dataclass
class PhaseRun:
    """Decoded evaluation videos for one feature type."""
    confidences: dict[str, np.ndarray]
    offline: dict[str, np.ndarray]
    online: dict[str, np.ndarray]
    svm_paths: list[str]
    hhmm_paths: list[str]


def _concat(videos: list[SurgeryVideo], field: str) -> np.ndarray:
    return np.concatenate([getattr(v, field) for v in videos])


def _load_if_fresh(path: Path, expected: str, loader):
    """Artifact from an earlier attempt, or None when missing, corrupt or stale."""
    if not path.exists():
        return None
    try:
        obj, header = loader(str(path))
    except (ContainerError, KeyError, ValueError) as e:
        logger.warning(f"Ignoring unreadable artifact {path}: {e}")
        return None
    if header.get("fingerprint") != expected:
        logger.info(f"Artifact {path} is stale; rebuilding")
        return None
    logger.info(f"Reusing {path}")
    return obj


def unexpected_transitions(topology: PhaseTopology, vocabulary: PhaseVocabulary) -> list[tuple[str, str]]:
    """Learned phase changes that the vocabulary grammar does not list."""
    grammar = vocabulary.allowed_transitions()
    ids = vocabulary.phase_ids
    return sorted((ids[p], ids[q]) for p, q in topology.allowed() if p != q and (p, q) not in grammar)


def decode_offline(model: Hhmm, observations: np.ndarray) -> DecodeResult:
    return viterbi(model, observations)


def decode_online(model: Hhmm, observations: np.ndarray) -> DecodeResult:
    """Forward filtering over a stream; each estimate may only see observations up to its own timestep."""
    stream = ObservationStream(observations)
    filtering = []
    for t, log_phase in enumerate(iter_forward_filter(model, stream)):
        if stream.consumed > t + 1:
            raise LookaheadError(f"Online decoder read {stream.consumed} observations at timestep {t}")
        filtering.append(log_phase)
    log_filtering = np.array(filtering)
    return DecodeResult(phases=np.argmax(log_filtering, axis=1), log_filtering=log_filtering)


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, dataset: Optional[Dataset] = None):
        self.config = config
        self.dataset = dataset or read_dataset(config.dataset_path)
        self.videos = self.dataset.by_id()
        self.phase_ids = self.dataset.phase_ids
        self.n_phases = len(self.phase_ids)
        self.split = self.dataset.split or make_split(
            [v.video_id for v in self.dataset.videos],
            config.evaluation.finetune_fraction,
            config.evaluation.folds,
            config.seed,
        )
        if not self.split.finetune:
            raise StageError("finetune", "the fine-tuning subset is empty")
        if self.dataset.observation_shape is None:
            raise StageError("finetune", "the dataset carries no frame observations")
        self.data_fingerprint = dataset_fingerprint(config.dataset_path)
        self.settings = config_to_dict(config)
        self.output_dir = Path(config.output_dir)

    def _fp(self, *parts) -> str:
        return fingerprint([self.data_fingerprint, *parts])

    def _videos(self, ids: list[str]) -> list[SurgeryVideo]:
        return [self.videos[v] for v in ids]

    # pretrain / finetune / extract

    def _pretrain(self, run_dir: Path, seed: int):
        net_config, schedule = self.config.network, self.config.schedule
        fp = self._fp("pretrain", self.settings["network"], self.settings["schedule"], self.settings["corpus"], seed)
        path = run_dir / "pretrained.json"
        cached = _load_if_fresh(path, fp, load_network)
        if cached is not None:
            return cached, fp
        proxy_x, proxy_labels = make_proxy_corpus(
            self.config.corpus,
            self.dataset.observation_shape,
            net_config.proxy_categories,
            net_config.proxy_samples_per_category,
            seed,
        )
        result = pretrain(proxy_x, proxy_labels, net_config, schedule, seed=derive_seed(seed, "pretrain"))
        logger.info(
            f"Backbone has {result.network.parameter_count()} parameters; "
            f"proxy accuracy {result.proxy_accuracy(proxy_x, proxy_labels):.3f}"
        )
        save_network(result.network, str(path), {"fingerprint": fp})
        return result.network, fp

    def _finetune(self, run_dir: Path, backbone, upstream: str, seed: int, weights: LossWeights, ids: list[str], name: str):
        fp = self._fp("finetune", upstream, self.settings["schedule"], weights.a, weights.b, ids, seed)
        path = run_dir / f"{name}.json"
        cached = _load_if_fresh(path, fp, load_endonet)
        if cached is not None:
            return cached, fp
        videos = self._videos(ids)
        model, records = finetune(
            backbone,
            _concat(videos, "observations"),
            _concat(videos, "tools"),
            _concat(videos, "phases"),
            self.n_phases,
            weights,
            self.config.schedule,
            seed=derive_seed(seed, "finetune", name),
            head_lr_multiplier=self.config.network.head_lr_multiplier,
        )
        write_loss_log(str(run_dir / f"{name}-loss.tsv"), records)
        save_endonet(model, str(path), {"fingerprint": fp})
        return model, fp

    def _extract(self, run_dir: Path, model: EndoNetModel, upstream: str, name: str) -> tuple[dict[str, Extraction], str]:
        fp = self._fp("extract", upstream)
        path = run_dir / f"{name}-features.json"

        def load(p):
            header, arrays = read_container(p, "features")
            out = {}
            for video_id in header["videos"]:
                out[video_id] = Extraction(
                    fc7=arrays[f"{video_id}.fc7"],
                    fc8=arrays.get(f"{video_id}.fc8"),
                    tool_logits=arrays.get(f"{video_id}.tool_logits"),
                    phase_logits=arrays.get(f"{video_id}.phase_logits"),
                )
            return out, header

        cached = _load_if_fresh(path, fp, load)
        if cached is not None:
            return cached, fp
        features = {v.video_id: extract(model, v.observations) for v in self.dataset.videos}
        arrays = {}
        for video_id, ex in features.items():
            for key in ("fc7", "fc8", "tool_logits", "phase_logits"):
                value = getattr(ex, key)
                if value is not None:
                    arrays[f"{video_id}.{key}"] = value
        write_container(path, "features", {"fingerprint": fp, "videos": list(features)}, arrays)
        return features, fp

    # svm / hhmm / decode

    def _training_groups(self) -> list[tuple[str, list[str], list[str]]]:
        """(tag, training videos, decoded videos) per classifier/HHMM pair."""
        if self.config.evaluation.classifier_training == "cross_validation":
            folds = self.split.folds
            if len(folds) < 2:
                raise StageError("svm", "cross-validation needs at least 2 folds")
            return [
                (f"fold{k + 1}", [v for j, f in enumerate(folds) if j != k for v in f], list(fold))
                for k, fold in enumerate(folds)
            ]
        return [("all", list(self.split.finetune), list(self.split.evaluation))]

    def _phase_run(
        self,
        run_dir: Path,
        features: dict[str, np.ndarray],
        upstream: str,
        seed: int,
        name: str,
        use_svm: bool = True,
        persist: bool = True,
    ) -> PhaseRun:
        """SVM confidences, HHMM training and both decoders for one feature type."""
        confidences: dict[str, np.ndarray] = {}
        offline: dict[str, np.ndarray] = {}
        online: dict[str, np.ndarray] = {}
        svm_paths, hhmm_paths = [], []
        hhmm_config = self.config.hhmm

        for tag, train_ids, decode_ids in self._training_groups():
            group_fp = self._fp(name, upstream, tag, self.settings["svm"], use_svm)
            needed = train_ids + decode_ids
            with stage("svm"):
                if use_svm:
                    svm_path = run_dir / f"{name}-svm-{tag}.json"
                    model: Optional[OvrSvmModel] = _load_if_fresh(svm_path, group_fp, load_svm) if persist else None
                    if model is None:
                        model = train_ovr(
                            np.concatenate([features[v] for v in train_ids]),
                            np.concatenate([self.videos[v].phases for v in train_ids]),
                            self.n_phases,
                            self.config.svm,
                        )
                        if persist:
                            save_svm(model, str(svm_path), {"fingerprint": group_fp})
                    if persist:
                        svm_paths.append(str(svm_path))
                    group_conf = {v: score(model, features[v]) for v in needed}
                else:
                    group_conf = {v: features[v] for v in needed}

            hhmm_fp = self._fp(group_fp, self.settings["hhmm"], seed)
            with stage("hhmm"):
                hhmm_path = run_dir / f"{name}-hhmm-{tag}.json"
                hhmm: Optional[Hhmm] = _load_if_fresh(hhmm_path, hhmm_fp, load_hhmm) if persist else None
                if hhmm is None:
                    hhmm = train_hhmm(
                        [group_conf[v] for v in train_ids],
                        [self.videos[v].phases for v in train_ids],
                        self.n_phases,
                        hhmm_config,
                        seed=derive_seed(seed, "hhmm", name, tag),
                    )
                    unexpected = unexpected_transitions(hhmm.topology, VOCABULARIES[self.dataset.vocabulary])
                    if unexpected:
                        pairs = ", ".join(f"{p}->{q}" for p, q in unexpected)
                        logger.warning(f"Learned topology for {name}-{tag} has transitions outside the grammar: {pairs}")
                    if persist:
                        save_hhmm(hhmm, str(hhmm_path), {"fingerprint": hhmm_fp})
                        write_topology(str(run_dir / f"{name}-topology-{tag}.tsv"), hhmm.topology, self.phase_ids)
                if persist:
                    hhmm_paths.append(str(hhmm_path))

            with stage("decode"):
                for video_id in decode_ids:
                    confidences[video_id] = group_conf[video_id]
                    offline[video_id] = decode_offline(hhmm, group_conf[video_id]).phases
                    online[video_id] = decode_online(hhmm, group_conf[video_id]).phases

        return PhaseRun(confidences, offline, online, svm_paths, hhmm_paths)

    # metrics

    def _phase_report(self, phase_run: PhaseRun) -> dict:
        ids = sorted(phase_run.offline)
        truth = np.concatenate([self.videos[v].phases for v in ids])
        report = {}
        for mode in ("offline", "online"):
            predicted = np.concatenate([getattr(phase_run, mode)[v] for v in ids])
            report[mode] = scores_to_dict(metrics.phase_scores(predicted, truth, self.phase_ids))
        return report

    def _metrics(self, phase_run: PhaseRun, features: dict[str, Extraction]) -> dict:
        ids = sorted(phase_run.offline)
        truth = np.concatenate([self.videos[v].phases for v in ids])
        phase = self._phase_report(phase_run)
        pre_hhmm = np.concatenate([np.argmax(phase_run.confidences[v], axis=1) for v in ids])
        phase["pre_hhmm"] = scores_to_dict(metrics.phase_scores(pre_hhmm, truth, self.phase_ids))

        boundaries = None
        per_video = {}
        for video_id in ids:
            video_truth = self.videos[video_id].phases
            table = metrics.boundary_table(
                phase_run.offline[video_id], video_truth, self.phase_ids, self.config.evaluation.boundary_tolerances
            )
            boundaries = table if boundaries is None else boundaries.merge(table)
            per_video[video_id] = {
                mode: 100.0 * float(np.mean(getattr(phase_run, mode)[video_id] == video_truth))
                for mode in ("offline", "online")
            }
            per_video[video_id]["fold"] = fold_of(self.split, video_id) + 1

        report = {
            "phase": phase,
            "per_video": per_video,
            "boundaries": boundary_to_dict(boundaries),
            "tool_ap": self._tool_ap(ids, features),
            "blocks": self._blocks(ids, features),
        }
        return report

    def _tool_ap(self, ids: list[str], features: dict[str, Extraction]) -> dict:
        if features[ids[0]].tool_logits is None:
            return {}
        scores = np.concatenate([features[v].tool_logits for v in ids])
        labels = np.concatenate([self.videos[v].tools for v in ids])
        ap = {tool: metrics.average_precision(scores[:, i], labels[:, i]) for i, tool in enumerate(TOOLS)}
        defined = [v for v in ap.values() if v is not None]
        ap["mean"] = float(np.mean(defined)) if defined else None
        return ap

    def _blocks(self, ids: list[str], features: dict[str, Extraction]) -> dict:
        evaluation = self.config.evaluation
        if features[ids[0]].tool_logits is None:
            return {}
        out = {}
        for tool in evaluation.block_tools:
            i = TOOLS.index(tool)
            validation = self.split.finetune
            threshold = metrics.select_detection_threshold(
                expit(np.concatenate([features[v].tool_logits[:, i] for v in validation])),
                np.concatenate([self.videos[v].tools[:, i] for v in validation]),
                evaluation.block_min_precision,
            )
            effective = np.inf if threshold is None else threshold
            combined = None
            for video_id in ids:
                truth_blocks = metrics.tool_blocks(self.videos[video_id].tools[:, i], evaluation.block_gap, tool)
                report = metrics.block_detection_report(
                    truth_blocks, expit(features[video_id].tool_logits[:, i]), effective, evaluation.block_gap, tool
                )
                combined = report if combined is None else combined.merge(report)
            out[tool] = block_to_dict(combined, threshold)
        return out

    def _ribbons(self, run_dir: Path, phase_run: PhaseRun) -> None:
        rows = []
        for video_id in sorted(phase_run.offline):
            truth = self.videos[video_id].phases
            for t in range(len(truth)):
                rows.append({
                    "video_id": video_id,
                    "timestamp": t,
                    "truth": self.phase_ids[truth[t]],
                    "offline": self.phase_ids[phase_run.offline[video_id][t]],
                    "online": self.phase_ids[phase_run.online[video_id][t]],
                })
        atomic_write_text(run_dir / "ribbons.tsv", ribbon_frame(rows).to_csv(sep="\t", index=False))

    # supplementary evaluations

    def _variants(self, run_dir: Path, backbone, backbone_fp: str, features: dict[str, Extraction], upstream: str, seed: int) -> dict:
        """Phase recognition from ground-truth tools, PhaseNet fc7, fc8 and fc7 + ground-truth tools."""
        ground_truth = {v.video_id: v.tools.astype(np.float64) for v in self.dataset.videos}

        with stage("finetune"):
            phasenet, phasenet_fp = self._finetune(
                run_dir, backbone, backbone_fp, seed, LossWeights(0.0, 1.0), self.split.finetune, "phasenet"
            )
        with stage("extract"):
            phasenet_features, _ = self._extract(run_dir, phasenet, phasenet_fp, "phasenet")

        inputs = {
            "gt_tools": ground_truth,
            "phasenet_fc7": {v: e.fc7 for v, e in phasenet_features.items()},
        }
        if all(e.fc8 is not None for e in features.values()):
            inputs["fc8"] = {v: e.fc8 for v, e in features.items()}
        inputs["fc7_gt_tools"] = {v: np.hstack([e.fc7, ground_truth[v]]) for v, e in features.items()}

        variants = {}
        for name, variant_features in inputs.items():
            # binary tool vectors go straight to the HHMM
            phase_run = self._phase_run(
                run_dir, variant_features, upstream, seed, name, use_svm=name != "gt_tools", persist=False
            )
            width = next(iter(variant_features.values())).shape[1]
            variants[name] = {**self._phase_report(phase_run), "feature_width": int(width)}
        return variants

    def _finetune_sweep(self, run_dir: Path, backbone, backbone_fp: str, seed: int) -> dict:
        sweep = {}
        for size in self.config.evaluation.finetune_sizes:
            ids = self.split.finetune[:size]
            name = f"sweep{size}"
            with stage("finetune"):
                model, fp = self._finetune(run_dir, backbone, backbone_fp, seed, self.config.loss_weights, ids, name)
            with stage("extract"):
                features, _ = self._extract(run_dir, model, fp, name)
            phase_run = self._phase_run(run_dir, self._svm_input(features), fp, seed, name, persist=False)
            report = self._phase_report(phase_run)
            sweep[str(size)] = {
                "videos": len(ids),
                "offline_accuracy": report["offline"]["accuracy"],
                "online_accuracy": report["online"]["accuracy"],
            }
        return sweep

    def _svm_input(self, features: dict[str, Extraction]) -> dict[str, np.ndarray]:
        if self.config.evaluation.confidence_source == "fc_phase":
            return {v: e.phase_logits for v, e in features.items()}
        return {v: (e.fc8 if e.fc8 is not None else e.fc7) for v, e in features.items()}

    # one run

    def run(self, index: int, until: str = "metrics") -> RunArtifacts:
        seed = derive_seed(self.config.seed, "run", index)
        run_dir = self.output_dir / f"run-{index + 1:02d}"
        run_dir.mkdir(parents=True, exist_ok=True)
        resolved = {**config_to_dict(self.config), "run_index": index, "run_seed": seed}
        atomic_write_text(run_dir / "resolved_config.json", json.dumps(resolved, indent=2, sort_keys=True))
        stop = STAGES.index(until)

        with stage("pretrain"):
            backbone, backbone_fp = self._pretrain(run_dir, seed)
        with stage("finetune"):
            model, model_fp = self._finetune(
                run_dir, backbone, backbone_fp, seed, self.config.loss_weights, self.split.finetune, "network"
            )
        artifacts = RunArtifacts(
            run_index=index,
            run_dir=str(run_dir),
            network_path=str(run_dir / "network.json"),
            loss_log_path=str(run_dir / "network-loss.tsv"),
            svm_paths=[],
            hhmm_paths=[],
            report={},
        )
        if stop < STAGES.index("extract"):
            return artifacts

        with stage("extract"):
            features, features_fp = self._extract(run_dir, model, model_fp, "network")
        if stop < STAGES.index("svm"):
            return artifacts

        use_svm = self.config.evaluation.confidence_source == "svm"
        phase_run = self._phase_run(run_dir, self._svm_input(features), features_fp, seed, "phase", use_svm=use_svm)
        artifacts.svm_paths, artifacts.hhmm_paths = phase_run.svm_paths, phase_run.hhmm_paths
        if stop < STAGES.index("metrics"):
            return artifacts

        with stage("metrics"):
            report = {"run": index + 1, "seed": seed, "network": self.config.loss_weights.label, "mode": self.config.mode}
            report.update(self._metrics(phase_run, features))
            self._ribbons(run_dir, phase_run)
        if self.config.evaluation.feature_variants:
            report["variants"] = self._variants(run_dir, backbone, backbone_fp, features, features_fp, seed)
        if self.config.evaluation.finetune_sizes:
            report["finetune_sweep"] = self._finetune_sweep(run_dir, backbone, backbone_fp, seed)

        atomic_write_text(run_dir / "report.json", json.dumps(report, indent=2, sort_keys=True))
        logger.info(
            f"Run {index + 1}: offline accuracy {report['phase']['offline']['accuracy']:.2f}%, "
            f"online accuracy {report['phase']['online']['accuracy']:.2f}%"
        )
        artifacts.report = report
        return artifacts


def run_experiment(config: ExperimentConfig, until: str = "metrics") -> ExperimentResult:
    if until not in STAGES:
        raise ValueError(f"Unknown stage '{until}'. Available: {', '.join(STAGES)}")
    validate_paths(config)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(output_dir / "resolved_config.json", json.dumps(config_to_dict(config), indent=2, sort_keys=True))

    runner = ExperimentRunner(config)
    runs = [runner.run(i, until) for i in range(config.runs)]
    summary = {}
    report_dir = output_dir / "report"
    if until == "metrics":
        summary = write_report(report_dir, [r.report for r in runs], config.evaluation.ribbon_videos)
    return ExperimentResult(runs=runs, summary=summary, report_dir=str(report_dir))


def load_run_reports(output_dir: str | Path) -> list[dict]:
    reports = []
    for path in sorted(Path(output_dir).glob("run-*/report.json")):
        with open(path, encoding="utf-8") as f:
            reports.append(json.load(f))
    return reports
