"""Data models for workflow recognition."""

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np


@dataclass
class CorpusConfig:
    vocabulary: str = "cholec80"
    videos: int = 16
    scale: float = 0.1  # multiplies the vocabulary duration moments
    mode: str = "features"  # "features" or "images"
    feature_dim: int = 16
    image_size: int = 32
    separation: float = 4.0  # norm of the per-phase anchor means
    tool_offset: float = 2.0
    noise: float = 1.0
    tool_block_seconds: float = 20.0  # mean length of a tool presence run
    seed: int = 0


@dataclass
class NetworkConfig:
    conv_channels: tuple[int, int] = (8, 16)
    kernel: int = 3
    pool: int = 2
    fc6_width: int = 64
    feature_width: int = 64  # fc7 analog, F
    head_lr_multiplier: float = 10.0
    proxy_categories: int = 8
    proxy_samples_per_category: int = 200
    pretrain_iterations: int = 1000


@dataclass
class SgdSchedule:
    base_rate: float = 1e-3
    decay_factor: float = 0.1
    decay_period: int = 2000
    total_iterations: int = 5000
    batch_size: int = 50
    momentum: float = 0.0

    def __post_init__(self):
        if self.base_rate <= 0:
            raise ValueError("base_rate must be positive")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.decay_period < 1 or self.total_iterations < 1 or self.batch_size < 1:
            raise ValueError("decay_period, total_iterations and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def effective_rate(self, iteration: int) -> float:
        return self.base_rate * self.decay_factor ** (iteration // self.decay_period)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined loss a*L_T + b*L_P."""
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or self.a + self.b <= 0:
            raise ValueError(f"Invalid loss weights ({self.a}, {self.b}): need a, b >= 0 and a + b > 0")

    @property
    def label(self) -> str:
        if self.b == 0:
            return "toolnet"
        if self.a == 0:
            return "phasenet"
        return "endonet"


@dataclass
class SvmConfig:
    C: float = 1.0
    epochs: int = 1000
    standardize: bool = True


@dataclass
class HhmmConfig:
    gmm_components: int = 5
    binary_components: int = 1
    bottom_state_policy: str = "duration"  # "duration" or "single"
    seconds_per_bottom_state: float = 30.0
    max_bottom_states: int = 8
    transition_epsilon: float = 1e-3
    em_iterations: int = 50
    em_tolerance: float = 1e-6
    variance_floor: float = 1e-6
    binary_variance_floor: float = 1e-2
    log_density_floor: float = -700.0


@dataclass
class EvaluationConfig:
    finetune_fraction: float = 0.5
    folds: int = 4
    boundary_tolerances: tuple[int, ...] = (30, 60, 90, 120)
    block_gap: int = 15
    block_tools: tuple[str, ...] = ("bipolar", "clipper")
    block_min_precision: float = 0.95
    classifier_training: str = "finetune"  # or "cross_validation"
    confidence_source: str = "svm"  # or "fc_phase"
    feature_variants: bool = False
    finetune_sizes: tuple[int, ...] = ()
    ribbon_videos: int = 5  # top/bottom videos listed in the report


@dataclass
class ExperimentConfig:
    dataset_path: str
    output_dir: str
    vocabulary: str = "cholec80"
    mode: str = "offline"  # "offline" or "online"
    runs: int = 5
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    schedule: SgdSchedule = field(default_factory=SgdSchedule)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    hhmm: HhmmConfig = field(default_factory=HhmmConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)


@dataclass
class FrameRecord:
    """One 1-fps frame of a surgery."""
    video_id: str
    timestamp: int
    phase: str
    tools: tuple[int, ...]
    observation: Optional[np.ndarray] = None


@dataclass
class SurgeryVideo:
    """A whole surgery stored column-wise; phases are vocabulary indexes."""
    video_id: str
    phases: np.ndarray  # (T,) int
    tools: np.ndarray  # (T, 7) int, 0/1
    observations: Optional[np.ndarray] = None  # (T, *observation_shape)

    def __len__(self) -> int:
        return int(self.phases.shape[0])

    def frames(self, phase_ids: tuple[str, ...]) -> Iterator[FrameRecord]:
        for t in range(len(self)):
            yield FrameRecord(
                video_id=self.video_id,
                timestamp=t,
                phase=phase_ids[int(self.phases[t])],
                tools=tuple(int(v) for v in self.tools[t]),
                observation=None if self.observations is None else self.observations[t],
            )


@dataclass
class CorpusSplit:
    finetune: list[str]
    evaluation: list[str]
    folds: list[list[str]]


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class PhaseScores:
    """Per-phase precision/recall in percent; None where undefined."""
    precision: dict[str, Optional[float]]
    recall: dict[str, Optional[float]]
    mean_precision: Optional[float]
    mean_recall: Optional[float]
    accuracy: float
    undefined_precision: list[str] = field(default_factory=list)  # present in truth, never predicted


@dataclass(frozen=True)
class ToolBlock:
    tool: str
    start: int
    end: int  # inclusive


@dataclass
class DecodeResult:
    phases: np.ndarray  # (T,) phase indexes
    log_filtering: Optional[np.ndarray] = None  # (T, P), online only
    log_probability: Optional[float] = None  # best path joint log-probability, offline only
    log_likelihood: Optional[float] = None  # total sequence log-likelihood, online only


@dataclass
class RunArtifacts:
    run_index: int
    run_dir: str
    network_path: str
    loss_log_path: str
    svm_paths: list[str]
    hhmm_paths: list[str]
    report: dict
