"""Synthetic surgeries following a phase grammar, duration table and tool usage profile.

Feature-mode observations are phase anchors plus tool offsets plus unit
Gaussian noise. Anchors and offsets are mutually orthonormal directions
(scaled), so the tool signal never blurs the phase signal. Image mode draws
a small procedural tile per frame from the same labels.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ..models import CorpusConfig, SurgeryVideo
from ..utils import N_TOOLS, derive_seed
from .vocabulary import PhaseVocabulary, get_vocabulary

logger = logging.getLogger(__name__)

MAX_PHASE_VISITS = 2


@dataclass
class ObservationModel:
    anchors: np.ndarray  # (P, D)
    tool_offsets: np.ndarray  # (7, D)
    noise: float
    mode: str = "features"
    image_size: int = 32

    @classmethod
    def build(cls, config: CorpusConfig, n_phases: int) -> "ObservationModel":
        """Shared by every video of a corpus: depends only on the corpus seed."""
        rng = np.random.default_rng(derive_seed(config.seed, "anchors"))
        n_directions = n_phases + N_TOOLS
        if config.mode == "features" and config.feature_dim < n_directions:
            raise ValueError(f"feature_dim must be at least {n_directions} for orthogonal anchors")
        dim = config.feature_dim if config.mode == "features" else n_directions
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_directions)))
        return cls(
            anchors=config.separation * q[:, :n_phases].T,
            tool_offsets=config.tool_offset * q[:, n_phases:].T,
            noise=config.noise,
            mode=config.mode,
            image_size=config.image_size,
        )

    @property
    def observation_shape(self) -> tuple[int, ...]:
        if self.mode == "images":
            return (3, self.image_size, self.image_size)
        return (self.anchors.shape[1],)

    def features(self, phases: np.ndarray, tools: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = self.anchors[phases] + tools @ self.tool_offsets
        return mean + self.noise * rng.standard_normal(mean.shape)

    def images(self, phases: np.ndarray, tools: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        size = self.image_size
        yy, xx = np.mgrid[0:size, 0:size] / size
        frames = np.empty((phases.shape[0], 3, size, size))
        for t, (phase, flags) in enumerate(zip(phases, tools)):
            angle = np.pi * phase / len(self.anchors)
            frequency = 2.0 + phase
            texture = np.sin(2 * np.pi * frequency * (np.cos(angle) * xx + np.sin(angle) * yy))
            tile = np.stack([texture * np.cos(c + phase) for c in range(3)])
            for tool in np.flatnonzero(flags):
                # one bar per tool, position fixed per tool
                row = int((tool + 0.5) * size / N_TOOLS)
                tile[tool % 3, max(row - 1, 0):row + 2, size // 4: 3 * size // 4] += 2.0
            frames[t] = tile + self.noise * 0.5 * rng.standard_normal(tile.shape)
        return frames

    def render(self, phases: np.ndarray, tools: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.mode == "images":
            return self.images(phases, tools, rng)
        return self.features(phases, tools.astype(np.float64), rng)


def sample_duration(vocab: PhaseVocabulary, phase: int, scale: float, rng: np.random.Generator) -> int:
    """Normal duration with the table moments scaled, truncated at 1 s."""
    value = rng.normal(vocab.duration_means[phase] * scale, vocab.duration_stds[phase] * scale)
    return int(round(max(1.0, value)))


def sample_phase_sequence(vocab: PhaseVocabulary, rng: np.random.Generator) -> list[int]:
    """Walk the grammar from the first phase; a phase is entered at most twice."""
    sequence = [0]
    visits = {0: 1}
    while sequence[-1] in vocab.grammar:
        successors = [(q, p) for q, p in vocab.grammar[sequence[-1]] if visits.get(q, 0) < MAX_PHASE_VISITS]
        if not successors:
            break
        probs = np.array([p for _, p in successors])
        choice = successors[rng.choice(len(successors), p=probs / probs.sum())][0]
        sequence.append(choice)
        visits[choice] = visits.get(choice, 0) + 1
    return sequence


def sample_tool_flags(usage: np.ndarray, phases: np.ndarray, block_seconds: float, rng: np.random.Generator) -> np.ndarray:
    """Per-tool two-state Markov chain whose stationary presence equals the usage profile."""
    n_frames = phases.shape[0]
    flags = np.zeros((n_frames, N_TOOLS), dtype=np.int64)
    p_on = np.clip(usage[phases], 0.0, 0.999)  # (T, 7)
    leave = np.full_like(p_on, 1.0 / max(block_seconds, 1.0))
    enter = leave * p_on / (1.0 - p_on)
    # keep rates valid for heavy-usage tools by shortening absences instead
    too_fast = enter > 1.0
    leave[too_fast] = (1.0 - p_on[too_fast]) / p_on[too_fast]
    enter[too_fast] = 1.0

    state = np.zeros(N_TOOLS, dtype=bool)
    for t in range(n_frames):
        u = rng.random(N_TOOLS)
        if t == 0 or phases[t] != phases[t - 1]:
            # each phase starts from its stationary distribution
            state = u < p_on[t]
        else:
            state = np.where(state, u >= leave[t], u < enter[t])
        flags[t] = state
    return flags


def sample_surgery(
    vocab: PhaseVocabulary,
    config: CorpusConfig,
    observation_model: Optional[ObservationModel],
    video_id: str,
    seed: int,
) -> SurgeryVideo:
    if config.scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    sequence = sample_phase_sequence(vocab, rng)
    durations = [sample_duration(vocab, p, config.scale, rng) for p in sequence]
    phases = np.repeat(np.asarray(sequence, dtype=np.int64), durations)
    tools = sample_tool_flags(vocab.usage_matrix(), phases, config.tool_block_seconds, rng)
    observations = None if observation_model is None else observation_model.render(phases, tools, rng)
    return SurgeryVideo(video_id=video_id, phases=phases, tools=tools, observations=observations)


def generate_corpus(config: CorpusConfig) -> tuple[list[SurgeryVideo], ObservationModel]:
    vocab = get_vocabulary(config.vocabulary)
    model = ObservationModel.build(config, vocab.n_phases)
    videos = [
        sample_surgery(vocab, config, model, f"video{i + 1:02d}", derive_seed(config.seed, "video", i))
        for i in range(config.videos)
    ]
    total = sum(len(v) for v in videos)
    logger.info(f"Generated {len(videos)} {vocab.name} surgeries ({total} frames, {config.mode} mode)")
    return videos, model


def make_proxy_corpus(
    config: CorpusConfig,
    observation_shape: tuple[int, ...],
    n_categories: int,
    per_category: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Unrelated labelled data for pre-training: Gaussian clusters or textured shapes."""
    rng = np.random.default_rng(derive_seed(seed, "proxy"))
    labels = np.repeat(np.arange(n_categories), per_category)
    if len(observation_shape) == 1:
        centers = rng.standard_normal((n_categories, observation_shape[0]))
        centers *= config.separation / np.linalg.norm(centers, axis=1, keepdims=True)
        x = centers[labels] + config.noise * rng.standard_normal((labels.size, observation_shape[0]))
    else:
        channels, size, _ = observation_shape
        yy, xx = np.mgrid[0:size, 0:size] / size
        x = np.empty((labels.size,) + tuple(observation_shape))
        for i, category in enumerate(labels):
            angle = np.pi * category / n_categories
            ring = np.hypot(xx - 0.5, yy - 0.5) < 0.15 + 0.2 * (category % 2)
            texture = np.sin(2 * np.pi * 3 * (np.cos(angle) * xx + np.sin(angle) * yy)) + ring
            x[i] = np.broadcast_to(texture, (channels, size, size)) + 0.5 * rng.standard_normal((channels, size, size))
    order = rng.permutation(labels.size)
    return x[order], labels[order]


def bayes_phase_posterior(model: ObservationModel, observations: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Log posterior over phases from the anchor subspace, where tool offsets contribute nothing."""
    if model.mode != "features":
        raise ValueError("Bayes posterior is defined for feature mode only")
    norms = np.linalg.norm(model.anchors, axis=1, keepdims=True)
    basis = model.anchors / norms  # orthonormal rows
    projected = observations @ basis.T  # (T, P)
    centers = np.diag(norms[:, 0])  # anchor p projects to norm_p * e_p
    sq = ((projected[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore"):
        log_joint = np.log(prior)[None, :] - 0.5 * sq / model.noise ** 2
    return log_joint - logsumexp(log_joint, axis=1, keepdims=True)
