"""Two-level hierarchical HMM over surgical phases.

Top-level states are phases; each phase owns a left-to-right chain of
bottom-level sub-states with GMM emissions. Decoding works on the
equivalent flat HMM whose states are (phase, sub-state) pairs. Entering a
phase always lands on its first sub-state; leaving it happens from its last
sub-state with mass split per the phase transition counts.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np
from scipy.special import logsumexp

from ..models import DecodeResult, HhmmConfig
from ..utils import atomic_write_text, derive_seed, read_container, write_container
from .gmm import Gmm, fit_gmm, gmm_from_arrays, gmm_to_arrays

logger = logging.getLogger(__name__)


class TopologyError(ValueError):
    pass


class DecodingError(ValueError):
    pass


@dataclass
class PhaseTopology:
    counts: np.ndarray  # (P, P) observed bigram counts, self-loops included
    transitions: np.ndarray  # (P, P) row-stochastic
    initial: np.ndarray  # (P,)

    @property
    def n_phases(self) -> int:
        return int(self.transitions.shape[0])

    def allowed(self) -> set[tuple[int, int]]:
        return {(int(p), int(q)) for p, q in zip(*np.nonzero(self.transitions))}


@dataclass
class FlatHmm:
    """Plain HMM in log space; `state_phase` maps each state to its phase."""
    log_initial: np.ndarray  # (S,)
    log_transitions: np.ndarray  # (S, S)
    state_phase: np.ndarray  # (S,) int
    n_phases: int

    @property
    def n_states(self) -> int:
        return int(self.log_initial.shape[0])


@dataclass
class Hhmm:
    topology: PhaseTopology
    substates: list[int]  # bottom-state count per phase
    intra_stay: list[np.ndarray]  # per phase, self-loop probability of each non-final sub-state
    exit_counts: np.ndarray  # (P,) frames the last sub-state stayed, used for its self-loop
    emissions: list[Gmm]  # one per flat state, phase-major
    flat: FlatHmm
    transition_epsilon: float = 1e-3
    log_density_floor: float = -700.0

    @property
    def n_phases(self) -> int:
        return self.topology.n_phases

    @property
    def dim(self) -> int:
        return self.emissions[0].dim

    def log_emissions(self, observations: np.ndarray) -> np.ndarray:
        """Floored per-state log densities, shape (T, S)."""
        obs = np.asarray(observations, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None, :]
        if obs.shape[1] != self.dim:
            raise DecodingError(f"Observation width {obs.shape[1]} does not match model dimension {self.dim}")
        dens = np.column_stack([g.log_density(obs) for g in self.emissions])
        return np.maximum(dens, self.log_density_floor)


def _runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """(phase, start, length) for each maximal constant run."""
    if labels.size == 0:
        return []
    change = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [(int(labels[s]), int(s), int(e - s)) for s, e in zip(starts, ends)]


def learn_topology(sequences: Iterable[np.ndarray], n_phases: int, epsilon: float = 1e-3) -> PhaseTopology:
    """Bigram counts, eps added to observed transitions and self-loops only."""
    sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
    if not sequences or any(s.size == 0 for s in sequences):
        raise TopologyError("Topology learning needs at least one non-empty sequence")
    for s in sequences:
        if s.min() < 0 or s.max() >= n_phases:
            raise TopologyError(f"Phase labels outside the vocabulary of {n_phases} phases")

    counts = np.zeros((n_phases, n_phases))
    starts = np.zeros(n_phases)
    for s in sequences:
        np.add.at(counts, (s[:-1], s[1:]), 1.0)
        starts[s[0]] += 1

    support = (counts > 0) | np.eye(n_phases, dtype=bool)
    smoothed = np.where(support, counts + epsilon, 0.0)
    transitions = smoothed / smoothed.sum(axis=1, keepdims=True)
    initial = np.where(starts > 0, starts + epsilon, 0.0)
    initial /= initial.sum()
    return PhaseTopology(counts=counts, transitions=transitions, initial=initial)


def bottom_state_count(durations: list[int], config: HhmmConfig) -> int:
    if config.bottom_state_policy == "single" or not durations:
        return 1
    count = math.ceil(float(np.median(durations)) / config.seconds_per_bottom_state)
    return int(min(max(count, 1), config.max_bottom_states))


def substate_assignment(length: int, n_substates: int) -> np.ndarray:
    """Uniform temporal segmentation of one phase occurrence."""
    return (np.arange(length) * n_substates) // length


def _flatten(
    topology: PhaseTopology,
    substates: list[int],
    intra_stay: list[np.ndarray],
    last_stay_counts: np.ndarray,
    epsilon: float,
) -> FlatHmm:
    offsets = np.concatenate([[0], np.cumsum(substates)]).astype(int)
    n_states = int(offsets[-1])
    trans = np.zeros((n_states, n_states))
    initial = np.zeros(n_states)
    state_phase = np.repeat(np.arange(topology.n_phases), substates)

    for p, k in enumerate(substates):
        first, last = offsets[p], offsets[p] + k - 1
        initial[first] = topology.initial[p]
        for j in range(k - 1):
            trans[first + j, first + j] = intra_stay[p][j]
            trans[first + j, first + j + 1] = 1.0 - intra_stay[p][j]

        successors = [q for q in range(topology.n_phases) if q != p and topology.transitions[p, q] > 0]
        if k == 1:
            row = topology.transitions[p]
            trans[last, last] = row[p]
            for q in successors:
                trans[last, offsets[q]] = row[q]
            continue
        # same normalizer as the phase row, with the last sub-state's own stays in place of c_pp
        stay = last_stay_counts[p] + epsilon
        leave = {q: topology.counts[p, q] + epsilon for q in successors}
        total = stay + sum(leave.values())
        trans[last, last] = stay / total
        for q, mass in leave.items():
            trans[last, offsets[q]] = mass / total

    with np.errstate(divide="ignore"):
        return FlatHmm(
            log_initial=np.log(initial),
            log_transitions=np.log(trans),
            state_phase=state_phase,
            n_phases=topology.n_phases,
        )


def train_hhmm(
    observations: list[np.ndarray],
    labels: list[np.ndarray],
    n_phases: int,
    config: Optional[HhmmConfig] = None,
    n_components: Optional[int] = None,
    seed: int = 0,
) -> Hhmm:
    """Fit topology, sub-state chains and per-sub-state GMMs from annotated sequences."""
    config = config or HhmmConfig()
    observations = [np.asarray(o, dtype=np.float64) for o in observations]
    labels = [np.asarray(l, dtype=np.int64) for l in labels]
    if len(observations) != len(labels):
        raise TopologyError("Observation and annotation sequence counts differ")
    for obs, lab in zip(observations, labels):
        if obs.ndim != 2 or obs.shape[0] != lab.shape[0]:
            raise TopologyError(f"Observations {obs.shape} are not aligned with {lab.shape[0]} annotations")

    topology = learn_topology(labels, n_phases, config.transition_epsilon)
    binary = _is_binary(observations)
    variance_floor = config.binary_variance_floor if binary else config.variance_floor
    if n_components is None:
        n_components = config.binary_components if binary else config.gmm_components

    occurrences: list[list[tuple[np.ndarray, int]]] = [[] for _ in range(n_phases)]
    for obs, lab in zip(observations, labels):
        for phase, start, length in _runs(lab):
            occurrences[phase].append((obs[start:start + length], length))

    all_obs = np.concatenate(observations)
    substates, intra_stay, last_stays, emissions = [], [], np.zeros(n_phases), []
    for p in range(n_phases):
        if not occurrences[p]:
            logger.warning(f"Phase {p} has no training frames; using one state with a corpus-wide Gaussian")
            substates.append(1)
            intra_stay.append(np.zeros(0))
            emissions.append(fit_gmm(all_obs, 1, variance_floor=variance_floor))
            continue

        k = bottom_state_count([length for _, length in occurrences[p]], config)
        stays = np.zeros(k)
        advances = np.zeros(k)
        assigned: list[list[np.ndarray]] = [[] for _ in range(k)]
        for segment, length in occurrences[p]:
            sub = substate_assignment(length, k)
            for j in range(k):
                assigned[j].append(segment[sub == j])
            steps = np.diff(sub)
            np.add.at(stays, sub[:-1][steps == 0], 1.0)
            np.add.at(advances, sub[:-1][steps > 0], 1.0)

        eps = config.transition_epsilon
        intra_stay.append((stays[:-1] + eps) / (stays[:-1] + advances[:-1] + 2 * eps))
        last_stays[p] = stays[-1]
        substates.append(k)

        phase_frames = np.concatenate([seg for seg, _ in occurrences[p]])
        for j in range(k):
            frames = np.concatenate(assigned[j])
            if frames.shape[0] < 2:
                frames = phase_frames
            emissions.append(_fit_state_gmm(frames, n_components, config, variance_floor, derive_seed(seed, p, j)))

    flat = _flatten(topology, substates, intra_stay, last_stays, config.transition_epsilon)
    logger.info(f"Trained HHMM with {flat.n_states} flat states over {n_phases} phases (substates {substates})")
    return Hhmm(
        topology=topology,
        substates=substates,
        intra_stay=intra_stay,
        exit_counts=last_stays,
        emissions=emissions,
        flat=flat,
        transition_epsilon=config.transition_epsilon,
        log_density_floor=config.log_density_floor,
    )


def _is_binary(observations: list[np.ndarray]) -> bool:
    return all(np.isin(o, (0.0, 1.0)).all() for o in observations)


def _fit_state_gmm(frames: np.ndarray, components: int, config: HhmmConfig, floor: float, seed: int) -> Gmm:
    k = min(components, frames.shape[0])
    if k < components:
        logger.warning(f"Only {frames.shape[0]} frames for a bottom state; reducing GMM components {components} -> {k}")
    return fit_gmm(
        frames, k, seed=seed,
        max_iterations=config.em_iterations,
        tolerance=config.em_tolerance,
        variance_floor=floor,
    )


def viterbi_path(flat: FlatHmm, log_emissions: np.ndarray) -> tuple[np.ndarray, float]:
    """Most likely flat-state path and its joint log-probability."""
    n_steps = log_emissions.shape[0]
    if n_steps == 0:
        raise DecodingError("Cannot decode an empty sequence")
    delta = flat.log_initial + log_emissions[0]
    if not np.isfinite(delta).any():
        raise DecodingError("No state can explain the observation at timestep 0")
    backpointers = np.zeros((n_steps, flat.n_states), dtype=np.int64)
    for t in range(1, n_steps):
        candidates = delta[:, None] + flat.log_transitions
        backpointers[t] = np.argmax(candidates, axis=0)
        delta = candidates[backpointers[t], np.arange(flat.n_states)] + log_emissions[t]
        if not np.isfinite(delta).any():
            raise DecodingError(f"No state can explain the observation at timestep {t}")

    path = np.empty(n_steps, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for t in range(n_steps - 1, 0, -1):
        path[t - 1] = backpointers[t, path[t]]
    return path, float(delta[path[-1]])


class OnlineFilter:
    """Forward recursion fed one observation at a time."""

    def __init__(self, flat: FlatHmm):
        self.flat = flat
        self.log_alpha: Optional[np.ndarray] = None
        self.log_likelihood = 0.0
        self.t = 0

    def step(self, log_emission: np.ndarray) -> np.ndarray:
        """Consume one emission row; returns the normalized log filtering distribution over phases."""
        if self.log_alpha is None:
            prior = self.flat.log_initial
        else:
            prior = logsumexp(self.log_alpha[:, None] + self.flat.log_transitions, axis=0)
        joint = prior + log_emission
        norm = logsumexp(joint)
        if not np.isfinite(norm):
            raise DecodingError(f"No state can explain the observation at timestep {self.t}")
        self.log_alpha = joint - norm
        self.log_likelihood += float(norm)
        self.t += 1
        return self.phase_distribution()

    def phase_distribution(self) -> np.ndarray:
        out = np.full(self.flat.n_phases, -np.inf)
        for p in range(self.flat.n_phases):
            mask = self.flat.state_phase == p
            if mask.any():
                out[p] = logsumexp(self.log_alpha[mask])
        return out


def iter_forward_filter(model: Hhmm, stream: Iterable[np.ndarray]) -> Iterator[np.ndarray]:
    """Yield the log phase distribution after each observation; reads the stream lazily."""
    online = OnlineFilter(model.flat)
    for observation in stream:
        yield online.step(model.log_emissions(observation)[0])


def forward_log_likelihood(flat: FlatHmm, log_emissions: np.ndarray) -> tuple[np.ndarray, float]:
    online = OnlineFilter(flat)
    filtering = np.array([online.step(row) for row in log_emissions])
    return filtering, online.log_likelihood


def viterbi(model: Hhmm, observations: np.ndarray) -> DecodeResult:
    path, log_probability = viterbi_path(model.flat, model.log_emissions(observations))
    return DecodeResult(phases=model.flat.state_phase[path], log_probability=log_probability)


def forward_filter(model: Hhmm, observations: Iterable[np.ndarray]) -> DecodeResult:
    rows = np.asarray(list(observations), dtype=np.float64)
    if rows.shape[0] == 0:
        raise DecodingError("Cannot decode an empty sequence")
    log_filtering, log_likelihood = forward_log_likelihood(model.flat, model.log_emissions(rows))
    return DecodeResult(
        phases=np.argmax(log_filtering, axis=1),
        log_filtering=log_filtering,
        log_likelihood=log_likelihood,
    )


def topology_dump(topology: PhaseTopology, phase_ids: tuple[str, ...]) -> str:
    lines = ["# phase\tsuccessor\tprobability"]
    for p, q in sorted(topology.allowed()):
        lines.append(f"{phase_ids[p]}\t{phase_ids[q]}\t{topology.transitions[p, q]:.6f}")
    return "\n".join(lines) + "\n"


def write_topology(path: str, topology: PhaseTopology, phase_ids: tuple[str, ...]) -> None:
    atomic_write_text(path, topology_dump(topology, phase_ids))


def save_hhmm(model: Hhmm, path: str, extra: Optional[dict] = None) -> None:
    arrays = {
        "topology.counts": model.topology.counts,
        "topology.transitions": model.topology.transitions,
        "topology.initial": model.topology.initial,
        "exit_counts": model.exit_counts,
    }
    for p, stay in enumerate(model.intra_stay):
        arrays[f"intra_stay.{p}"] = stay
    for s, gmm in enumerate(model.emissions):
        arrays.update(gmm_to_arrays(gmm, f"state{s}"))
    header = {
        "substates": model.substates,
        "n_states": len(model.emissions),
        "log_density_floor": model.log_density_floor,
        "transition_epsilon": model.transition_epsilon,
        **(extra or {}),
    }
    write_container(path, "hhmm", header, arrays)


def load_hhmm(path: str) -> tuple[Hhmm, dict]:
    header, arrays = read_container(path, "hhmm")
    topology = PhaseTopology(
        counts=arrays["topology.counts"],
        transitions=arrays["topology.transitions"],
        initial=arrays["topology.initial"],
    )
    substates = [int(k) for k in header["substates"]]
    intra_stay = [arrays[f"intra_stay.{p}"] for p in range(len(substates))]
    exit_counts = arrays["exit_counts"]
    epsilon = float(header["transition_epsilon"])
    model = Hhmm(
        topology=topology,
        substates=substates,
        intra_stay=intra_stay,
        exit_counts=exit_counts,
        emissions=[gmm_from_arrays(arrays, f"state{s}") for s in range(int(header["n_states"]))],
        flat=_flatten(topology, substates, intra_stay, exit_counts, epsilon),
        transition_epsilon=epsilon,
        log_density_floor=float(header["log_density_floor"]),
    )
    return model, header
