"""Built-in phase vocabularies, phase grammars and tool usage profiles."""

from dataclasses import dataclass

import numpy as np

from ..utils import N_TOOLS, TOOLS


@dataclass(frozen=True)
class PhaseVocabulary:
    name: str
    phase_ids: tuple[str, ...]
    display_names: tuple[str, ...]
    duration_means: tuple[float, ...]  # seconds
    duration_stds: tuple[float, ...]
    # phase index -> ((successor, probability), ...); no entry means terminal
    grammar: dict[int, tuple[tuple[int, float], ...]]
    usage: tuple[tuple[float, ...], ...]  # (P, 7) presence probability per phase and tool

    def __post_init__(self):
        n = len(self.phase_ids)
        if n < 2:
            raise ValueError(f"Vocabulary '{self.name}' needs at least 2 phases")
        if not (len(self.display_names) == len(self.duration_means) == len(self.duration_stds) == n):
            raise ValueError(f"Vocabulary '{self.name}' has inconsistent phase tables")
        if min(self.duration_means) <= 0 or min(self.duration_stds) <= 0:
            raise ValueError(f"Vocabulary '{self.name}' needs positive duration moments")
        usage = np.asarray(self.usage)
        if usage.shape != (n, N_TOOLS) or usage.min() < 0 or usage.max() > 1:
            raise ValueError(f"Vocabulary '{self.name}' usage profile must be ({n}, {N_TOOLS}) probabilities")
        for phase, successors in self.grammar.items():
            total = sum(prob for _, prob in successors)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"Grammar row of {self.phase_ids[phase]} sums to {total}")

    @property
    def n_phases(self) -> int:
        return len(self.phase_ids)

    def index(self, phase_id: str) -> int:
        return self.phase_ids.index(phase_id)

    def usage_matrix(self) -> np.ndarray:
        return np.asarray(self.usage, dtype=np.float64)

    def allowed_transitions(self) -> set[tuple[int, int]]:
        return {(p, q) for p, successors in self.grammar.items() for q, _ in successors}


def _profile(rows: dict[str, dict[str, float]], phase_ids: tuple[str, ...]) -> tuple[tuple[float, ...], ...]:
    background = 0.01
    return tuple(
        tuple(rows.get(phase, {}).get(tool, background) for tool in TOOLS)
        for phase in phase_ids
    )


# Hook dominates the two dissection phases; clipper/scissors mark clipping,
# specimen bag marks packaging and retraction, bipolar/irrigator mark cleaning.
_CHOLEC80_USAGE = {
    "P1": {"grasper": 0.6, "hook": 0.25},
    "P2": {"grasper": 0.9, "hook": 0.95, "bipolar": 0.05, "irrigator": 0.03},
    "P3": {"grasper": 0.9, "clipper": 0.6, "scissors": 0.4, "hook": 0.1},
    "P4": {"grasper": 0.9, "hook": 0.85, "bipolar": 0.1, "irrigator": 0.05},
    "P5": {"grasper": 0.8, "specimen_bag": 0.7},
    "P6": {"grasper": 0.5, "bipolar": 0.5, "irrigator": 0.6},
    "P7": {"grasper": 0.6, "specimen_bag": 0.8},
}

CHOLEC80_IDS = ("P1", "P2", "P3", "P4", "P5", "P6", "P7")

CHOLEC80 = PhaseVocabulary(
    name="cholec80",
    phase_ids=CHOLEC80_IDS,
    display_names=(
        "Preparation",
        "Calot triangle dissection",
        "Clipping and cutting",
        "Gallbladder dissection",
        "Gallbladder packaging",
        "Cleaning and coagulation",
        "Gallbladder retraction",
    ),
    duration_means=(125, 954, 168, 857, 98, 178, 83),
    duration_stds=(95, 538, 152, 551, 53, 166, 56),
    grammar={
        0: ((1, 1.0),),
        1: ((2, 1.0),),
        2: ((3, 1.0),),
        3: ((4, 0.6), (5, 0.4)),
        4: ((5, 0.3), (6, 0.7)),
        5: ((4, 0.5), (6, 0.5)),
    },
    usage=_profile(_CHOLEC80_USAGE, CHOLEC80_IDS),
)

_ENDOVIS_USAGE = {
    "P0": {"grasper": 0.2},
    "P12": {"grasper": 0.9, "hook": 0.9, "bipolar": 0.05},
    "P3": {"grasper": 0.9, "clipper": 0.6, "scissors": 0.4, "hook": 0.2},
    "P4": {"grasper": 0.9, "hook": 0.85, "bipolar": 0.1},
    "P5": {"grasper": 0.8, "specimen_bag": 0.8},
    "P6": {"grasper": 0.5, "bipolar": 0.6, "irrigator": 0.6},
    "P7": {"grasper": 0.5, "irrigator": 0.3},
}

ENDOVIS_IDS = ("P0", "P12", "P3", "P4", "P5", "P6", "P7")

ENDOVIS = PhaseVocabulary(
    name="endovis",
    phase_ids=ENDOVIS_IDS,
    display_names=(
        "Placement trocars",
        "Preparation",
        "Clipping and cutting",
        "Gallbladder dissection",
        "Retrieving gallbladder",
        "Hemostasis",
        "Drainage and closing",
    ),
    duration_means=(180, 419, 390, 563, 391, 336, 171),
    duration_stds=(118, 215, 194, 436, 246, 62, 128),
    grammar={
        0: ((1, 1.0),),
        1: ((2, 1.0),),
        2: ((3, 1.0),),
        3: ((4, 0.7), (5, 0.3)),
        4: ((5, 0.4), (6, 0.6)),
        5: ((4, 0.5), (6, 0.5)),
    },
    usage=_profile(_ENDOVIS_USAGE, ENDOVIS_IDS),
)

VOCABULARIES = {v.name: v for v in (CHOLEC80, ENDOVIS)}


def get_vocabulary(name: str) -> PhaseVocabulary:
    if name not in VOCABULARIES:
        raise ValueError(f"Unknown vocabulary '{name}'. Available: {', '.join(VOCABULARIES)}")
    return VOCABULARIES[name]
