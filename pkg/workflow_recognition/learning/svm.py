"""One-vs-all linear SVM producing per-phase confidence vectors."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..models import SvmConfig
from ..utils import read_container, write_container

logger = logging.getLogger(__name__)


class SvmTrainingError(ValueError):
    pass


class FeatureWidthError(ValueError):
    pass


@dataclass
class BinarySvm:
    w: np.ndarray
    b: float
    objective_history: list[float]


@dataclass
class OvrSvmModel:
    weights: np.ndarray  # (P, D)
    biases: np.ndarray  # (P,)
    C: float
    mean: np.ndarray  # (D,) training statistics, zeros when standardization is off
    scale: np.ndarray  # (D,)
    constant_negative: list[int] = field(default_factory=list)
    objective_history: Optional[np.ndarray] = None  # (epochs, P) best objective so far

    @property
    def feature_width(self) -> int:
        return int(self.weights.shape[1])

    @property
    def n_phases(self) -> int:
        return int(self.weights.shape[0])


def hinge_objective(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    """(lam/2)|w|^2 + mean hinge, per column of y/w."""
    margins = y * (x @ w + b)
    return 0.5 * lam * np.sum(w * w, axis=0) + np.maximum(0.0, 1.0 - margins).mean(axis=0)


def _subgradient_descent(x: np.ndarray, y: np.ndarray, C: float, epochs: int):
    """Full-batch subgradient descent on every column of y at once, best iterate kept."""
    lam = 1.0 / C
    m, d = x.shape
    w = np.zeros((d, y.shape[1]))
    b = np.zeros(y.shape[1])
    best_w, best_b = w.copy(), b.copy()
    best = hinge_objective(x, y, w, b, lam)
    history = np.empty((epochs, y.shape[1]))

    for k in range(1, epochs + 1):
        margins = y * (x @ w + b)
        active = (margins < 1.0) * y
        grad_w = lam * w - x.T @ active / m
        grad_b = -active.mean(axis=0)
        step = 1.0 / (lam * k)
        w = w - step * grad_w
        b = b - step * grad_b

        objective = hinge_objective(x, y, w, b, lam)
        improved = objective < best
        best = np.where(improved, objective, best)
        best_w[:, improved] = w[:, improved]
        best_b[improved] = b[improved]
        history[k - 1] = best

    return best_w, best_b, history


def train_binary(x: np.ndarray, y: np.ndarray, C: float = 1.0, epochs: int = 1000) -> BinarySvm:
    """Single L2-regularized hinge classifier; y in {-1, +1}."""
    x = np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    y = np.asarray(y, dtype=np.float64)
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise SvmTrainingError("Binary labels must be -1 or +1")
    w, b, history = _subgradient_descent(x, y[:, None], C, epochs)
    return BinarySvm(w=w[:, 0], b=float(b[0]), objective_history=history[:, 0].tolist())


def train_ovr(
    features: np.ndarray,
    labels: np.ndarray,
    n_phases: int,
    config: Optional[SvmConfig] = None,
) -> OvrSvmModel:
    config = config or SvmConfig()
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise SvmTrainingError(f"Features {x.shape} and labels {labels.shape} are not aligned")
    if x.shape[0] < 2:
        raise SvmTrainingError("SVM training needs at least 2 samples")
    if not np.all(np.isfinite(x)):
        raise SvmTrainingError("SVM features contain non-finite values")
    present = np.unique(labels)
    if present.size < 2:
        raise SvmTrainingError(f"Only one phase ({int(present[0])}) in the SVM training set")
    if present.min() < 0 or present.max() >= n_phases:
        raise SvmTrainingError("SVM labels outside the phase vocabulary")

    if config.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    else:
        mean = np.zeros(x.shape[1])
        scale = np.ones(x.shape[1])
    z = (x - mean) / scale

    y = np.where(labels[:, None] == np.arange(n_phases)[None, :], 1.0, -1.0)
    w, b, history = _subgradient_descent(z, y, config.C, config.epochs)

    absent = [p for p in range(n_phases) if p not in set(present.tolist())]
    for p in absent:
        logger.warning(f"Phase {p} has no training frames; using a constant-negative classifier")
        w[:, p] = 0.0
        b[p] = -1.0

    logger.debug(f"Trained {n_phases} one-vs-all SVMs on {x.shape[0]}x{x.shape[1]} features")
    return OvrSvmModel(
        weights=w.T.copy(),
        biases=b,
        C=config.C,
        mean=mean,
        scale=scale,
        constant_negative=absent,
        objective_history=history,
    )


def score(model: OvrSvmModel, features: np.ndarray) -> np.ndarray:
    """Raw margins w.x + b; (D,) gives (P,) and (N, D) gives (N, P)."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != model.feature_width:
        raise FeatureWidthError(f"Feature width {x.shape[-1]} does not match trained width {model.feature_width}")
    return ((x - model.mean) / model.scale) @ model.weights.T + model.biases


def save_svm(model: OvrSvmModel, path: str, extra: Optional[dict] = None) -> None:
    header = {"C": model.C, "constant_negative": model.constant_negative, **(extra or {})}
    arrays = {"weights": model.weights, "biases": model.biases, "mean": model.mean, "scale": model.scale}
    write_container(path, "svm", header, arrays)


def load_svm(path: str) -> tuple[OvrSvmModel, dict]:
    header, arrays = read_container(path, "svm")
    model = OvrSvmModel(
        weights=arrays["weights"],
        biases=arrays["biases"],
        C=float(header["C"]),
        mean=arrays["mean"],
        scale=arrays["scale"],
        constant_negative=list(header["constant_negative"]),
    )
    return model, header
