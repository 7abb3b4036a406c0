"""Multi-task tool/phase network built on tensor_net.

Layer layout (desk-scale): optional conv1/conv2/pool1 for image input, then
fc6 and fc7 (the feature of width F). The tool head fc_tool reads fc7, fc8
concatenates fc7 with the tool logits, and fc_phase reads fc8. Loss weights
with b == 0 drop the phase head (ToolNet); a == 0 drops the tool head and
reads fc_phase from fc7 (PhaseNet).
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, logsumexp

from ..models import LossWeights, NetworkConfig, SgdSchedule
from ..utils import N_TOOLS, atomic_write_text
from .tensor_net import LayerSpec, NetworkState, load_network, save_network

logger = logging.getLogger(__name__)

FEATURE_LAYER = "fc7"
TOOL_HEAD = "fc_tool"
CONCAT_LAYER = "fc8"
PHASE_HEAD = "fc_phase"
PROXY_HEAD = "fc_proxy"


class TrainingDivergedError(ArithmeticError):
    pass


class MissingAnnotationError(ValueError):
    pass


class HeadlessNetworkError(ValueError):
    pass


def _check_batch(logits: np.ndarray, targets: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError(f"{what}: expected a non-empty (N, K) batch, got shape {logits.shape}")
    if targets.shape != logits.shape:
        raise ValueError(f"{what}: targets shape {targets.shape} does not match logits {logits.shape}")
    return logits, targets


def tool_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Sigmoid cross-entropy summed over tools, averaged over images."""
    v, k = _check_batch(logits, targets, "tool_loss")
    if np.any((k != 0) & (k != 1)):
        raise ValueError("tool_loss: targets must be binary")
    # -[k log s(v) + (1 - k) log(1 - s(v))] == softplus(v) - k v
    return float(np.sum(np.logaddexp(0.0, v) - k * v) / v.shape[0])


def tool_loss_gradient(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    v, k = _check_batch(logits, targets, "tool_loss")
    return (expit(v) - k) / v.shape[0]


def _check_one_hot(targets: np.ndarray) -> None:
    if np.any((targets != 0) & (targets != 1)) or np.any(targets.sum(axis=1) != 1):
        raise ValueError("phase_loss: every target must be one-hot")


def phase_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Softmax multinomial logistic loss averaged over images."""
    w, lab = _check_batch(logits, targets, "phase_loss")
    _check_one_hot(lab)
    log_probs = w - logsumexp(w, axis=1, keepdims=True)
    return float(-np.sum(lab * log_probs) / w.shape[0])


def phase_loss_gradient(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    w, lab = _check_batch(logits, targets, "phase_loss")
    _check_one_hot(lab)
    probs = np.exp(w - logsumexp(w, axis=1, keepdims=True))
    return (probs - lab) / w.shape[0]


def total_loss(lt: float, lp: float, weights: LossWeights) -> float:
    if not (np.isfinite(lt) and np.isfinite(lp)):
        raise ValueError(f"total_loss: non-finite inputs ({lt}, {lp})")
    return weights.a * lt + weights.b * lp


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    encoded = np.zeros((labels.shape[0], n_classes))
    encoded[np.arange(labels.shape[0]), labels] = 1.0
    return encoded


def backbone_layers(config: NetworkConfig, input_shape: tuple[int, ...]) -> list[LayerSpec]:
    layers = []
    if len(input_shape) == 3:
        first, second = config.conv_channels
        layers += [
            LayerSpec("conv1", "convolution", channels=first, kernel=config.kernel),
            LayerSpec("relu1", "relu"),
            LayerSpec("conv2", "convolution", channels=second, kernel=config.kernel),
            LayerSpec("relu2", "relu"),
            LayerSpec("pool1", "max-pool", kernel=config.pool, stride=config.pool),
        ]
    layers += [
        LayerSpec("fc6", "dense", width=config.fc6_width),
        LayerSpec("relu6", "relu"),
        LayerSpec(FEATURE_LAYER, "dense", width=config.feature_width),
        LayerSpec("relu7", "relu"),
    ]
    return layers


def head_layers(n_phases: int, weights: LossWeights, lr_multiplier: float = 10.0) -> list[LayerSpec]:
    """Heads read the rectified fc7 output (the layer preceding them in the backbone)."""
    feature = "relu7"
    if weights.b == 0:
        return [LayerSpec(TOOL_HEAD, "dense", inputs=(feature,), width=N_TOOLS, lr_multiplier=lr_multiplier)]
    if weights.a == 0:
        return [LayerSpec(PHASE_HEAD, "dense", inputs=(feature,), width=n_phases, lr_multiplier=lr_multiplier)]
    return [
        LayerSpec(TOOL_HEAD, "dense", inputs=(feature,), width=N_TOOLS, lr_multiplier=lr_multiplier),
        LayerSpec(CONCAT_LAYER, "concat", inputs=(feature, TOOL_HEAD)),
        LayerSpec(PHASE_HEAD, "dense", inputs=(CONCAT_LAYER,), width=n_phases, lr_multiplier=lr_multiplier),
    ]


@dataclass
class Standardizer:
    """Per-channel (images) or per-dimension (vectors) standardization."""
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        mean = x.mean(axis=axes)
        scale = x.std(axis=axes)
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean=mean, scale=scale)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 4:
            return (x - self.mean[None, :, None, None]) / self.scale[None, :, None, None]
        return (x - self.mean) / self.scale


@dataclass
class LossRecord:
    iteration: int
    tool_loss: float
    phase_loss: float
    total: float


@dataclass
class EndoNetModel:
    network: NetworkState
    weights: LossWeights
    n_phases: int
    standardizer: Standardizer

    @property
    def feature_width(self) -> int:
        return self.network.output_shape(FEATURE_LAYER)[0]

    @property
    def head_layout(self) -> list[str]:
        return [n for n in (TOOL_HEAD, CONCAT_LAYER, PHASE_HEAD) if n in self.network.shapes]


@dataclass
class Extraction:
    fc7: np.ndarray
    fc8: Optional[np.ndarray]
    tool_logits: Optional[np.ndarray]
    phase_logits: Optional[np.ndarray]

    @property
    def tool_probabilities(self) -> Optional[np.ndarray]:
        return None if self.tool_logits is None else expit(self.tool_logits)


@dataclass
class PretrainResult:
    network: NetworkState  # backbone only, proxy head discarded
    losses: list[float]
    standardizer: Standardizer
    proxy_network: Optional[NetworkState] = None  # backbone plus proxy head

    def proxy_accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Fraction of proxy samples the trained proxy head classifies correctly."""
        acts = self.proxy_network.forward(self.standardizer.apply(np.asarray(x, dtype=np.float64)))
        return float(np.mean(np.argmax(acts[PROXY_HEAD], axis=1) == np.asarray(labels)))


def _batches(rng: np.random.Generator, n_samples: int, batch_size: int):
    """Endless stream of index batches drawn epoch by epoch without replacement."""
    batch_size = min(batch_size, n_samples)
    while True:
        order = rng.permutation(n_samples)
        for start in range(0, n_samples - batch_size + 1, batch_size):
            yield order[start:start + batch_size]


def pretrain(
    proxy_x: np.ndarray,
    proxy_labels: np.ndarray,
    config: NetworkConfig,
    schedule: SgdSchedule,
    seed: int,
    iterations: Optional[int] = None,
) -> PretrainResult:
    """Train the backbone on a proxy classification task and drop its head."""
    iterations = config.pretrain_iterations if iterations is None else iterations
    proxy_labels = np.asarray(proxy_labels, dtype=np.int64)
    n_categories = int(proxy_labels.max()) + 1
    input_shape = tuple(proxy_x.shape[1:])

    layers = backbone_layers(config, input_shape) + [
        LayerSpec(PROXY_HEAD, "dense", width=n_categories, lr_multiplier=config.head_lr_multiplier),
    ]
    net = NetworkState(input_shape, layers, seed=seed)
    standardizer = Standardizer.fit(proxy_x)
    x = standardizer.apply(proxy_x)
    targets = one_hot(proxy_labels, n_categories)

    rng = np.random.default_rng(seed + 1)
    batches = _batches(rng, x.shape[0], schedule.batch_size)
    losses = []
    for iteration in range(iterations):
        idx = next(batches)
        acts = net.forward(x[idx])
        logits = acts[PROXY_HEAD]
        loss = phase_loss(logits, targets[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"Proxy loss diverged at iteration {iteration}")
        losses.append(loss)
        net.backward(acts, {PROXY_HEAD: phase_loss_gradient(logits, targets[idx])})
        net.sgd_step(schedule, iteration)
        if iteration % 500 == 0:
            logger.debug(f"pretrain iteration {iteration}: loss {loss:.4f}")

    if losses:
        logger.info(f"Pre-trained backbone for {iterations} iterations: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return PretrainResult(
        network=net.without_layers({PROXY_HEAD}),
        losses=losses,
        standardizer=standardizer,
        proxy_network=net,
    )


def _check_annotations(x: np.ndarray, tool_targets, phase_labels, n_phases: int) -> None:
    if x.shape[0] == 0:
        raise MissingAnnotationError("Fine-tuning corpus is empty")
    if tool_targets is None or phase_labels is None:
        raise MissingAnnotationError("Every frame needs both tool and phase annotations")
    tool_targets = np.asarray(tool_targets)
    phase_labels = np.asarray(phase_labels)
    if tool_targets.shape != (x.shape[0], N_TOOLS):
        raise MissingAnnotationError(f"Tool annotations have shape {tool_targets.shape}, expected ({x.shape[0]}, {N_TOOLS})")
    if np.any((tool_targets != 0) & (tool_targets != 1)):
        raise MissingAnnotationError("Tool annotations must be binary")
    if phase_labels.shape != (x.shape[0],):
        raise MissingAnnotationError(f"Phase annotations have shape {phase_labels.shape}, expected ({x.shape[0]},)")
    if np.any(phase_labels < 0) or np.any(phase_labels >= n_phases):
        raise MissingAnnotationError("Phase annotations outside the vocabulary")


def finetune(
    init: NetworkState,
    x: np.ndarray,
    tool_targets: np.ndarray,
    phase_labels: np.ndarray,
    n_phases: int,
    weights: LossWeights,
    schedule: SgdSchedule,
    seed: int,
    head_lr_multiplier: float = 10.0,
) -> tuple[EndoNetModel, list[LossRecord]]:
    """Attach randomly initialized heads to a pre-trained backbone and train jointly."""
    _check_annotations(x, tool_targets, phase_labels, n_phases)
    standardizer = Standardizer.fit(x)
    inputs = standardizer.apply(x)
    tools = np.asarray(tool_targets, dtype=np.float64)
    phases = one_hot(phase_labels, n_phases)

    net = init.with_layers(head_layers(n_phases, weights, head_lr_multiplier), seed=seed)
    has_tool, has_phase = TOOL_HEAD in net.shapes, PHASE_HEAD in net.shapes

    rng = np.random.default_rng(seed + 1)
    batches = _batches(rng, inputs.shape[0], schedule.batch_size)
    records = []
    for iteration in range(schedule.total_iterations):
        idx = next(batches)
        acts = net.forward(inputs[idx])
        lt = tool_loss(acts[TOOL_HEAD], tools[idx]) if has_tool else 0.0
        lp = phase_loss(acts[PHASE_HEAD], phases[idx]) if has_phase else 0.0
        if not (np.isfinite(lt) and np.isfinite(lp)):
            raise TrainingDivergedError(f"Fine-tuning loss diverged at iteration {iteration}")
        loss = total_loss(lt, lp, weights)
        records.append(LossRecord(iteration, lt, lp, loss))

        grads = {}
        if has_tool:
            grads[TOOL_HEAD] = weights.a * tool_loss_gradient(acts[TOOL_HEAD], tools[idx])
        if has_phase:
            grads[PHASE_HEAD] = weights.b * phase_loss_gradient(acts[PHASE_HEAD], phases[idx])
        net.backward(acts, grads)
        net.sgd_step(schedule, iteration)
        if iteration % 500 == 0:
            logger.debug(f"finetune iteration {iteration}: L_T {lt:.4f} L_P {lp:.4f} L {loss:.4f}")

    logger.info(
        f"Fine-tuned {weights.label} for {schedule.total_iterations} iterations: "
        f"loss {records[0].total:.4f} -> {records[-1].total:.4f}"
    )
    model = EndoNetModel(network=net, weights=weights, n_phases=n_phases, standardizer=standardizer)
    return model, records


def extract(model: EndoNetModel, x: np.ndarray, batch_size: int = 512) -> Extraction:
    """fc7, fc8 and head outputs for a batch of frames."""
    net = model.network
    if TOOL_HEAD not in net.shapes and PHASE_HEAD not in net.shapes:
        raise HeadlessNetworkError("Network has no fc_tool/fc_phase head; fine-tune it first")

    outputs: dict[str, list[np.ndarray]] = {FEATURE_LAYER: [], TOOL_HEAD: [], CONCAT_LAYER: [], PHASE_HEAD: []}
    inputs = model.standardizer.apply(np.asarray(x, dtype=np.float64))
    for start in range(0, inputs.shape[0], batch_size):
        acts = net.forward(inputs[start:start + batch_size])
        outputs[FEATURE_LAYER].append(acts["relu7"])
        for name in (TOOL_HEAD, CONCAT_LAYER, PHASE_HEAD):
            if name in net.shapes:
                outputs[name].append(acts[name])

    def stacked(name: str) -> Optional[np.ndarray]:
        return np.concatenate(outputs[name]) if outputs[name] else None

    return Extraction(
        fc7=stacked(FEATURE_LAYER),
        fc8=stacked(CONCAT_LAYER),
        tool_logits=stacked(TOOL_HEAD),
        phase_logits=stacked(PHASE_HEAD),
    )


def windowed_means(values: list[float], window: int = 100) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    n_windows = len(values) // window
    if n_windows == 0:
        return np.array([])
    return np.asarray(values[:n_windows * window]).reshape(n_windows, window).mean(axis=1)


def save_endonet(model: EndoNetModel, path: str, extra: Optional[dict] = None) -> None:
    net = model.network
    header = {
        "loss_weights": asdict(model.weights),
        "head_layout": model.head_layout,
        "n_phases": model.n_phases,
        "standardizer_mean": model.standardizer.mean.tolist(),
        "standardizer_scale": model.standardizer.scale.tolist(),
        **(extra or {}),
    }
    save_network(net, path, header)


def load_endonet(path: str) -> tuple[EndoNetModel, dict]:
    net, header = load_network(path)
    model = EndoNetModel(
        network=net,
        weights=LossWeights(**header["loss_weights"]),
        n_phases=int(header["n_phases"]),
        standardizer=Standardizer(
            mean=np.asarray(header["standardizer_mean"], dtype=np.float64),
            scale=np.asarray(header["standardizer_scale"], dtype=np.float64),
        ),
    )
    return model, header


def write_loss_log(path: str, records: list[LossRecord]) -> None:
    lines = ["# iteration\tL_T\tL_P\tL"]
    lines += [f"{r.iteration}\t{r.tool_loss!r}\t{r.phase_loss!r}\t{r.total!r}" for r in records]
    atomic_write_text(path, "\n".join(lines) + "\n")
