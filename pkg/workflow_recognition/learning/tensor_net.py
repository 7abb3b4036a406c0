"""Minimal differentiable compute core: layers, backpropagation and SGD.

Tensors are float64 numpy arrays with the batch on axis 0. Per-sample shapes
are (C, H, W) for images and (D,) for vectors. Layers form a chain by
default; a layer may name earlier layers as inputs, which is how the
concatenation of fc7 and fc_tool is expressed.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..models import SgdSchedule
from ..utils import read_container, write_container

logger = logging.getLogger(__name__)

LAYER_KINDS = ("convolution", "max-pool", "dense", "relu", "sigmoid", "softmax", "concat")
PARAMETERIZED_KINDS = ("convolution", "dense")
INPUT = "input"


class ShapeError(ValueError):
    pass


class StaleActivationsError(ValueError):
    pass


class NonFiniteGradientError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()  # empty means the previous layer
    width: Optional[int] = None  # dense output width
    channels: Optional[int] = None  # convolution output channels
    kernel: int = 3
    stride: int = 1
    lr_multiplier: float = 1.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"Unknown layer kind '{self.kind}' for layer '{self.name}'")
        if self.name == INPUT or not self.name:
            raise ValueError(f"Invalid layer name '{self.name}'")
        if self.lr_multiplier <= 0:
            raise ValueError(f"lr_multiplier of '{self.name}' must be positive")
        if self.kind == "dense" and (self.width is None or self.width < 1):
            raise ValueError(f"Dense layer '{self.name}' needs a positive width")
        if self.kind == "convolution" and (self.channels is None or self.channels < 1):
            raise ValueError(f"Convolution layer '{self.name}' needs positive channels")
        if self.kind in ("convolution", "max-pool") and (self.kernel < 1 or self.stride < 1):
            raise ValueError(f"Layer '{self.name}' needs positive kernel and stride")
        if self.kind == "concat" and len(self.inputs) < 2:
            raise ValueError(f"Concat layer '{self.name}' needs at least two inputs")

    def output_shape(self, input_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
        shape = input_shapes[0]
        if self.kind in ("convolution", "max-pool"):
            if len(shape) != 3:
                raise ShapeError(f"'{self.name}' expects (C, H, W) input, got {shape}")
            _, height, width = shape
            if height < self.kernel or width < self.kernel:
                raise ShapeError(f"'{self.name}' kernel {self.kernel} exceeds input {shape}")
            out_h = (height - self.kernel) // self.stride + 1
            out_w = (width - self.kernel) // self.stride + 1
            channels = self.channels if self.kind == "convolution" else shape[0]
            return (channels, out_h, out_w)
        if self.kind == "dense":
            return (self.width,)
        if self.kind == "softmax" and len(shape) != 1:
            raise ShapeError(f"'{self.name}' softmax expects vector input, got {shape}")
        if self.kind == "concat":
            return (sum(int(np.prod(s)) for s in input_shapes),)
        return shape

    def parameter_shapes(self, input_shapes: list[tuple[int, ...]]) -> dict[str, tuple[int, ...]]:
        if self.kind == "dense":
            fan_in = int(np.prod(input_shapes[0]))
            return {"W": (fan_in, self.width), "b": (self.width,)}
        if self.kind == "convolution":
            in_channels = input_shapes[0][0]
            return {"W": (self.channels, in_channels, self.kernel, self.kernel), "b": (self.channels,)}
        return {}


@dataclass
class Activations:
    """Outputs of one forward pass, tied to the network version that produced them."""
    values: dict[str, np.ndarray]
    caches: dict[str, tuple] = field(repr=False)
    token: object = field(repr=False)
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    @property
    def outputs(self) -> list[np.ndarray]:
        """One activation per layer, in layer order."""
        return [v for k, v in self.values.items() if k != INPUT]


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class NetworkState:
    """Ordered layers, their parameters and gradient accumulators."""

    def __init__(
        self,
        input_shape: tuple[int, ...],
        layers: list[LayerSpec],
        seed: int = 0,
        params: Optional[dict[str, dict[str, np.ndarray]]] = None,
    ):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.shapes = self._infer_shapes()
        self.params = self._initialize(seed, params or {})
        self._check_parameter_shapes()
        self.grads = {n: {k: np.zeros_like(v) for k, v in p.items()} for n, p in self.params.items()}
        self.velocity = {n: {k: np.zeros_like(v) for k, v in p.items()} for n, p in self.params.items()}
        self.version = 0
        self._token = object()

    def _input_names(self, index: int) -> tuple[str, ...]:
        layer = self.layers[index]
        if layer.inputs:
            return layer.inputs
        return (self.layers[index - 1].name,) if index > 0 else (INPUT,)

    def _infer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {INPUT: self.input_shape}
        for index, layer in enumerate(self.layers):
            if layer.name in shapes:
                raise ShapeError(f"Layer {index}: duplicate layer name '{layer.name}'")
            sources = self._input_names(index)
            missing = [s for s in sources if s not in shapes]
            if missing:
                raise ShapeError(f"Layer {index} ('{layer.name}'): unknown inputs {missing}")
            try:
                shapes[layer.name] = layer.output_shape([shapes[s] for s in sources])
            except ShapeError as e:
                raise ShapeError(f"Layer {index}: {e}")
        return shapes

    def _initialize(self, seed: int, existing: dict) -> dict[str, dict[str, np.ndarray]]:
        rng = np.random.default_rng(seed)
        params = {}
        for index, layer in enumerate(self.layers):
            if layer.kind not in PARAMETERIZED_KINDS:
                continue
            if layer.name in existing:
                params[layer.name] = {k: v.copy() for k, v in existing[layer.name].items()}
                continue
            shapes = layer.parameter_shapes([self.shapes[s] for s in self._input_names(index)])
            params[layer.name] = {
                "W": glorot_uniform(rng, shapes["W"]),
                "b": np.zeros(shapes["b"]),
            }
        return params

    def _check_parameter_shapes(self) -> None:
        for index, layer in enumerate(self.layers):
            if layer.kind not in PARAMETERIZED_KINDS:
                continue
            expected = layer.parameter_shapes([self.shapes[s] for s in self._input_names(index)])
            actual = self.params.get(layer.name, {})
            for key, shape in expected.items():
                if key not in actual or actual[key].shape != shape:
                    raise ShapeError(f"Layer {index} ('{layer.name}'): parameter {key} must have shape {shape}")

    @property
    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]

    def output_shape(self, name: str) -> tuple[int, ...]:
        return self.shapes[name]

    def parameter_count(self) -> int:
        return sum(v.size for p in self.params.values() for v in p.values())

    def with_layers(self, extra: list[LayerSpec], seed: int) -> "NetworkState":
        """New network with `extra` appended; existing parameters are copied, new ones drawn from `seed`."""
        return NetworkState(self.input_shape, self.layers + list(extra), seed=seed, params=self.params)

    def without_layers(self, names: set[str]) -> "NetworkState":
        kept = [layer for layer in self.layers if layer.name not in names]
        params = {n: p for n, p in self.params.items() if n not in names}
        return NetworkState(self.input_shape, kept, params=params)

    def copy(self) -> "NetworkState":
        return self.without_layers(set())

    def forward(self, x: np.ndarray) -> Activations:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"Layer 0: input shape {tuple(x.shape[1:])} does not match declared {self.input_shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("Network input contains non-finite values")

        values = {INPUT: x}
        caches = {}
        for index, layer in enumerate(self.layers):
            inputs = [values[s] for s in self._input_names(index)]
            out, cache = _forward_layer(layer, inputs, self.params.get(layer.name))
            values[layer.name] = out
            caches[layer.name] = cache
        return Activations(values=values, caches=caches, token=self._token, version=self.version)

    def backward(
        self,
        activations: Activations,
        loss_grads: Mapping[str, np.ndarray] | np.ndarray,
    ) -> dict[str, dict[str, np.ndarray]]:
        """Accumulate parameter gradients from dLoss/dOutput of one or more layers."""
        if activations.token is not self._token or activations.version != self.version:
            raise StaleActivationsError("Activations were not produced by the current state of this network")

        if isinstance(loss_grads, np.ndarray):
            loss_grads = {self.layers[-1].name: loss_grads}

        upstream: dict[str, np.ndarray] = {}
        for name, grad in loss_grads.items():
            if name not in activations.values:
                raise ShapeError(f"Loss gradient given for unknown layer '{name}'")
            if grad.shape != activations[name].shape:
                raise ShapeError(f"Loss gradient for '{name}' has shape {grad.shape}, expected {activations[name].shape}")
            upstream[name] = np.asarray(grad, dtype=np.float64).copy()

        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            grad = upstream.pop(layer.name, None)
            if grad is None:
                continue
            sources = self._input_names(index)
            inputs = [activations[s] for s in sources]
            input_grads, param_grads = _backward_layer(
                layer, grad, inputs, activations[layer.name], activations.caches[layer.name],
                self.params.get(layer.name),
            )
            for key, value in param_grads.items():
                self.grads[layer.name][key] += value
            for source, input_grad in zip(sources, input_grads):
                if source in upstream:
                    upstream[source] = upstream[source] + input_grad
                else:
                    upstream[source] = input_grad

        return self.grads

    def zero_grads(self) -> None:
        for layer_grads in self.grads.values():
            for value in layer_grads.values():
                value.fill(0.0)

    def sgd_step(self, schedule: SgdSchedule, iteration: int) -> None:
        rate = schedule.effective_rate(iteration)
        multipliers = {layer.name: layer.lr_multiplier for layer in self.layers}

        for name, layer_grads in self.grads.items():
            for key, value in layer_grads.items():
                if not np.all(np.isfinite(value)):
                    raise NonFiniteGradientError(
                        f"Non-finite gradient for {name}.{key} at iteration {iteration}"
                    )

        for name, layer_params in self.params.items():
            step = rate * multipliers[name]
            for key, value in layer_params.items():
                velocity = self.velocity[name][key]
                velocity *= schedule.momentum
                velocity -= step * self.grads[name][key]
                value += velocity

        self.zero_grads()
        self.version += 1


def _forward_layer(layer: LayerSpec, inputs: list[np.ndarray], params: Optional[dict]) -> tuple[np.ndarray, tuple]:
    x = inputs[0]
    if layer.kind == "dense":
        flat = x.reshape(x.shape[0], -1)
        return flat @ params["W"] + params["b"], ()
    if layer.kind == "convolution":
        windows = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
        windows = windows[:, :, ::layer.stride, ::layer.stride]
        out = np.einsum("nchwij,ocij->nohw", windows, params["W"], optimize=True)
        return out + params["b"][None, :, None, None], (windows,)
    if layer.kind == "max-pool":
        windows = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
        windows = windows[:, :, ::layer.stride, ::layer.stride]
        flat = windows.reshape(*windows.shape[:4], -1)
        winner = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]
        return out, (winner,)
    if layer.kind == "relu":
        return np.maximum(x, 0.0), ()
    if layer.kind == "sigmoid":
        return expit(x), ()
    if layer.kind == "softmax":
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True), ()
    # concat
    return np.concatenate([a.reshape(a.shape[0], -1) for a in inputs], axis=1), ()


def _backward_layer(
    layer: LayerSpec,
    grad: np.ndarray,
    inputs: list[np.ndarray],
    output: np.ndarray,
    cache: tuple,
    params: Optional[dict],
) -> tuple[list[np.ndarray], dict[str, np.ndarray]]:
    x = inputs[0]
    if layer.kind == "dense":
        flat = x.reshape(x.shape[0], -1)
        dx = (grad @ params["W"].T).reshape(x.shape)
        return [dx], {"W": flat.T @ grad, "b": grad.sum(axis=0)}
    if layer.kind == "convolution":
        (windows,) = cache
        weights = params["W"]
        k, s = layer.kernel, layer.stride
        out_h, out_w = grad.shape[2], grad.shape[3]
        dW = np.einsum("nohw,nchwij->ocij", grad, windows, optimize=True)
        dx = np.zeros_like(x)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += np.einsum(
                    "nohw,oc->nchw", grad, weights[:, :, i, j], optimize=True
                )
        return [dx], {"W": dW, "b": grad.sum(axis=(0, 2, 3))}
    if layer.kind == "max-pool":
        (winner,) = cache
        k, s = layer.kernel, layer.stride
        out_h, out_w = grad.shape[2], grad.shape[3]
        dx = np.zeros_like(x)
        for position in range(k * k):
            i, j = divmod(position, k)
            dx[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += np.where(winner == position, grad, 0.0)
        return [dx], {}
    if layer.kind == "relu":
        return [grad * (x > 0)], {}
    if layer.kind == "sigmoid":
        return [grad * output * (1.0 - output)], {}
    if layer.kind == "softmax":
        return [output * (grad - np.sum(grad * output, axis=1, keepdims=True))], {}
    # concat
    pieces = []
    offset = 0
    for a in inputs:
        width = int(np.prod(a.shape[1:]))
        pieces.append(grad[:, offset:offset + width].reshape(a.shape))
        offset += width
    return pieces, {}


def save_network(net: NetworkState, path: str, header: Optional[dict] = None) -> None:
    arrays = {}
    for name, layer_params in net.params.items():
        for key, value in layer_params.items():
            arrays[f"{name}.{key}"] = value
    document_header = {
        "input_shape": list(net.input_shape),
        "layers": [asdict(layer) for layer in net.layers],
        "shapes": {name: list(shape) for name, shape in net.shapes.items()},
        **(header or {}),
    }
    write_container(path, "network", document_header, arrays)


def load_network(path: str) -> tuple[NetworkState, dict]:
    header, arrays = read_container(path, "network")
    layers = []
    for entry in header["layers"]:
        entry = dict(entry)
        entry["inputs"] = tuple(entry.get("inputs", ()))
        layers.append(LayerSpec(**entry))
    params: dict[str, dict[str, np.ndarray]] = {}
    for key, value in arrays.items():
        name, part = key.rsplit(".", 1)
        params.setdefault(name, {})[part] = value
    missing = [l.name for l in layers if l.kind in PARAMETERIZED_KINDS and l.name not in params]
    if missing:
        raise ShapeError(f"Network container {path} has no parameters for layers: {missing}")
    net = NetworkState(tuple(header["input_shape"]), layers, params=params)
    return net, header
