"""Tests for the differentiable compute core."""

import json

import numpy as np
import pytest

from workflow_recognition.learning.tensor_net import (
    LayerSpec,
    NetworkState,
    NonFiniteGradientError,
    ShapeError,
    StaleActivationsError,
    load_network,
    save_network,
)
from workflow_recognition.models import SgdSchedule
from workflow_recognition.utils import ContainerError


def _mixed_net(seed: int = 0) -> NetworkState:
    """Every layer kind, including a concat of two branches."""
    layers = [
        LayerSpec("conv1", "convolution", channels=2, kernel=3),
        LayerSpec("sig1", "sigmoid"),
        LayerSpec("pool1", "max-pool", kernel=2, stride=2),
        LayerSpec("fc1", "dense", width=6),
        LayerSpec("relu1", "relu"),
        LayerSpec("side", "dense", inputs=("pool1",), width=3),
        LayerSpec("cat", "concat", inputs=("relu1", "side")),
        LayerSpec("out", "dense", width=4),
        LayerSpec("prob", "softmax"),
    ]
    return NetworkState((1, 6, 6), layers, seed=seed)


class TestLayerSpec:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="Unknown layer kind"):
            LayerSpec("x", "lstm")

    def test_dense_needs_width(self):
        with pytest.raises(ValueError, match="positive width"):
            LayerSpec("fc", "dense")

    def test_lr_multiplier_must_be_positive(self):
        with pytest.raises(ValueError, match="lr_multiplier"):
            LayerSpec("fc", "dense", width=3, lr_multiplier=0.0)

    def test_concat_needs_two_inputs(self):
        with pytest.raises(ValueError, match="at least two inputs"):
            LayerSpec("cat", "concat", inputs=("a",))


class TestForward:
    def test_softmax_of_zero_logits_is_uniform(self):
        net = NetworkState((7,), [LayerSpec("prob", "softmax")])
        out = net.forward(np.zeros((1, 7)))["prob"]
        np.testing.assert_allclose(out, np.full((1, 7), 1 / 7), atol=1e-15)

    def test_sigmoid_of_zero(self):
        net = NetworkState((1,), [LayerSpec("sig", "sigmoid")])
        assert net.forward(np.zeros((1, 1)))["sig"][0, 0] == 0.5

    def test_identity_dense_layer(self):
        net = NetworkState(
            (4,), [LayerSpec("fc", "dense", width=4)],
            params={"fc": {"W": np.eye(4), "b": np.zeros(4)}},
        )
        x = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(net.forward(x)["fc"], x)

    def test_softmax_rows_sum_to_one(self):
        net = NetworkState((5,), [LayerSpec("prob", "softmax")])
        logits = np.random.default_rng(1).standard_normal((50, 5)) * 30
        out = net.forward(logits)["prob"]
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-9)
        assert np.all((out >= 0) & (out <= 1))

    def test_relu_outputs_non_negative(self):
        net = _mixed_net()
        acts = net.forward(np.random.default_rng(2).standard_normal((4, 1, 6, 6)))
        assert np.all(acts["relu1"] >= 0)

    def test_one_activation_per_layer(self):
        net = _mixed_net()
        acts = net.forward(np.zeros((2, 1, 6, 6)))
        assert len(acts.outputs) == len(net.layers)

    def test_input_shape_mismatch_names_layer(self):
        net = _mixed_net()
        with pytest.raises(ShapeError, match="Layer 0"):
            net.forward(np.zeros((2, 1, 5, 6)))

    def test_kernel_larger_than_input_names_layer(self):
        layers = [
            LayerSpec("conv1", "convolution", channels=2, kernel=3),
            LayerSpec("conv2", "convolution", channels=2, kernel=3),
        ]
        with pytest.raises(ShapeError, match="Layer 1"):
            NetworkState((1, 4, 4), layers)

    def test_random_specs_chain_declared_shapes(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            size = int(rng.integers(6, 10))
            layers = [LayerSpec("conv", "convolution", channels=int(rng.integers(1, 4)), kernel=int(rng.integers(1, 4)))]
            layers.append(LayerSpec("pool", "max-pool", kernel=2, stride=int(rng.integers(1, 3))))
            for i in range(int(rng.integers(1, 4))):
                layers.append(LayerSpec(f"fc{i}", "dense", width=int(rng.integers(1, 8))))
                layers.append(LayerSpec(f"act{i}", str(rng.choice(["relu", "sigmoid"]))))
            layers.append(LayerSpec("prob", "softmax"))
            net = NetworkState((2, size, size), layers, seed=int(rng.integers(1000)))
            acts = net.forward(rng.standard_normal((3, 2, size, size)))
            for layer in layers:
                assert acts[layer.name].shape[1:] == net.output_shape(layer.name)


class TestBackward:
    def test_zero_loss_gradient_gives_zero_parameter_gradients(self):
        net = _mixed_net()
        acts = net.forward(np.random.default_rng(0).standard_normal((3, 1, 6, 6)))
        grads = net.backward(acts, np.zeros((3, 4)))
        for layer_grads in grads.values():
            for value in layer_grads.values():
                assert np.all(value == 0.0)

    def test_single_dense_squared_error(self):
        rng = np.random.default_rng(4)
        net = NetworkState((3,), [LayerSpec("fc", "dense", width=2)], seed=1)
        x = rng.standard_normal((1, 3))
        y = rng.standard_normal((1, 2))
        acts = net.forward(x)
        residual = acts["fc"] - y  # d(0.5 |out - y|^2) / d out
        grads = net.backward(acts, residual)
        np.testing.assert_allclose(grads["fc"]["W"], np.outer(x[0], residual[0]), rtol=1e-12)
        np.testing.assert_allclose(grads["fc"]["b"], residual[0], rtol=1e-12)

    def test_finite_difference_check(self, gradient_check):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 1, 6, 6))
        weights = rng.standard_normal((3, 4))

        def objective(net):
            acts = net.forward(x)
            return float(np.sum(weights * acts["prob"])), acts, weights

        net = _mixed_net(seed=2)
        assert net.parameter_count() <= 5000
        assert gradient_check(net, objective, coordinates=100) < 1e-4

    def test_gradients_flow_into_every_branch_of_a_concat(self):
        net = _mixed_net()
        acts = net.forward(np.random.default_rng(6).standard_normal((2, 1, 6, 6)))
        grads = net.backward(acts, np.random.default_rng(7).standard_normal((2, 4)))
        assert np.any(grads["side"]["W"] != 0)
        assert np.any(grads["fc1"]["W"] != 0)

    def test_stale_activations_rejected(self):
        net = _mixed_net()
        acts = net.forward(np.zeros((2, 1, 6, 6)))
        net.backward(acts, np.ones((2, 4)))
        net.sgd_step(SgdSchedule(), 0)
        with pytest.raises(StaleActivationsError):
            net.backward(acts, np.ones((2, 4)))

    def test_activations_from_another_network_rejected(self):
        first, second = _mixed_net(), _mixed_net()
        acts = first.forward(np.zeros((2, 1, 6, 6)))
        with pytest.raises(StaleActivationsError):
            second.backward(acts, np.ones((2, 4)))

    def test_loss_gradient_shape_checked(self):
        net = _mixed_net()
        acts = net.forward(np.zeros((2, 1, 6, 6)))
        with pytest.raises(ShapeError, match="expected"):
            net.backward(acts, np.ones((2, 5)))


class TestSgdStep:
    def test_effective_rate_decays_per_period(self):
        schedule = SgdSchedule(base_rate=1e-3, decay_factor=0.1, decay_period=20000, total_iterations=50000)
        assert schedule.effective_rate(25000) == pytest.approx(1e-4, rel=1e-12)
        assert schedule.effective_rate(0) == 1e-3

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError, match="decay_factor"):
            SgdSchedule(decay_factor=1.0)
        with pytest.raises(ValueError, match="base_rate"):
            SgdSchedule(base_rate=0.0)

    def test_head_multiplier_scales_the_step(self):
        layers = [
            LayerSpec("body", "dense", width=2),
            LayerSpec("head", "dense", width=2, lr_multiplier=10.0),
        ]
        net = NetworkState((2,), layers, seed=0)
        before = {n: {k: v.copy() for k, v in p.items()} for n, p in net.params.items()}
        for name in net.grads:
            net.grads[name]["W"][:] = 1.0
        net.sgd_step(SgdSchedule(base_rate=1e-3), iteration=0)
        np.testing.assert_allclose(before["head"]["W"] - net.params["head"]["W"], 1e-2, rtol=1e-9)
        np.testing.assert_allclose(before["body"]["W"] - net.params["body"]["W"], 1e-3, rtol=1e-9)

    def test_zero_gradients_leave_parameters_unchanged(self):
        net = _mixed_net()
        before = {n: {k: v.copy() for k, v in p.items()} for n, p in net.params.items()}
        net.sgd_step(SgdSchedule(), iteration=0)
        for name, params in net.params.items():
            for key, value in params.items():
                np.testing.assert_array_equal(value, before[name][key])

    def test_gradients_cleared_after_step(self):
        net = _mixed_net()
        acts = net.forward(np.ones((2, 1, 6, 6)))
        net.backward(acts, np.ones((2, 4)))
        net.sgd_step(SgdSchedule(), iteration=0)
        assert all(np.all(v == 0) for g in net.grads.values() for v in g.values())

    def test_non_finite_gradient_aborts(self):
        net = _mixed_net()
        net.grads["fc1"]["W"][0, 0] = np.nan
        with pytest.raises(NonFiniteGradientError, match="fc1.W at iteration 12"):
            net.sgd_step(SgdSchedule(), iteration=12)

    def test_same_seed_same_parameters(self):
        def train(seed):
            net = _mixed_net(seed=seed)
            rng = np.random.default_rng(seed)
            schedule = SgdSchedule(base_rate=0.05, momentum=0.9)
            for iteration in range(20):
                acts = net.forward(rng.standard_normal((4, 1, 6, 6)))
                net.backward(acts, acts["prob"] - 0.25)
                net.sgd_step(schedule, iteration)
            return net

        first, second = train(3), train(3)
        for name, params in first.params.items():
            for key, value in params.items():
                np.testing.assert_array_equal(value, second.params[name][key])


class TestPersistence:
    def test_save_and_load(self, tmp_path):
        net = _mixed_net(seed=9)
        path = tmp_path / "net.json"
        save_network(net, str(path), {"note": "kept"})

        loaded, header = load_network(str(path))
        assert header["note"] == "kept"
        x = np.random.default_rng(0).standard_normal((2, 1, 6, 6))
        np.testing.assert_array_equal(loaded.forward(x)["prob"], net.forward(x)["prob"])

    def test_checksum_mismatch_rejected(self, tmp_path):
        path = tmp_path / "net.json"
        save_network(_mixed_net(), str(path))
        document = json.loads(path.read_text())
        document["header"]["input_shape"] = [1, 7, 7]
        path.write_text(json.dumps(document))
        with pytest.raises(ContainerError, match="Checksum mismatch"):
            load_network(str(path))

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "net.json"
        save_network(_mixed_net(), str(path))
        document = json.loads(path.read_text())
        document["version"] = "0.1"
        path.write_text(json.dumps(document))
        with pytest.raises(ContainerError, match="version mismatch"):
            load_network(str(path))
