"""Tests for topology learning, HHMM training and the two decoders."""

import itertools
import logging

import numpy as np
import pytest
from scipy.special import logsumexp

from workflow_recognition.models import HhmmConfig
from workflow_recognition.temporal.hhmm import (
    DecodingError,
    FlatHmm,
    TopologyError,
    bottom_state_count,
    forward_filter,
    forward_log_likelihood,
    iter_forward_filter,
    learn_topology,
    load_hhmm,
    save_hhmm,
    substate_assignment,
    topology_dump,
    train_hhmm,
    viterbi,
    viterbi_path,
)

PHASE_IDS = ("P1", "P2", "P3", "P4", "P5", "P6", "P7")


def log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=np.float64))


def two_state_hmm() -> tuple[FlatHmm, dict[str, np.ndarray]]:
    flat = FlatHmm(
        log_initial=log([1.0, 0.0]),
        log_transitions=log([[0.8, 0.2], [0.2, 0.8]]),
        state_phase=np.array([0, 1]),
        n_phases=2,
    )
    symbols = {"a": log([0.9, 0.1]), "b": log([0.1, 0.9])}
    return flat, symbols


def random_flat_hmm(rng: np.random.Generator) -> FlatHmm:
    n_states = int(rng.integers(1, 5))
    trans = rng.uniform(size=(n_states, n_states))
    trans[rng.uniform(size=trans.shape) < 0.3] = 0.0
    trans[np.arange(n_states), np.arange(n_states)] += 0.1
    trans /= trans.sum(axis=1, keepdims=True)
    initial = rng.uniform(size=n_states)
    initial[rng.uniform(size=n_states) < 0.3] = 0.0
    initial[rng.integers(n_states)] += 0.1
    initial /= initial.sum()
    n_phases = int(rng.integers(1, n_states + 1))
    state_phase = np.concatenate([np.arange(n_phases), rng.integers(0, n_phases, size=n_states - n_phases)])
    return FlatHmm(log(initial), log(trans), state_phase, n_phases)


def enumerate_paths(flat: FlatHmm, emissions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Every state path and its joint log-probability."""
    n_steps = emissions.shape[0]
    paths = np.array(list(itertools.product(range(flat.n_states), repeat=n_steps)))
    scores = flat.log_initial[paths[:, 0]] + emissions[np.arange(n_steps), paths].sum(axis=1)
    if n_steps > 1:
        scores = scores + flat.log_transitions[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, scores


def phase_sequences(rng: np.random.Generator, n_videos: int = 6, n_phases: int = 4):
    """Linear phase order with noisy one-hot confidences."""
    observations, labels = [], []
    for _ in range(n_videos):
        durations = rng.integers(40, 90, size=n_phases)
        lab = np.repeat(np.arange(n_phases), durations)
        obs = 3.0 * np.eye(n_phases)[lab] + rng.standard_normal((lab.size, n_phases))
        observations.append(obs)
        labels.append(lab)
    return observations, labels


class TestLearnTopology:
    def test_single_short_sequence(self):
        topology = learn_topology([np.array([0, 0, 1])], 7)
        assert np.flatnonzero(topology.transitions[0]).tolist() == [0, 1]
        assert topology.transitions[0, 0] == pytest.approx(0.5)
        off_diagonal = {(p, q) for p, q in topology.allowed() if p != q}
        assert off_diagonal == {(0, 1)}
        assert topology.initial[0] == 1.0

    def test_skipped_phase_keeps_both_paths(self):
        full = np.arange(7)
        skipping = np.array([0, 1, 2, 3, 4, 6])
        topology = learn_topology([full, skipping], 7)
        assert topology.transitions[4, 5] > 0
        assert topology.transitions[4, 6] > 0
        assert topology.transitions[4, 3] == 0.0

    def test_alternations_are_both_directions(self):
        topology = learn_topology([np.array([0, 4, 5, 4, 5, 6])], 7)
        assert topology.transitions[4, 5] > 0 and topology.transitions[5, 4] > 0

    def test_rows_are_stochastic(self):
        topology = learn_topology([np.array([0, 0, 2, 2, 1])], 4)
        np.testing.assert_allclose(topology.transitions.sum(axis=1), 1.0)

    @pytest.mark.parametrize("sequences", [[], [np.array([], dtype=int)]])
    def test_empty_input_rejected(self, sequences):
        with pytest.raises(TopologyError, match="non-empty"):
            learn_topology(sequences, 7)

    def test_unknown_phase_rejected(self):
        with pytest.raises(TopologyError, match="outside the vocabulary"):
            learn_topology([np.array([0, 7])], 7)

    def test_topology_dump(self):
        text = topology_dump(learn_topology([np.array([0, 0, 1])], 7), PHASE_IDS)
        lines = text.splitlines()
        assert lines[0] == "# phase\tsuccessor\tprobability"
        assert "P1\tP2\t0.500000" in lines


class TestBottomStates:
    def test_duration_rule(self):
        config = HhmmConfig()
        assert bottom_state_count([60, 90, 120], config) == 3
        assert bottom_state_count([31], config) == 2
        assert bottom_state_count([5], config) == 1
        assert bottom_state_count([10000], config) == 8
        assert bottom_state_count([], config) == 1

    def test_single_policy(self):
        assert bottom_state_count([600], HhmmConfig(bottom_state_policy="single")) == 1

    def test_uniform_segmentation(self):
        assert substate_assignment(10, 3).tolist() == [0, 0, 0, 0, 1, 1, 1, 2, 2, 2]
        assert substate_assignment(4, 1).tolist() == [0, 0, 0, 0]


class TestViterbi:
    def test_worked_example(self):
        flat, symbols = two_state_hmm()
        emissions = np.array([symbols[s] for s in "aab"])
        path, log_probability = viterbi_path(flat, emissions)
        assert path.tolist() == [0, 0, 1]
        assert np.exp(log_probability) == pytest.approx(0.11664, abs=1e-12)

    def test_single_state_model(self):
        flat = FlatHmm(log([1.0]), log([[1.0]]), np.array([0]), 1)
        emissions = np.random.default_rng(0).standard_normal((6, 1))
        path, log_probability = viterbi_path(flat, emissions)
        assert path.tolist() == [0] * 6
        assert log_probability == pytest.approx(emissions.sum(), abs=1e-12)

    def test_matches_enumeration(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            flat = random_flat_hmm(rng)
            emissions = rng.standard_normal((int(rng.integers(1, 9)), flat.n_states)) * 2
            _, scores = enumerate_paths(flat, emissions)
            path, log_probability = viterbi_path(flat, emissions)
            assert abs(log_probability - scores.max()) < 1e-9, f"seed {seed}"
            assert np.all(np.isfinite(flat.log_transitions[path[:-1], path[1:]])), f"seed {seed}"

    def test_impossible_observation_names_timestep(self):
        flat, symbols = two_state_hmm()
        emissions = np.array([symbols["a"], symbols["a"], [-np.inf, -np.inf]])
        with pytest.raises(DecodingError, match="timestep 2"):
            viterbi_path(flat, emissions)
        with pytest.raises(DecodingError, match="timestep 2"):
            forward_log_likelihood(flat, emissions)

    def test_empty_sequence_rejected(self):
        flat, _ = two_state_hmm()
        with pytest.raises(DecodingError, match="empty"):
            viterbi_path(flat, np.zeros((0, 2)))

    def test_long_sequence_stays_finite(self):
        flat, symbols = two_state_hmm()
        rng = np.random.default_rng(1)
        emissions = np.array([symbols[s] for s in rng.choice(["a", "b"], size=10000)])
        _, log_probability = viterbi_path(flat, emissions)
        filtering, log_likelihood = forward_log_likelihood(flat, emissions)
        assert np.isfinite(log_probability) and np.isfinite(log_likelihood)
        assert log_probability <= log_likelihood
        assert np.all(np.isfinite(filtering.max(axis=1)))


class TestForward:
    def test_worked_example(self):
        flat, symbols = two_state_hmm()
        _, log_likelihood = forward_log_likelihood(flat, np.array([symbols["a"], symbols["b"]]))
        assert np.exp(log_likelihood) == pytest.approx(0.234, abs=1e-12)

    def test_uniform_emissions_follow_transition_dynamics(self):
        flat, _ = two_state_hmm()
        filtering, _ = forward_log_likelihood(flat, np.zeros((3, 2)))
        expected = np.array([1.0, 0.0])
        for row in np.exp(filtering):
            np.testing.assert_allclose(row, expected, atol=1e-12)
            expected = expected @ np.exp(flat.log_transitions)

    def test_matches_enumeration(self):
        for seed in range(200):
            rng = np.random.default_rng(seed)
            flat = random_flat_hmm(rng)
            emissions = rng.standard_normal((int(rng.integers(1, 9)), flat.n_states)) * 2
            paths, scores = enumerate_paths(flat, emissions)
            filtering, log_likelihood = forward_log_likelihood(flat, emissions)

            assert abs(log_likelihood - logsumexp(scores)) < 1e-9, f"seed {seed}"
            final_phase = flat.state_phase[paths[:, -1]]
            for phase in range(flat.n_phases):
                mass = logsumexp(scores[final_phase == phase]) - logsumexp(scores)
                assert abs(np.exp(filtering[-1, phase]) - np.exp(mass)) < 1e-9, f"seed {seed}"
            np.testing.assert_allclose(np.exp(logsumexp(filtering, axis=1)), 1.0, atol=1e-9)

    def test_deterministic_chain_decoders_agree(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            n_states = int(rng.integers(2, 5))
            order = rng.permutation(n_states)
            trans = np.zeros((n_states, n_states))
            trans[np.arange(n_states), np.roll(order, -1)[np.argsort(order)]] = 1.0
            initial = np.eye(n_states)[int(rng.integers(n_states))]
            flat = FlatHmm(log(initial), log(trans), np.arange(n_states), n_states)
            emissions = rng.standard_normal((8, n_states))

            path, _ = viterbi_path(flat, emissions)
            filtering, _ = forward_log_likelihood(flat, emissions)
            np.testing.assert_array_equal(np.argmax(filtering, axis=1), flat.state_phase[path])


class TestTrainHhmm:
    def test_single_bottom_state_and_one_gaussian_is_a_plain_hmm(self):
        observations, labels = phase_sequences(np.random.default_rng(0))
        config = HhmmConfig(bottom_state_policy="single")
        model = train_hhmm(observations, labels, 4, config, n_components=1)

        assert model.substates == [1, 1, 1, 1]
        assert model.flat.n_states == 4
        np.testing.assert_allclose(np.exp(model.flat.log_transitions), model.topology.transitions, atol=1e-12)
        frames = np.concatenate(observations)
        phases = np.concatenate(labels)
        for p in range(4):
            np.testing.assert_allclose(model.emissions[p].means[0], frames[phases == p].mean(axis=0), atol=1e-10)

    def test_decodes_its_training_sequences(self):
        observations, labels = phase_sequences(np.random.default_rng(1))
        model = train_hhmm(observations, labels, 4, HhmmConfig(gmm_components=2, em_iterations=20), seed=3)
        correct = sum(int(np.sum(viterbi(model, o).phases == l)) for o, l in zip(observations, labels))
        total = sum(l.size for l in labels)
        assert correct / total >= 0.95

    def test_duration_policy_builds_chains(self):
        observations, labels = phase_sequences(np.random.default_rng(2))
        model = train_hhmm(observations, labels, 4, HhmmConfig(gmm_components=1))
        assert all(k >= 2 for k in model.substates)
        np.testing.assert_allclose(np.exp(logsumexp(model.flat.log_transitions, axis=1)), 1.0, atol=1e-12)

    def test_binary_observations_use_one_gaussian(self):
        rng = np.random.default_rng(3)
        labels = [np.repeat(np.arange(3), 40)]
        observations = [(rng.uniform(size=(120, 7)) < 0.3).astype(float)]
        model = train_hhmm(observations, labels, 3, HhmmConfig(gmm_components=4, bottom_state_policy="single"))
        assert all(g.n_components == 1 for g in model.emissions)
        assert np.all(model.emissions[0].variances >= 1e-2)

    def test_phase_without_frames_warns(self, caplog):
        observations, labels = phase_sequences(np.random.default_rng(4), n_phases=2)
        with caplog.at_level(logging.WARNING):
            model = train_hhmm(observations, labels, 3, HhmmConfig(gmm_components=1))
        assert "Phase 2 has no training frames" in caplog.text
        assert model.substates[2] == 1

    def test_misaligned_sequences_rejected(self):
        with pytest.raises(TopologyError, match="not aligned"):
            train_hhmm([np.zeros((5, 2))], [np.zeros(4, dtype=int)], 2)

    def test_observation_width_checked(self):
        observations, labels = phase_sequences(np.random.default_rng(5))
        model = train_hhmm(observations, labels, 4, HhmmConfig(gmm_components=1))
        with pytest.raises(DecodingError, match="does not match model dimension 4"):
            viterbi(model, np.zeros((3, 5)))

    def test_online_and_offline_decoding(self):
        observations, labels = phase_sequences(np.random.default_rng(6))
        model = train_hhmm(observations, labels, 4, HhmmConfig(gmm_components=1))
        online = forward_filter(model, iter(observations[0]))
        assert online.phases.shape == labels[0].shape
        np.testing.assert_allclose(np.exp(logsumexp(online.log_filtering, axis=1)), 1.0, atol=1e-9)
        streamed = np.array(list(iter_forward_filter(model, iter(observations[0]))))
        np.testing.assert_allclose(streamed, online.log_filtering, rtol=1e-12, atol=1e-12)
        with pytest.raises(DecodingError, match="empty sequence"):
            forward_filter(model, iter([]))

    def test_save_and_load(self, tmp_path):
        observations, labels = phase_sequences(np.random.default_rng(7))
        model = train_hhmm(observations, labels, 4, HhmmConfig(gmm_components=2))
        path = tmp_path / "hhmm.json"
        save_hhmm(model, str(path), {"feature": "fc8"})
        loaded, header = load_hhmm(str(path))
        assert header["substates"] == model.substates
        first = viterbi(model, observations[0])
        second = viterbi(loaded, observations[0])
        np.testing.assert_array_equal(first.phases, second.phases)
        assert first.log_probability == pytest.approx(second.log_probability, abs=1e-9)
