import numpy as np
import pytest

from eventsnn.backend import (
    BackendConfig,
    MockConfig,
    ReplayConfig,
    ReplayShapeMismatch,
    ReplayUnsorted,
    forward,
    forward_batch,
    quantize_weights,
    read_replay_file,
    replay_block_to_trace,
    write_replay_file,
)
from eventsnn.core import InvalidParameter, LifParams, Network, Spike, SpikeKind
from eventsnn.grad import eventprop_backward
from eventsnn.sim import pack_inputs, simulate

from conftest import random_inputs, random_network

P2 = LifParams(tau_mem=2.0)


def in_spike(neuron, t):
    return Spike(neuron, t, SpikeKind.INPUT)


class TestQuantizeWeights:
    def test_zero_stays_zero(self):
        for bits in (2, 3, 6, 8, 16):
            assert quantize_weights(np.array([0.0]), bits, 1.0)[0] == 0.0

    def test_two_bit_rounding(self):
        # bits=2 keeps levels {-1, 0, 1}: 0.6 snaps up to 1.0
        assert quantize_weights(np.array([0.6]), 2, 1.0)[0] == 1.0
        assert quantize_weights(np.array([0.4]), 2, 1.0)[0] == 0.0
        assert quantize_weights(np.array([-0.6]), 2, 1.0)[0] == -1.0

    def test_ties_round_away_from_zero(self):
        assert quantize_weights(np.array([0.5]), 2, 1.0)[0] == 1.0
        assert quantize_weights(np.array([-0.5]), 2, 1.0)[0] == -1.0

    def test_saturation(self):
        q = quantize_weights(np.array([5.0, -7.0]), 6, 1.0)
        assert q[0] == 1.0 and q[1] == -1.0

    def test_six_bit_error_bound_exhaustive(self, rng):
        # levels are clip/31 apart, so the in-range rounding error is
        # bounded by half a step = clip/62
        clip = 1.7
        w = rng.uniform(-clip, clip, size=20_000)
        q = quantize_weights(w, 6, clip)
        assert np.max(np.abs(q - w)) <= clip / 62 + 1e-15
        levels = np.unique(q)
        assert len(levels) == 63
        step = np.diff(levels)
        np.testing.assert_allclose(step, clip / 31, atol=1e-12)

    def test_monotone_up_to_ties(self, rng):
        w = np.sort(rng.uniform(-2, 2, size=500))
        q = quantize_weights(w, 4, 1.5)
        assert np.all(np.diff(q) >= 0.0)

    def test_bits_below_two_rejected(self):
        with pytest.raises(InvalidParameter):
            quantize_weights(np.zeros(1), 1, 1.0)


class TestNumericBackend:
    def test_passthrough_bit_for_bit(self, rng):
        net = random_network(rng)
        inputs = random_inputs(rng, net)
        tr_b = forward(BackendConfig(kind="numeric"), net, inputs, 12, 2.5, seed=3)
        tr_s = simulate(net, inputs, m=12, t_max=2.5)
        np.testing.assert_array_equal(tr_b.times, tr_s.times)
        np.testing.assert_array_equal(tr_b.neurons, tr_s.neurons)
        np.testing.assert_array_equal(tr_b.kinds, tr_s.kinds)


class TestMockBackend:
    def test_degenerate_noise_equals_numeric(self, rng):
        # sigma=0, many bits, no loss: the mock trace must match exactly
        net = random_network(rng)
        inputs = random_inputs(rng, net)
        cfg = BackendConfig(
            kind="mock",
            mock=MockConfig(jitter_sigma=0.0, weight_bits=40, spike_loss_prob=0.0),
        )
        tr_m = forward(cfg, net, inputs, 12, 2.5, seed=5)
        tr_n = simulate(net, inputs, m=12, t_max=2.5)
        np.testing.assert_array_equal(tr_m.neurons, tr_n.neurons)
        np.testing.assert_array_equal(tr_m.kinds, tr_n.kinds)
        np.testing.assert_allclose(tr_m.times, tr_n.times, atol=1e-12)

    def test_same_seed_same_trace(self, rng):
        net = random_network(rng)
        inputs = random_inputs(rng, net)
        cfg = BackendConfig(kind="mock", mock=MockConfig(jitter_sigma=0.05))
        a = forward(cfg, net, inputs, 12, 2.5, seed=7)
        b = forward(cfg, net, inputs, 12, 2.5, seed=7)
        np.testing.assert_array_equal(a.times, b.times)
        c = forward(cfg, net, inputs, 12, 2.5, seed=8)
        assert not np.array_equal(a.times, c.times)

    def test_noisy_trace_is_sorted_and_padded(self, rng):
        net = random_network(rng)
        inputs = random_inputs(rng, net)
        cfg = BackendConfig(
            kind="mock", mock=MockConfig(jitter_sigma=0.2, spike_loss_prob=0.3)
        )
        tr = forward(cfg, net, inputs, 15, 2.5, seed=1)
        assert len(tr) == 15
        real = [s.time for s in tr if not s.is_dummy]
        assert real == sorted(real)
        assert all(0.0 <= t <= 2.5 for t in real)

    def test_batch_matches_single_runs(self, rng):
        net = random_network(rng)
        batches = [random_inputs(rng, net) for _ in range(6)]
        cfg = BackendConfig(kind="mock", mock=MockConfig(jitter_sigma=0.05))
        idx, times = pack_inputs(batches)
        got = forward_batch(cfg, net, idx[:, :-1], times[:, :-1], 12, 2.5, seeds=list(range(6)))
        for b, inputs in enumerate(batches):
            solo = forward(cfg, net, inputs, 12, 2.5, seed=b)
            np.testing.assert_array_equal(got.sample(b).times, solo.times)
            np.testing.assert_array_equal(got.sample(b).neurons, solo.neurons)

    def test_invalid_mock_params_rejected(self):
        with pytest.raises(InvalidParameter):
            forward(
                BackendConfig(kind="mock", mock=MockConfig(weight_bits=1)),
                random_network(np.random.default_rng(0)),
                [],
                4,
                1.0,
            )
        with pytest.raises(InvalidParameter):
            forward(
                BackendConfig(kind="mock", mock=MockConfig(spike_loss_prob=1.5)),
                random_network(np.random.default_rng(0)),
                [],
                4,
                1.0,
            )


class TestReplayBackend:
    def make_traces(self, rng, n_samples=4, m=14, t_max=2.5):
        net = random_network(rng)
        sample_inputs = [random_inputs(rng, net, k_max=5) for _ in range(n_samples)]
        traces = [simulate(net, ins, m, t_max) for ins in sample_inputs]
        return net, sample_inputs, traces

    def test_loopback_gradients_identical(self, rng, tmp_path):
        # the hardware-in-the-loop seam: dump traces, reload, same gradients
        net, sample_inputs, traces = self.make_traces(rng)
        path = tmp_path / "t.replay"
        write_replay_file(path, traces, m=14, t_max=2.5)
        cfg = BackendConfig(kind="replay", replay=ReplayConfig(trace_path=path))
        for inputs, trace in zip(sample_inputs, traces):
            re_trace = forward(cfg, net, inputs, 14, 2.5)
            np.testing.assert_array_equal(re_trace.times, trace.times)
            g = np.zeros(14)
            g[[k for k, s in enumerate(trace) if s.kind == SpikeKind.INTERNAL][:1]] = 1.0
            a_w, a_in = eventprop_backward(trace, net, g, strict=False)
            b_w, b_in = eventprop_backward(re_trace, net, g, strict=False)
            assert np.max(np.abs(a_w - b_w)) <= 1e-12
            assert np.max(np.abs(a_in - b_in)) <= 1e-12

    def test_manifest_budget_mismatch(self, rng, tmp_path):
        net, sample_inputs, traces = self.make_traces(rng)
        path = tmp_path / "t.replay"
        write_replay_file(path, traces, m=14, t_max=2.5)
        cfg = BackendConfig(kind="replay", replay=ReplayConfig(trace_path=path))
        with pytest.raises(ReplayShapeMismatch):
            forward(cfg, net, sample_inputs[0], 13, 2.5)

    def test_truncated_file_rejected(self, rng, tmp_path):
        net, sample_inputs, traces = self.make_traces(rng)
        path = tmp_path / "t.replay"
        write_replay_file(path, traces, m=14, t_max=2.5)
        body = path.read_text().splitlines()
        (tmp_path / "bad.replay").write_text("\n".join(body[:-3]) + "\n")
        with pytest.raises(ReplayShapeMismatch):
            read_replay_file(tmp_path / "bad.replay")

    def test_unsorted_block_rejected(self, rng):
        net, sample_inputs, traces = self.make_traces(rng)
        records = [(s.neuron, s.time) for s in traces[0]]
        real = [r for r in records if r[0] != -1]
        if len(real) >= 2:
            records[0], records[1] = records[1], records[0]
            with pytest.raises((ReplayUnsorted, ReplayShapeMismatch)):
                replay_block_to_trace(records, net, sample_inputs[0], 14, 2.5)

    def test_no_matching_block(self, rng, tmp_path):
        net, sample_inputs, traces = self.make_traces(rng)
        path = tmp_path / "t.replay"
        write_replay_file(path, traces, m=14, t_max=2.5)
        cfg = BackendConfig(kind="replay", replay=ReplayConfig(trace_path=path))
        foreign = [in_spike(0, 0.123456)]
        with pytest.raises(ReplayShapeMismatch):
            forward(cfg, net, foreign, 14, 2.5)
