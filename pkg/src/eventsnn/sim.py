"""Event-driven simulation loop with a fixed event budget.

Each iteration finds the next event: the earliest analytic threshold
crossing across all neurons competes with the head of the input queue, and
min(t_input, t_internal) wins (input first on exact ties, lowest index among
simultaneous internal candidates).  The state is propagated to that time and
the transition applied: internal spike -> V[ix] = v_reset and I += weights[ix],
input spike -> I += input_weights[source].  When no event exists before t_max
a dummy spike (-1, inf) is emitted and the state freezes at t_max; dummies
then fill the remaining budget, so every trace has exactly m entries.

The engine is written over batched (B, N) state arrays; the public
single-sample API wraps the same code path with B = 1, so batched and
sequential execution agree bitwise.  ``dense_oracle`` is an independent
fixed-grid forward-Euler integrator used by the test suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    DUMMY_NEURON,
    EventTrace,
    InvalidParameter,
    Network,
    NeuronState,
    Spike,
    SpikeKind,
    validate_network,
)
from .lif import next_crossing_safe, propagate_arrays


class UnsortedInput(ValueError):
    """Input events must be fed in non-decreasing time order."""


class InvalidBudget(ValueError):
    """The event budget m must be a positive integer."""


@dataclass
class SimDiagnostics:
    """Counters the simulator fills in when passed as a collector."""

    truncated_inputs: int = 0


@dataclass(frozen=True)
class StepOutput:
    state: NeuronState
    spike: Spike


@dataclass
class BatchTrace:
    """Struct-of-arrays trace for a batch of independent forward passes.

    ``i_spike_recorded`` is the engine's diagnostic record of the spiking
    neuron's synaptic current just before each internal event; the gradient
    path deliberately ignores it and reconstructs currents from the trace.
    """

    neurons: np.ndarray  # (B, m) int64
    times: np.ndarray  # (B, m) float64
    kinds: np.ndarray  # (B, m) int8
    i_spike_recorded: np.ndarray | None
    final_v: np.ndarray  # (B, N)
    final_i: np.ndarray  # (B, N)
    final_t: np.ndarray  # (B,)

    @property
    def batch_size(self) -> int:
        return self.times.shape[0]

    def sample(self, b: int) -> EventTrace:
        return EventTrace(
            self.neurons[b],
            self.times[b],
            self.kinds[b],
            NeuronState(self.final_v[b], self.final_i[b], float(self.final_t[b])),
        )


def pack_inputs(batches: Sequence[Sequence[Spike]]):
    """Pad per-sample input spike lists into (B, K) index/time arrays."""
    b = len(batches)
    k = max((len(s) for s in batches), default=0)
    idx = np.full((b, k + 1), DUMMY_NEURON, dtype=np.int64)
    t = np.full((b, k + 1), np.inf, dtype=np.float64)
    for row, spikes in enumerate(batches):
        for col, s in enumerate(spikes):
            idx[row, col] = s.neuron
            t[row, col] = s.time
    return idx, t


def _check_inputs(net: Network, inputs: Sequence[Spike]) -> None:
    last = -math.inf
    for s in inputs:
        if s.is_dummy:
            raise InvalidParameter("dummy spikes are not valid inputs")
        if not 0 <= s.neuron < net.n_in:
            raise InvalidParameter(
                f"input neuron {s.neuron} out of range [0, {net.n_in})"
            )
        if s.time < last:
            raise UnsortedInput(f"input at t={s.time} after t={last}")
        last = s.time


def simulate_batch(
    net: Network,
    in_neurons: np.ndarray,
    in_times: np.ndarray,
    m: int,
    t_max: float,
    v0: np.ndarray | None = None,
    i0: np.ndarray | None = None,
    t0: np.ndarray | None = None,
) -> BatchTrace:
    """Run B independent event loops of m iterations over shared weights."""
    if m <= 0:
        raise InvalidBudget(f"event budget m={m} must be positive")
    p = net.params
    n = net.n_total
    b = in_times.shape[0]
    in_neurons = np.asarray(in_neurons, dtype=np.int64)
    in_times = np.asarray(in_times, dtype=np.float64)
    # one trailing inf column so the queue pointer can always be dereferenced
    in_neurons = np.concatenate([in_neurons, np.full((b, 1), DUMMY_NEURON, np.int64)], axis=1)
    in_times = np.concatenate([in_times, np.full((b, 1), np.inf)], axis=1)

    v = np.zeros((b, n)) if v0 is None else np.array(v0, dtype=np.float64)
    i = np.zeros((b, n)) if i0 is None else np.array(i0, dtype=np.float64)
    t = np.zeros(b) if t0 is None else np.array(t0, dtype=np.float64)
    ptr = np.zeros(b, dtype=np.int64)
    done = np.zeros(b, dtype=bool)

    rows = np.arange(b)
    out_neurons = np.full((b, m), DUMMY_NEURON, dtype=np.int64)
    out_times = np.full((b, m), np.inf)
    out_kinds = np.full((b, m), int(SpikeKind.DUMMY), dtype=np.int8)
    out_ispike = np.zeros((b, m))

    w = net.weights
    w_in = net.input_weights

    for k in range(m):
        dt_cross = next_crossing_safe(v, i, p)
        t_int = t[:, None] + dt_cross
        ix = np.argmin(t_int, axis=1)
        t_ix = t_int[rows, ix]
        t_in = in_times[rows, ptr]
        is_input = t_in <= t_ix
        t_next = np.where(is_input, t_in, t_ix)
        emit_dummy = done | np.isinf(t_next) | (t_next > t_max)
        dt = np.where(emit_dummy, t_max - t, t_next - t)
        v, i = propagate_arrays(v, i, dt[:, None], p)

        src = in_neurons[rows, ptr]
        inp_mask = ~emit_dummy & is_input
        int_mask = ~emit_dummy & ~is_input

        out_neurons[:, k] = np.where(emit_dummy, DUMMY_NEURON, np.where(is_input, src, ix))
        out_times[:, k] = np.where(emit_dummy, np.inf, t_next)
        out_kinds[:, k] = np.where(
            emit_dummy,
            int(SpikeKind.DUMMY),
            np.where(is_input, int(SpikeKind.INPUT), int(SpikeKind.INTERNAL)),
        )
        if int_mask.any():
            out_ispike[int_mask, k] = i[int_mask, ix[int_mask]]
            v[int_mask, ix[int_mask]] = p.v_reset
            i[int_mask] += w[ix[int_mask]]
        if inp_mask.any():
            i[inp_mask] += w_in[src[inp_mask]]
            ptr = ptr + inp_mask
        t = np.where(emit_dummy, t_max, t_next)
        done |= emit_dummy

    trace = BatchTrace(out_neurons, out_times, out_kinds, out_ispike, v, i, t)
    if net.record_set is not None and len(net.record_set) != net.n_total:
        trace = _filter_record_set(trace, net)
    return trace


def _filter_record_set(trace: BatchTrace, net: Network) -> BatchTrace:
    """Drop internal spikes of unrecorded neurons, repacking dummies at the end.

    Unobserved events still consumed budget iterations; only their records
    are hidden, mirroring a substrate that reports a subset of units.
    """
    recorded = np.zeros(net.n_total, dtype=bool)
    recorded[list(net.record_set)] = True
    hide = (trace.kinds == int(SpikeKind.INTERNAL)) & ~recorded[
        np.clip(trace.neurons, 0, net.n_total - 1)
    ]
    b, m = trace.times.shape
    neurons = np.full_like(trace.neurons, DUMMY_NEURON)
    times = np.full_like(trace.times, np.inf)
    kinds = np.full_like(trace.kinds, int(SpikeKind.DUMMY))
    ispike = np.zeros_like(trace.i_spike_recorded)
    for row in range(b):
        keep = ~hide[row]
        cnt = int(keep.sum())
        neurons[row, :cnt] = trace.neurons[row, keep]
        times[row, :cnt] = trace.times[row, keep]
        kinds[row, :cnt] = trace.kinds[row, keep]
        ispike[row, :cnt] = trace.i_spike_recorded[row, keep]
    return BatchTrace(
        neurons, times, kinds, ispike, trace.final_v, trace.final_i, trace.final_t
    )


def simulate(
    net: Network,
    inputs: Sequence[Spike],
    m: int,
    t_max: float,
    initial: NeuronState | None = None,
    diag: SimDiagnostics | None = None,
) -> EventTrace:
    """Event-driven forward pass: exactly m trace slots, dummies trailing.

    Inputs must be sorted by time; inputs that do not fit the budget are
    silently truncated (counted in ``diag`` when a collector is passed).
    """
    validate_network(net)
    if m <= 0:
        raise InvalidBudget(f"event budget m={m} must be positive")
    if not t_max > 0.0:
        raise InvalidParameter(f"t_max={t_max} must be positive")
    _check_inputs(net, inputs)
    idx, times = pack_inputs([inputs])
    v0 = i0 = t0 = None
    if initial is not None:
        if initial.n != net.n_total:
            raise InvalidParameter(
                f"initial state has {initial.n} neurons, network {net.n_total}"
            )
        if initial.t > t_max:
            raise InvalidParameter("initial time lies beyond t_max")
        if inputs and inputs[0].time < initial.t:
            raise UnsortedInput("input event earlier than the initial state time")
        v0 = initial.v[None, :]
        i0 = initial.i[None, :]
        t0 = np.array([initial.t])
    batch = simulate_batch(net, idx[:, :-1], times[:, :-1], m, t_max, v0, i0, t0)
    if diag is not None:
        consumed = int(np.sum(batch.kinds[0] == int(SpikeKind.INPUT)))
        eligible = sum(1 for s in inputs if s.time <= t_max)
        diag.truncated_inputs += eligible - consumed
    return batch.sample(0)


def step(
    state: NeuronState,
    net: Network,
    input_queue_head: Spike | None,
    t_max: float,
) -> StepOutput:
    """One event-loop iteration from an explicit state.

    The caller owns the input queue: if the returned spike is the input head,
    pop it before the next call.
    """
    validate_network(net)
    if state.t > t_max:
        raise InvalidParameter(f"state time {state.t} beyond t_max={t_max}")
    head: list[Spike] = []
    if input_queue_head is not None:
        if input_queue_head.time < state.t:
            raise UnsortedInput(
                f"input event at t={input_queue_head.time} earlier than state time {state.t}"
            )
        _check_inputs(net, [input_queue_head])
        head = [input_queue_head]
    idx, times = pack_inputs([head])
    batch = simulate_batch(
        net,
        idx[:, :-1],
        times[:, :-1],
        1,
        t_max,
        state.v[None, :],
        state.i[None, :],
        np.array([state.t]),
    )
    return StepOutput(state=batch.sample(0).final_state, spike=batch.sample(0)[0])


def dense_oracle(
    net: Network,
    inputs: Sequence[Spike],
    dt: float,
    t_max: float,
    m: int | None = None,
) -> EventTrace:
    """Fixed-grid forward-Euler reference integrator (test oracle).

    Crossings are detected by sign change against v_th and refined with one
    linear interpolation inside the step.  Input times split grid steps so
    external events land exactly.  With ``m`` given, the trace follows the
    budget contract of ``simulate`` (truncation + dummy padding).
    """
    if not dt > 0.0:
        raise InvalidParameter(f"dt={dt} must be positive")
    validate_network(net, require_analytic=False)
    _check_inputs(net, inputs)
    p = net.params
    n = net.n_total
    v = np.zeros(n)
    i = np.zeros(n)
    t = 0.0
    queue = [s for s in inputs if s.time <= t_max]
    qp = 0
    events: list[Spike] = []
    k_grid = 1

    while t < t_max:
        t_grid = min(k_grid * dt, t_max)
        t_next = min(queue[qp].time, t_grid) if qp < len(queue) else t_grid
        h = t_next - t
        if h > 0.0:
            v_new = v + h * (-v / p.tau_mem + i)
            i_new = i * (1.0 - h / p.tau_syn)
            crossed = np.nonzero((v < p.v_th) & (v_new >= p.v_th))[0]
            if crossed.size:
                frac = (p.v_th - v[crossed]) / (v_new[crossed] - v[crossed])
                order = np.argsort(frac, kind="stable")
                for j in order:
                    nrn = int(crossed[j])
                    events.append(Spike(nrn, t + h * float(frac[j]), SpikeKind.INTERNAL))
                    v_new[nrn] = p.v_reset
                    i_new += net.weights[nrn]
            v, i = v_new, i_new
            t = t_next
        if qp < len(queue) and queue[qp].time == t_next:
            s = queue[qp]
            events.append(Spike(s.neuron, s.time, SpikeKind.INPUT))
            i = i + net.input_weights[s.neuron]
            qp += 1
        if t_next == t_grid and t_grid == k_grid * dt:
            k_grid += 1
        if m is not None and len(events) >= m:
            break

    final = NeuronState(v, i, min(t, t_max))
    if m is not None:
        events = events[:m] + [Spike.dummy()] * max(0, m - len(events))
    return EventTrace.from_spikes(events, final)
