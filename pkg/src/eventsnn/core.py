"""Domain types and file formats shared by the whole engine.

Conventions, fixed once and used everywhere:
  * time is measured in units of the synaptic time constant (tau_syn = 1 in a
    normalized network); voltages are normalized so the resting potential is 0
    and the threshold defaults to 1,
  * weights[j][i] is the charge a spike of presynaptic neuron j deposits on
    the synaptic current of postsynaptic neuron i (row = presynaptic),
  * input neurons live in their own index space [0, n_in) separate from the
    simulated neurons [0, n_total),
  * a dummy spike (neuron -1, time +inf) pads a trace once activity stops.

All types are immutable value types after construction and safe to share
between threads.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

DUMMY_NEURON = -1

SPIKE_FILE_HEADER = "neuron,time"


class DimensionMismatch(ValueError):
    """Array shapes disagree with the declared network size."""


class UnsupportedTauRatio(ValueError):
    """Analytic solvers exist only for tau_mem in {1, 2} * tau_syn."""


class NonpositiveTimeConstant(ValueError):
    """Time constants must be strictly positive."""


class InvalidParameter(ValueError):
    """A parameter violates a documented invariant."""


class SpikeKind(enum.IntEnum):
    INTERNAL = 0
    INPUT = 1
    DUMMY = 2


@dataclass(frozen=True)
class Spike:
    """One event: which neuron fired and when.

    ``neuron`` indexes the simulated population for internal spikes and the
    input population for input spikes.  A dummy spike is always encoded as
    (-1, +inf) and marks an exhausted event budget.
    """

    neuron: int
    time: float
    kind: SpikeKind = SpikeKind.INTERNAL

    def __post_init__(self):
        if self.kind == SpikeKind.DUMMY:
            if self.neuron != DUMMY_NEURON or not math.isinf(self.time):
                raise InvalidParameter(
                    f"dummy spike must be ({DUMMY_NEURON}, inf), "
                    f"got ({self.neuron}, {self.time})"
                )
        else:
            if self.neuron < 0:
                raise InvalidParameter(f"negative neuron index {self.neuron}")
            if not (self.time >= 0.0 and math.isfinite(self.time)):
                raise InvalidParameter(f"bad spike time {self.time}")

    @staticmethod
    def dummy() -> "Spike":
        return Spike(DUMMY_NEURON, math.inf, SpikeKind.DUMMY)

    @property
    def is_dummy(self) -> bool:
        return self.kind == SpikeKind.DUMMY


@dataclass(frozen=True)
class LifParams:
    """LIF neuron constants in normalized units (tau_syn = 1, v_rest = 0)."""

    tau_mem: float = 2.0
    tau_syn: float = 1.0
    v_th: float = 1.0
    v_reset: float = 0.0
    v_rest: float = 0.0

    @property
    def is_equal_tau(self) -> bool:
        return math.isclose(self.tau_mem, self.tau_syn, rel_tol=1e-9)

    @property
    def is_double_tau(self) -> bool:
        return math.isclose(self.tau_mem, 2.0 * self.tau_syn, rel_tol=1e-9)


def _frozen_array(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class NeuronState:
    """Membrane voltages and synaptic currents of all neurons at time t."""

    v: np.ndarray
    i: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v", _frozen_array(self.v, np.float64))
        object.__setattr__(self, "i", _frozen_array(self.i, np.float64))
        if self.v.shape != self.i.shape or self.v.ndim != 1:
            raise DimensionMismatch(
                f"state vectors must be equal-length 1-d, got {self.v.shape} / {self.i.shape}"
            )

    @staticmethod
    def zeros(n: int, t: float = 0.0) -> "NeuronState":
        return NeuronState(np.zeros(n), np.zeros(n), t)

    @property
    def n(self) -> int:
        return self.v.shape[0]


@dataclass(frozen=True)
class Network:
    """Weight matrices plus neuron parameters for one simulated population.

    ``weights`` is n_total x n_total and may be recurrent (zero delay);
    ``input_weights`` is n_in x n_total. ``output_set`` lists the readout
    neurons, ``record_set`` the neurons whose spikes enter the trace
    (None = record everything, which the gradient path requires).
    """

    n_total: int
    weights: np.ndarray
    input_weights: np.ndarray
    params: LifParams = field(default_factory=LifParams)
    output_set: tuple = ()
    record_set: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen_array(self.weights, np.float64))
        object.__setattr__(
            self, "input_weights", _frozen_array(self.input_weights, np.float64)
        )
        object.__setattr__(self, "output_set", tuple(int(k) for k in self.output_set))
        if self.record_set is not None:
            object.__setattr__(
                self, "record_set", tuple(int(k) for k in self.record_set)
            )

    @property
    def n_in(self) -> int:
        return self.input_weights.shape[0]

    @staticmethod
    def feedforward(
        input_to_hidden: np.ndarray,
        hidden_to_output: np.ndarray,
        params: LifParams | None = None,
    ) -> "Network":
        """Assemble a 2-layer feedforward net into the flat N x N layout."""
        input_to_hidden = np.asarray(input_to_hidden, dtype=np.float64)
        hidden_to_output = np.asarray(hidden_to_output, dtype=np.float64)
        n_in, n_hidden = input_to_hidden.shape
        if hidden_to_output.shape[0] != n_hidden:
            raise DimensionMismatch(
                f"layer sizes disagree: {input_to_hidden.shape} vs {hidden_to_output.shape}"
            )
        n_out = hidden_to_output.shape[1]
        n = n_hidden + n_out
        w = np.zeros((n, n))
        w[:n_hidden, n_hidden:] = hidden_to_output
        w_in = np.zeros((n_in, n))
        w_in[:, :n_hidden] = input_to_hidden
        return Network(
            n_total=n,
            weights=w,
            input_weights=w_in,
            params=params if params is not None else LifParams(),
            output_set=tuple(range(n_hidden, n)),
        )


@dataclass(frozen=True)
class EventTrace:
    """Fixed-length record of one forward pass.

    Stored as parallel arrays (neurons, times, kinds) of length m; dummy
    entries trail the real events so times are non-decreasing throughout.
    """

    neurons: np.ndarray
    times: np.ndarray
    kinds: np.ndarray
    final_state: NeuronState

    def __post_init__(self):
        object.__setattr__(self, "neurons", _frozen_array(self.neurons, np.int64))
        object.__setattr__(self, "times", _frozen_array(self.times, np.float64))
        object.__setattr__(self, "kinds", _frozen_array(self.kinds, np.int8))
        if not (self.neurons.shape == self.times.shape == self.kinds.shape):
            raise DimensionMismatch("trace arrays must share one shape")

    def __len__(self) -> int:
        return self.times.shape[0]

    def __getitem__(self, k: int) -> Spike:
        return Spike(int(self.neurons[k]), float(self.times[k]), SpikeKind(int(self.kinds[k])))

    def __iter__(self) -> Iterator[Spike]:
        return (self[k] for k in range(len(self)))

    @property
    def spikes(self) -> tuple:
        return tuple(self)

    @property
    def n_real(self) -> int:
        return int(np.sum(self.kinds != SpikeKind.DUMMY))

    @staticmethod
    def from_spikes(spikes: Sequence[Spike], final_state: NeuronState) -> "EventTrace":
        return EventTrace(
            np.array([s.neuron for s in spikes], dtype=np.int64),
            np.array([s.time for s in spikes], dtype=np.float64),
            np.array([int(s.kind) for s in spikes], dtype=np.int8),
            final_state,
        )


def validate_network(net: Network, require_analytic: bool = True) -> None:
    """Check every structural invariant; raises on the first violation.

    Idempotent and side-effect free. ``require_analytic`` additionally
    demands a tau ratio the production root solvers support.
    """
    p = net.params
    if not (p.tau_mem > 0.0 and p.tau_syn > 0.0):
        raise NonpositiveTimeConstant(
            f"tau_mem={p.tau_mem}, tau_syn={p.tau_syn} must be > 0"
        )
    if p.v_rest != 0.0:
        raise InvalidParameter("v_rest is fixed to 0 by normalization")
    if not p.v_reset < p.v_th:
        raise InvalidParameter(f"v_reset={p.v_reset} must lie below v_th={p.v_th}")
    n = net.n_total
    if net.weights.shape != (n, n):
        raise DimensionMismatch(
            f"weights shape {net.weights.shape} != ({n}, {n})"
        )
    if net.input_weights.ndim != 2 or net.input_weights.shape[1] != n:
        raise DimensionMismatch(
            f"input_weights shape {net.input_weights.shape} incompatible with n_total={n}"
        )
    if not np.all(np.isfinite(net.weights)) or not np.all(np.isfinite(net.input_weights)):
        raise InvalidParameter("weight matrices must be finite")
    for name, idx in (("output_set", net.output_set), ("record_set", net.record_set or ())):
        for k in idx:
            if not 0 <= k < n:
                raise InvalidParameter(f"{name} index {k} out of range [0, {n})")
        if len(set(idx)) != len(idx):
            raise InvalidParameter(f"{name} contains duplicates")
    if require_analytic and not (p.is_equal_tau or p.is_double_tau):
        raise UnsupportedTauRatio(
            f"tau_mem/tau_syn = {p.tau_mem / p.tau_syn:g}: analytic solvers "
            "support only ratios 1 and 2"
        )


# ---------------------------------------------------------------------------
# spike-file format: UTF-8 text, header "neuron,time", one "index,repr(time)"
# record per line, dummy written as "-1,inf".  repr round-trips float64
# exactly, so a write/read cycle is the identity on (neuron, time).


def format_time(t: float) -> str:
    return repr(float(t))


def format_spike(s: Spike) -> str:
    return f"{s.neuron},{format_time(s.time)}"


def _open(path_or_io, mode: str):
    if hasattr(path_or_io, "write") or hasattr(path_or_io, "read"):
        return path_or_io, False
    return open(path_or_io, mode, encoding="utf-8"), True


def write_spike_file(path_or_io, spikes: Iterable[Spike]) -> None:
    f, close = _open(path_or_io, "w")
    try:
        f.write(SPIKE_FILE_HEADER + "\n")
        for s in spikes:
            f.write(format_spike(s) + "\n")
    finally:
        if close:
            f.close()


def parse_spike_record(line: str) -> tuple[int, float]:
    try:
        neuron_s, time_s = line.split(",")
        return int(neuron_s), float(time_s)
    except ValueError as e:
        raise InvalidParameter(f"malformed spike record {line!r}") from e


def classify_records(
    records: Sequence[tuple[int, float]],
    inputs: Sequence[Spike] | None = None,
) -> list[Spike]:
    """Rebuild Spike objects from raw (neuron, time) records.

    The file format carries no kind column: dummies are recognized by the
    (-1, inf) encoding, and input spikes by matching against the ``inputs``
    the caller fed the forward pass (records equal to the next unconsumed
    input, walked in time order, are classified as inputs).  Without
    ``inputs`` every non-dummy record comes back as internal.
    """
    pending = list(inputs) if inputs else []
    p = 0
    out = []
    for neuron, time in records:
        if neuron == DUMMY_NEURON:
            out.append(Spike.dummy())
        elif p < len(pending) and pending[p].neuron == neuron and pending[p].time == time:
            out.append(Spike(neuron, time, SpikeKind.INPUT))
            p += 1
        else:
            out.append(Spike(neuron, time, SpikeKind.INTERNAL))
    return out


def read_spike_file(path_or_io, inputs: Sequence[Spike] | None = None) -> list[Spike]:
    f, close = _open(path_or_io, "r")
    try:
        lines = [ln.strip() for ln in f if ln.strip()]
    finally:
        if close:
            f.close()
    if not lines or lines[0] != SPIKE_FILE_HEADER:
        raise InvalidParameter("spike file must start with the 'neuron,time' header")
    return classify_records([parse_spike_record(ln) for ln in lines[1:]], inputs)
