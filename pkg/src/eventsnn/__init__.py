"""Event-driven spiking network simulation and training.

Forward passes jump from spike to spike by solving the next threshold
crossing in closed form; gradients are estimated event-by-event from the
resulting trace, either with the adjoint (EventProp) backward pass or the
analytic first-spike derivative path.  The forward event source is pluggable:
in-process solver, mock hardware, or replayed spike files.
"""
from .core import (
    DimensionMismatch,
    EventTrace,
    InvalidParameter,
    LifParams,
    Network,
    NeuronState,
    NonpositiveTimeConstant,
    Spike,
    SpikeKind,
    UnsupportedTauRatio,
    read_spike_file,
    validate_network,
    write_spike_file,
)
from .lif import (
    CrossingResult,
    NegativeDt,
    next_crossing_double_tau,
    next_crossing_equal_tau,
    next_crossing_safe,
    propagate,
)
from .sim import (
    InvalidBudget,
    SimDiagnostics,
    StepOutput,
    UnsortedInput,
    dense_oracle,
    simulate,
    step,
)
from .grad import (
    DegenerateCrossing,
    NoSpike,
    eventprop_backward,
    fud_spike_time_grad,
    reconstruct_currents,
)
from .data import EncodingConfig, YinYangLabel, YinYangPoint, encode, generate
from .backend import (
    BackendConfig,
    MockConfig,
    ReplayConfig,
    ReplayShapeMismatch,
    ReplayUnsorted,
    forward,
    quantize_weights,
)
from .train import AdamState, ShapeMismatch, TtfsLoss, adam_step, train, ttfs_loss
from .config import ExperimentConfig, load_config, save_config

__version__ = "0.1.0"
