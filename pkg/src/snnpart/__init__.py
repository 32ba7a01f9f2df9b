"""Partitioned execution of feed-forward spiking networks on fixed-size
analog chips, with a deterministic grid emulator and in-the-loop training."""

from .chip import ChipSpec, check_fit, circuits_required, neurons_per_execution
from .emulator import EmulatorConfig, EventStream, run_partition
from .graph import Dense, NetworkGraph, NeuronParams, ReceptiveField, add_input, add_population, add_projection, validate_graph
from .partition import Backend, ExecutionGraph, partition_feedforward
from .scheduler import RuntimeModel, estimate_runtime, orchestrate, simulate, topological_levels

__version__ = "0.1.0"
