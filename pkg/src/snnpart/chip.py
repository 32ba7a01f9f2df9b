"""Resource arithmetic for one virtual chip."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .graph import Projection, ReceptiveField


class ChipError(ValueError):
    pass


@dataclass(frozen=True)
class ChipSpec:
    neuron_circuits: int = 512
    synapses_per_circuit: int = 256
    max_circuits_per_neuron: int = 64
    labels_per_row: int = 64
    synapses_per_signed_weight: int = 2
    weight_bits: int = 6
    events_per_cycle: int = 2
    clock_mhz: float = 250.0
    input_buffer: int = 16

    def __post_init__(self):
        for name in (
            "neuron_circuits",
            "synapses_per_circuit",
            "max_circuits_per_neuron",
            "labels_per_row",
            "synapses_per_signed_weight",
            "weight_bits",
            "events_per_cycle",
        ):
            if getattr(self, name) < 1:
                raise ChipError(f"{name} >= 1 violated")
        if self.input_buffer < 0:
            raise ChipError("input_buffer >= 0 violated")
        if self.clock_mhz <= 0:
            raise ChipError("clock_mhz > 0 violated")
        if self.neuron_circuits % 2:
            raise ChipError("neuron_circuits must be divisible by 2")

    @property
    def max_signed_fan_in(self) -> int:
        return self.max_circuits_per_neuron * self.synapses_per_circuit // self.synapses_per_signed_weight

    @property
    def signed_rows(self) -> int:
        # one synapse array per neuron row, synapses_per_circuit rows each
        return 2 * self.synapses_per_circuit // self.synapses_per_signed_weight

    @property
    def max_weight(self) -> int:
        return 2**self.weight_bits - 1


def circuits_required(fan_in_signed: int, chip: ChipSpec = ChipSpec(), round_to_power_of_two: bool = False) -> int:
    """Neuron circuits a logical neuron needs for the given signed fan-in."""
    if fan_in_signed < 0:
        raise ChipError("fan-in must be >= 0")
    if fan_in_signed > chip.max_signed_fan_in:
        raise ChipError(
            f"fan-in {fan_in_signed} exceeds maximum fan-in {chip.max_signed_fan_in}"
        )
    hw_synapses = chip.synapses_per_signed_weight * fan_in_signed
    c = max(1, -(-hw_synapses // chip.synapses_per_circuit))
    if round_to_power_of_two:
        c = 1 << (c - 1).bit_length()
        if c > chip.max_circuits_per_neuron:
            raise ChipError(f"fan-in {fan_in_signed} exceeds maximum fan-in under power-of-two placement")
    return c


def neurons_per_execution(circuits_per_neuron: int, chip: ChipSpec = ChipSpec()) -> int:
    if not 1 <= circuits_per_neuron <= chip.max_circuits_per_neuron:
        raise ChipError(
            f"circuits per neuron must be in [1, {chip.max_circuits_per_neuron}], got {circuits_per_neuron}"
        )
    return chip.neuron_circuits // circuits_per_neuron


@dataclass(frozen=True)
class NeuronGroup:
    """A set of neurons with identical synaptic demand.

    ``dense_fan_in`` counts signed inputs from all-to-all projections,
    ``sparse_fan_in`` those from receptive-field projections, which are
    placed in label blocks.
    """

    count: int
    dense_fan_in: int = 0
    sparse_fan_in: int = 0

    @property
    def fan_in(self) -> int:
        return self.dense_fan_in + self.sparse_fan_in


@dataclass
class FitReport:
    fits: bool
    circuits_used: int
    rows_used: int
    labels_used: int = 0
    violations: list[tuple[str, int, int]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "fits": self.fits,
            "circuits_used": self.circuits_used,
            "rows_used": self.rows_used,
            "labels_used": self.labels_used,
            "violations": [list(v) for v in self.violations],
        }


def check_fit(
    groups: Sequence[NeuronGroup], chip: ChipSpec = ChipSpec(), round_to_power_of_two: bool = False
) -> FitReport:
    """Account circuits, signed synapse rows and per-row labels.

    Rows are counted in signed (model) units. Dense inputs of a neuron made of
    ``c`` circuits are spread over its circuits, so ``c`` sources share one
    row; sparse inputs take ``sparse_fan_in`` rows per label block.
    """
    violations = []
    circuits = rows = labels = 0
    for g in groups:
        if g.count == 0:
            continue
        try:
            c = circuits_required(g.fan_in, chip, round_to_power_of_two)
        except ChipError:
            violations.append(("fan_in", g.fan_in, chip.max_signed_fan_in))
            continue
        circuits += g.count * c
        if g.dense_fan_in:
            rows += -(-g.dense_fan_in // c)
            labels = max(labels, min(c, g.dense_fan_in))
        if g.sparse_fan_in:
            n_blocks = -(-g.count // chip.labels_per_row)
            rows += n_blocks * g.sparse_fan_in
            labels = max(labels, min(g.count, chip.labels_per_row))
    if circuits > chip.neuron_circuits:
        violations.append(("neuron_circuits", circuits, chip.neuron_circuits))
    if rows > chip.signed_rows:
        violations.append(("synapse_rows", rows, chip.signed_rows))
    if labels > chip.labels_per_row:
        violations.append(("labels_per_row", labels, chip.labels_per_row))
    return FitReport(not violations, circuits, rows, labels, violations)


@dataclass(frozen=True)
class BlockMapping:
    block_sizes: tuple[int, ...]
    rows_per_block: int

    @property
    def n_blocks(self) -> int:
        return len(self.block_sizes)

    @property
    def total_rows(self) -> int:
        return self.n_blocks * self.rows_per_block


def label_blocks(
    projection: Projection, chip: ChipSpec = ChipSpec(), n_pre: int | None = None
) -> BlockMapping:
    """Group the post neurons of a receptive-field projection into blocks
    addressable through shared synapse rows."""
    conn = projection.connectivity
    if not isinstance(conn, ReceptiveField):
        raise ChipError("label blocks require receptive-field connectivity")
    n_post, fan_in = projection.weights.shape
    if fan_in > chip.signed_rows:
        raise ChipError(f"fan-in {fan_in} exceeds the {chip.signed_rows} signed rows of one block")
    full, rest = divmod(n_post, chip.labels_per_row)
    sizes = (chip.labels_per_row,) * full + ((rest,) if rest else ())
    return BlockMapping(sizes, fan_in)
