"""Compile a NetworkGraph into per-chip executions linked by
inter-execution projections."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

from .chip import ChipError, ChipSpec, FitReport, NeuronGroup, check_fit, circuits_required, neurons_per_execution
from .graph import NetworkGraph, ReceptiveField, validate_graph


class PartitionError(ValueError):
    pass


class Backend(str, enum.Enum):
    EMULATED = "emulated"
    REFERENCE = "reference_simulated"


@dataclass(frozen=True)
class PopulationSlice:
    population: str
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ProjectionSlice:
    """Afferent projection restricted to post neurons ``[start, stop)``."""

    projection: str
    start: int
    stop: int


@dataclass(frozen=True)
class InputPort:
    """Source indices ``[start, stop)`` arrive as labels ``offset + (i - start)``."""

    source: str
    start: int
    stop: int
    offset: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ExecutionInstance:
    id: str
    neurons: tuple[PopulationSlice, ...]
    projections: tuple[ProjectionSlice, ...]
    ports: tuple[InputPort, ...]
    backend: Backend = Backend.REFERENCE
    resources: FitReport | None = field(default=None, compare=False)

    @property
    def n_neurons(self) -> int:
        return sum(s.size for s in self.neurons)

    @property
    def n_labels(self) -> int:
        return sum(p.size for p in self.ports)

    def local_offsets(self) -> dict[str, tuple[int, PopulationSlice]]:
        """population -> (local id of its first neuron, slice)."""
        out, off = {}, 0
        for s in self.neurons:
            out[s.population] = (off, s)
            off += s.size
        return out

    def port(self, source: str) -> InputPort | None:
        for p in self.ports:
            if p.source == source:
                return p
        return None


@dataclass(frozen=True)
class InterExecutionProjection:
    """Recorded spikes of ``source_slice`` in execution ``source`` replayed
    into port ``port_source`` of execution ``target``.

    ``translation`` holds runs ``(source_local_id, target_label, length)``.
    """

    source: str
    source_slice: PopulationSlice
    target: str
    port_source: str
    projections: tuple[str, ...]
    translation: tuple[tuple[int, int, int], ...]

    def mapping(self) -> dict[int, int]:
        return {s + k: d + k for s, d, n in self.translation for k in range(n)}


@dataclass
class ExecutionGraph:
    network: NetworkGraph
    executions: list[ExecutionInstance]
    edges: list[InterExecutionProjection]
    chip: ChipSpec = ChipSpec()
    round_to_power_of_two: bool = False

    def execution(self, eid: str) -> ExecutionInstance:
        for e in self.executions:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def edges_into(self, eid: str) -> list[InterExecutionProjection]:
        return [e for e in self.edges if e.target == eid]

    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(e.id for e in self.executions)
        g.add_edges_from((e.source, e.target) for e in self.edges)
        return g

    def owners(self, population: str) -> list[tuple[str, PopulationSlice, int]]:
        """(execution id, slice, local offset) for every slice of a population."""
        out = []
        for e in self.executions:
            offsets = e.local_offsets()
            if population in offsets:
                off, s = offsets[population]
                out.append((e.id, s, off))
        return sorted(out, key=lambda o: o[1].start)

    def with_network(self, network: NetworkGraph) -> ExecutionGraph:
        return dataclasses.replace(self, network=network)

    def with_backends(self, backends: Mapping[str, Backend]) -> ExecutionGraph:
        execs = [dataclasses.replace(e, backend=Backend(backends.get(e.id, e.backend))) for e in self.executions]
        return dataclasses.replace(self, executions=execs)


def split_layer(size: int, k: int) -> list[tuple[int, int]]:
    """k contiguous index ranges whose sizes differ by at most one."""
    if not 1 <= k <= size:
        raise PartitionError(f"split factor {k} out of range [1, {size}]")
    base, extra = divmod(size, k)
    bounds, start = [], 0
    for part in range(k):
        stop = start + base + (1 if part < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def needed_range(network: NetworkGraph, proj_id: str, start: int, stop: int) -> tuple[int, int]:
    """Range of pre indices read by post neurons [start, stop)."""
    proj = network.projection(proj_id)
    n_pre = network.source_size(proj.pre)
    if isinstance(proj.connectivity, ReceptiveField):
        idx = proj.connectivity.indices(n_pre)[start:stop]
        idx = idx[idx >= 0]
        if idx.size == 0:
            return (0, 0)
        return int(idx.min()), int(idx.max()) + 1
    return 0, n_pre


def neuron_groups(network: NetworkGraph, slices: Iterable[PopulationSlice]) -> list[NeuronGroup]:
    groups = []
    for s in slices:
        dense = sparse = 0
        for proj in network.afferents(s.population):
            fan = proj.connectivity.fan_in(network.source_size(proj.pre))
            if isinstance(proj.connectivity, ReceptiveField):
                sparse += fan
            else:
                dense += fan
        groups.append(NeuronGroup(s.size, dense, sparse))
    return groups


def build_plan(
    network: NetworkGraph,
    assignment: Sequence[tuple[str, Sequence[PopulationSlice], Backend]],
    chip: ChipSpec = ChipSpec(),
    round_to_power_of_two: bool = False,
    require_fit: bool = True,
) -> ExecutionGraph:
    """Derive afferent slices, input ports and inter-execution projections
    from an assignment of population slices to executions."""
    home: dict[str, str] = {}
    for eid, slices, _ in assignment:
        for s in slices:
            pop = network.population(s.population)
            if s.start == 0 and s.stop == pop.size:
                home[s.population] = eid
    order = {p.id: k for k, p in enumerate(network.projections)}
    executions = []
    for eid, slices, backend in assignment:
        proj_slices = []
        port_ranges: dict[str, list[int]] = {}
        for s in slices:
            for proj in sorted(network.afferents(s.population), key=lambda p: order[p.id]):
                proj_slices.append(ProjectionSlice(proj.id, s.start, s.stop))
                if home.get(proj.pre) == eid:
                    continue
                lo, hi = needed_range(network, proj.id, s.start, s.stop)
                if hi <= lo:
                    continue
                r = port_ranges.setdefault(proj.pre, [lo, hi])
                r[0], r[1] = min(r[0], lo), max(r[1], hi)
        ports, offset = [], 0
        for source, (lo, hi) in port_ranges.items():
            ports.append(InputPort(source, lo, hi, offset))
            offset += hi - lo
        fit = check_fit(neuron_groups(network, slices), chip, round_to_power_of_two)
        if require_fit and not fit.fits:
            raise PartitionError(f"execution {eid!r} does not fit the chip: {fit.violations}")
        executions.append(
            ExecutionInstance(eid, tuple(slices), tuple(proj_slices), tuple(ports), Backend(backend), fit)
        )
    plan = ExecutionGraph(network, executions, [], chip, round_to_power_of_two)
    for target in executions:
        for port in target.ports:
            if network.is_input(port.source):
                continue
            served = tuple(
                ps.projection for ps in target.projections if network.projection(ps.projection).pre == port.source
            )
            for src_id, s, local in plan.owners(port.source):
                if src_id == target.id:
                    raise PartitionError(
                        f"population {port.source!r} is split inside execution {target.id!r}"
                    )
                lo, hi = max(s.start, port.start), min(s.stop, port.stop)
                if hi <= lo:
                    continue
                run = (local + lo - s.start, port.offset + lo - port.start, hi - lo)
                plan.edges.append(
                    InterExecutionProjection(src_id, s, target.id, port.source, served, (run,))
                )
    _check_coverage(plan)
    if not nx.is_directed_acyclic_graph(plan.digraph()):
        raise PartitionError("recurrence crosses executions")
    return plan


def _check_coverage(plan: ExecutionGraph) -> None:
    for pop in plan.network.populations:
        covered = np.zeros(pop.size, dtype=int)
        for _, s, _ in plan.owners(pop.id):
            covered[s.start : s.stop] += 1
        for e in plan.executions:
            dup = [s for s in e.neurons if s.population == pop.id]
            if len(dup) > 1:
                raise PartitionError(f"population {pop.id!r} appears twice in {e.id!r}")
        if not np.all(covered == 1):
            raise PartitionError(f"population {pop.id!r} is not covered exactly once")


def assign_manual(
    graph: NetworkGraph, chip: ChipSpec = ChipSpec(), round_to_power_of_two: bool = False
) -> ExecutionGraph:
    """One execution per annotation class; projections live with their post
    population."""
    report = validate_graph(graph)
    if not report.clean:
        raise PartitionError("; ".join(report.lines()))
    classes: dict[str, list] = {}
    for pop in graph.populations:
        if pop.execution is None:
            raise PartitionError(f"population {pop.id!r} has no execution annotation")
        classes.setdefault(pop.execution, []).append(PopulationSlice(pop.id, 0, pop.size))
    for proj in graph.projections:
        post_exec = graph.population(proj.post).execution
        if proj.execution is not None and proj.execution != post_exec:
            raise PartitionError(
                f"projection {proj.id!r} annotated {proj.execution!r} but its post population runs in {post_exec!r}"
            )
    assignment = [(eid, slices, graph.executions.get(eid, Backend.REFERENCE)) for eid, slices in classes.items()]
    return build_plan(graph, assignment, chip, round_to_power_of_two)


def minimal_split(
    graph: NetworkGraph, pop_id: str, chip: ChipSpec, round_to_power_of_two: bool = False
) -> int:
    """Fewest contiguous parts such that every part fits one chip."""
    pop = graph.population(pop_id)
    try:
        c = circuits_required(graph.fan_in(pop_id), chip, round_to_power_of_two)
    except ChipError as exc:
        raise PartitionError(f"population {pop_id!r} requires fan-in reduction ({exc})") from exc
    k = max(1, -(-pop.size // neurons_per_execution(c, chip)))
    while k <= pop.size:
        parts = split_layer(pop.size, k)
        if all(
            check_fit(neuron_groups(graph, [PopulationSlice(pop_id, a, b)]), chip, round_to_power_of_two).fits
            for a, b in parts
        ):
            return k
        k += 1
    raise PartitionError(f"population {pop_id!r} requires fan-in reduction")


def partition_feedforward(
    graph: NetworkGraph,
    chip: ChipSpec = ChipSpec(),
    round_to_power_of_two: bool = False,
    split_factors: Mapping[str, int] | None = None,
    backends: Mapping[str, Backend | str] | None = None,
) -> ExecutionGraph:
    """Split every layer by neuron index into the fewest parts that fit.

    ``split_factors`` forces at least that many parts for a population;
    ``backends`` selects the backend per population. Recurrent components
    are kept whole in a single execution.
    """
    report = validate_graph(graph)
    if not report.clean:
        raise PartitionError("; ".join(report.lines()))
    split_factors = dict(split_factors or {})
    backends = dict(backends or {})
    recurrent = set(graph.recurrent_units())
    assignment = []
    for unit in graph.topological_units():
        if unit in recurrent:
            slices = [PopulationSlice(m, 0, graph.population(m).size) for m in unit]
            if any(split_factors.get(m, 1) > 1 for m in unit):
                raise PartitionError(f"recurrent component {unit} cannot be split")
            backend = backends.get(unit[0], Backend.REFERENCE)
            assignment.append((unit[0], slices, backend))
            continue
        (pop_id,) = unit
        pop = graph.population(pop_id)
        k = max(minimal_split(graph, pop_id, chip, round_to_power_of_two), split_factors.get(pop_id, 1))
        backend = backends.get(pop_id, Backend.REFERENCE)
        for part, (a, b) in enumerate(split_layer(pop.size, k)):
            eid = pop_id if k == 1 else f"{pop_id}.{part}"
            assignment.append((eid, [PopulationSlice(pop_id, a, b)], backend))
    return build_plan(graph, assignment, chip, round_to_power_of_two)


def monolithic_plan(graph: NetworkGraph) -> ExecutionGraph:
    """Whole network as one unconstrained execution (reference simulation)."""
    slices = [PopulationSlice(p.id, 0, p.size) for p in graph.populations]
    return build_plan(graph, [("all", slices, Backend.REFERENCE)], require_fit=False)
