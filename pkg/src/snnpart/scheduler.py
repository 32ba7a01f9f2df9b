"""Dependency-ordered dispatch of executions onto virtual chips, host-side
event record/translate/playback, and runtime estimation."""

from __future__ import annotations

import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping

import networkx as nx
import numpy as np

from .emulator import EmulatorConfig, EventStream, PartitionOutput, TraceTensor, run_partition
from .graph import NetworkGraph
from .partition import Backend, ExecutionGraph, ExecutionInstance, monolithic_plan


class SchedulerError(RuntimeError):
    pass


class ExecutionFailed(SchedulerError):
    def __init__(self, execution: str, cause: BaseException):
        super().__init__(f"execution {execution!r} failed: {cause}")
        self.execution = execution


@dataclass(frozen=True)
class Schedule:
    levels: tuple[tuple[str, ...], ...]
    chip_count: int = 1

    @property
    def depth(self) -> int:
        return len(self.levels)


def topological_levels(plan: ExecutionGraph) -> Schedule:
    """Longest-path layering of the execution DAG."""
    g = plan.digraph()
    if not nx.is_directed_acyclic_graph(g):
        raise SchedulerError("execution graph has a cycle")
    level: dict[str, int] = {}
    for node in nx.topological_sort(g):
        level[node] = max((level[p] + 1 for p in g.predecessors(node)), default=0)
    depth = max(level.values(), default=-1) + 1
    levels = tuple(tuple(sorted(n for n, lv in level.items() if lv == d)) for d in range(depth))
    return Schedule(levels)


@dataclass(frozen=True)
class RuntimeModel:
    """Hardware-time model; all times in microseconds."""

    batch_size: int = 100
    experiment_time: float = 30.0
    relax_wait: float = 50.0
    run_overhead: float = 0.0
    recording_overhead_per_sample: float = 0.0

    def __post_init__(self):
        for name in ("batch_size", "experiment_time", "relax_wait", "run_overhead", "recording_overhead_per_sample"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} >= 0 violated")

    @property
    def realtime_per_run(self) -> float:
        return self.batch_size * (self.experiment_time + self.relax_wait)


@dataclass(frozen=True)
class RuntimeEstimate:
    runs: int
    sequential_slots: int
    realtime_per_run: float
    experiment_per_run: float
    wait_per_run: float
    overhead_per_run: float

    @property
    def hardware_minimum(self) -> float:
        return self.sequential_slots * self.realtime_per_run

    @property
    def hardware_total(self) -> float:
        return self.sequential_slots * (self.realtime_per_run + self.overhead_per_run)

    def lines(self) -> list[str]:
        ms = 1e-3
        return [
            f"runs {self.runs}",
            f"sequential_slots {self.sequential_slots}",
            f"realtime_per_run_ms {self.realtime_per_run * ms:g}",
            f"experiment_per_run_ms {self.experiment_per_run * ms:g}",
            f"wait_per_run_ms {self.wait_per_run * ms:g}",
            f"overhead_per_run_ms {self.overhead_per_run * ms:g}",
            f"hardware_minimum_ms {self.hardware_minimum * ms:g}",
            f"hardware_total_ms {self.hardware_total * ms:g}",
        ]


def estimate_runtime(schedule: Schedule, model: RuntimeModel, chips: int = 1) -> RuntimeEstimate:
    if chips < 1:
        raise ValueError("chips >= 1 violated")
    slots = sum(-(-len(level) // chips) for level in schedule.levels)
    overhead = model.run_overhead + model.batch_size * model.recording_overhead_per_sample
    return RuntimeEstimate(
        runs=sum(len(level) for level in schedule.levels),
        sequential_slots=slots,
        realtime_per_run=model.realtime_per_run,
        experiment_per_run=model.batch_size * model.experiment_time,
        wait_per_run=model.batch_size * model.relax_wait,
        overhead_per_run=overhead,
    )


def translate_events(events: EventStream, mapping) -> EventStream:
    """Relabel event ids; times are preserved exactly.

    ``mapping`` is a dict or a lookup array with -1 for unmapped ids.
    """
    if isinstance(mapping, dict):
        size = max(max(mapping, default=-1), int(events.ids.max(initial=-1))) + 1
        table = np.full(size, -1, dtype=np.int64)
        for k, v in mapping.items():
            table[k] = v
    else:
        table = np.asarray(mapping, dtype=np.int64)
    ids = events.ids
    if ids.size and (ids.max() >= table.size or np.any(table[ids] < 0)):
        bad = ids[(ids >= table.size) | (table[np.minimum(ids, table.size - 1)] < 0)][0]
        raise SchedulerError(f"unmapped event id {bad}")
    return EventStream(events.times, table[ids] if ids.size else ids, events.duration, events.batch, events.batch_size)


def _run_translation(events: EventStream, runs) -> EventStream:
    parts = []
    for src, dst, n in runs:
        sel = events.select((events.ids >= src) & (events.ids < src + n))
        table = np.full(src + n, -1, dtype=np.int64)
        table[src:] = np.arange(dst, dst + n)
        parts.append(translate_events(sel, table))
    return EventStream.concatenate(parts, events.duration, events.batch_size)


@dataclass
class RunResults:
    plan: ExecutionGraph
    outputs: dict[str, PartitionOutput]
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def dropped(self) -> dict[str, int]:
        return {eid: out.dropped for eid, out in self.outputs.items()}

    def spikes(self, eid: str) -> EventStream:
        return self.outputs[eid].events()

    def traces(self, eid: str) -> TraceTensor:
        return self.outputs[eid].traces

    def _reassemble(self, population: str, attr: str) -> np.ndarray:
        parts = []
        for eid, s, off in self.plan.owners(population):
            out = self.outputs[eid]
            arr = out.spikes if attr == "spikes" else out.traces.values
            parts.append(arr[:, :, off : off + s.size])
        return np.concatenate(parts, axis=2)

    def population_spikes(self, population: str) -> np.ndarray:
        """(batch, steps, size) spikes reassembled by original neuron index."""
        return self._reassemble(population, "spikes")

    def population_traces(self, population: str) -> np.ndarray:
        return self._reassemble(population, "traces")


BackendFn = Callable[[ExecutionInstance, NetworkGraph, EventStream, EmulatorConfig, Mapping], PartitionOutput]


def _default_backend(execution, network, inputs, cfg, masks):
    return run_partition(execution, network, inputs, cfg, masks)


def orchestrate(
    plan: ExecutionGraph,
    inputs: Mapping[str, EventStream],
    cfg: EmulatorConfig,
    workers: int = 1,
    masks: Mapping[str, np.ndarray] | None = None,
    hardware_cfg: EmulatorConfig | None = None,
    backends: Mapping[str, BackendFn] | None = None,
    dispatch_seed: int | None = None,
) -> RunResults:
    """Run every execution once, level by level.

    ``inputs`` maps external input ids to event streams. Executions flagged
    ``emulated`` run with ``hardware_cfg`` (default: ``cfg`` with hardware
    fidelity). ``dispatch_seed`` shuffles the dispatch order within levels.
    """
    t0 = time.perf_counter()
    network = plan.network
    for inp in network.inputs:
        if inp.id not in inputs:
            raise SchedulerError(f"missing input stream {inp.id!r}")
    streams = list(inputs.values())
    batch_size = streams[0].batch_size if streams else 1
    if any(s.batch_size != batch_size for s in streams):
        raise SchedulerError("input streams disagree on batch size")
    hw_cfg = hardware_cfg or cfg.hardware()
    backends = dict(backends or {})
    schedule = topological_levels(plan)
    rng = random.Random(dispatch_seed)
    outputs: dict[str, PartitionOutput] = {}
    timing = {"event_encoding_ms": 0.0, "event_decoding_ms": 0.0, "emulation_ms": 0.0}
    recorded: dict[str, EventStream] = {}

    def assemble(execution: ExecutionInstance) -> EventStream:
        parts = []
        for port in execution.ports:
            if network.is_input(port.source):
                ev = inputs[port.source]
                sel = ev.select((ev.ids >= port.start) & (ev.ids < port.stop))
                parts.append(_run_translation(sel, [(port.start, port.offset, port.size)]))
        for edge in plan.edges_into(execution.id):
            parts.append(_run_translation(recorded[edge.source], edge.translation))
        return EventStream.concatenate(parts, cfg.duration, batch_size)

    def job(eid: str) -> tuple[PartitionOutput, float]:
        execution = plan.execution(eid)
        backend_cfg = hw_cfg if execution.backend is Backend.EMULATED else cfg
        fn = backends.get(execution.backend.value, _default_backend)
        try:
            t = time.perf_counter()
            events = assemble(execution)
            encode_ms = (time.perf_counter() - t) * 1e3
            return fn(execution, network, events, backend_cfg, masks or {}), encode_ms
        except Exception as exc:
            raise ExecutionFailed(eid, exc) from exc

    timing["host_compile_postprocess_ms"] = (time.perf_counter() - t0) * 1e3
    for level in schedule.levels:
        order = list(level)
        if dispatch_seed is not None:
            rng.shuffle(order)
        t1 = time.perf_counter()
        if workers > 1 and len(order) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                done = dict(zip(order, pool.map(job, order)))
        else:
            done = {eid: job(eid) for eid in order}
        t2 = time.perf_counter()
        encode_ms = sum(ms for _, ms in done.values())
        for eid in sorted(done):
            outputs[eid] = done[eid][0]
            recorded[eid] = outputs[eid].events()
        timing["event_encoding_ms"] += encode_ms
        timing["emulation_ms"] += max(0.0, (t2 - t1) * 1e3 - encode_ms)
        timing["event_decoding_ms"] += (time.perf_counter() - t2) * 1e3
    timing["total_ms"] = (time.perf_counter() - t0) * 1e3
    return RunResults(plan, dict(sorted(outputs.items())), timing)


def simulate(
    network: NetworkGraph,
    inputs: Mapping[str, EventStream],
    cfg: EmulatorConfig,
    masks: Mapping[str, np.ndarray] | None = None,
) -> RunResults:
    """Monolithic reference simulation of the whole network in one run."""
    return orchestrate(monolithic_plan(network), inputs, cfg, masks=masks)
