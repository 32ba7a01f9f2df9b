"""Deterministic fixed-grid LIF/LI backend standing in for one chip."""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import NetworkGraph, NeuronParams, ReceptiveField
from .partition import ExecutionInstance

# absorbs float error when mapping grid-aligned timestamps back to steps
_BIN_EPS = 1e-9


class EmulatorError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EventStream:
    """Timestamped spike events for a batch of independent trials.

    Events are sorted by (batch entry, time, id); ``batch`` holds the entry
    index of every event.
    """

    times: np.ndarray
    ids: np.ndarray
    duration: float
    batch: np.ndarray | None = None
    batch_size: int = 1

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        batch = (
            np.zeros(times.size, dtype=np.int64)
            if self.batch is None
            else np.asarray(self.batch, dtype=np.int64).reshape(-1)
        )
        if not (times.size == ids.size == batch.size):
            raise ValueError("times, ids and batch must have equal length")
        if times.size:
            if times.min() < 0 or times.max() >= self.duration:
                raise ValueError(f"event times must lie in [0, {self.duration})")
            if batch.min() < 0 or batch.max() >= self.batch_size:
                raise ValueError("batch index out of range")
        order = np.lexsort((ids, times, batch))
        if not np.all(order == np.arange(order.size)):
            times, ids, batch = times[order], ids[order], batch[order]
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "batch", batch)

    @classmethod
    def empty(cls, duration: float, batch_size: int = 1) -> EventStream:
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), duration, None, batch_size)

    @classmethod
    def from_pairs(cls, pairs, duration: float) -> EventStream:
        pairs = list(pairs)
        return cls([t for t, _ in pairs], [i for _, i in pairs], duration)

    @classmethod
    def from_grid(cls, spikes: np.ndarray, dt: float, duration: float) -> EventStream:
        """Events from a (batch, steps, n) spike-count array."""
        b, k, i = np.nonzero(spikes)
        counts = spikes[b, k, i].astype(np.int64)
        if np.any(counts > 1):
            b, k, i = np.repeat(b, counts), np.repeat(k, counts), np.repeat(i, counts)
        return cls(k * dt, i, duration, b, spikes.shape[0])

    @classmethod
    def concatenate(cls, streams, duration: float, batch_size: int) -> EventStream:
        streams = list(streams)
        if not streams:
            return cls.empty(duration, batch_size)
        return cls(
            np.concatenate([s.times for s in streams]),
            np.concatenate([s.ids for s in streams]),
            duration,
            np.concatenate([s.batch for s in streams]),
            batch_size,
        )

    def __len__(self) -> int:
        return self.times.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.duration == other.duration
            and self.batch_size == other.batch_size
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.batch, other.batch)
        )

    def select(self, mask: np.ndarray) -> EventStream:
        return EventStream(self.times[mask], self.ids[mask], self.duration, self.batch[mask], self.batch_size)

    def entry(self, b: int) -> EventStream:
        m = self.batch == b
        return EventStream(self.times[m], self.ids[m], self.duration)

    def steps(self, dt: float) -> np.ndarray:
        return np.floor(self.times / dt + _BIN_EPS).astype(np.int64)

    def to_grid(self, n: int, dt: float) -> np.ndarray:
        steps = int(round(self.duration / dt))
        grid = np.zeros((self.batch_size, steps, n))
        np.add.at(grid, (self.batch, self.steps(dt), self.ids), 1.0)
        return grid


@dataclass(frozen=True, eq=False)
class TraceTensor:
    values: np.ndarray  # [batch, steps, neurons]
    dt: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceTensor):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class EmulatorConfig:
    """Grid and hardware-fidelity settings.

    ``events_per_cycle=None`` disables the input bandwidth model.
    ``cycles_per_dt=None`` derives it from ``clock_mhz``.
    """

    dt: float = 1.0
    duration: float = 30.0
    hardware_fidelity: bool = False
    weight_scale: float = 63.0
    weight_bits: int = 6
    trace_scale: float = 100.0
    trace_clip: tuple[float, float] = (-512.0, 511.0)
    events_per_cycle: int | None = None
    cycles_per_dt: float | None = None
    buffer_len: int = 16
    clock_mhz: float = 250.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt > 0 violated")
        if not self.weight_scale > 0:
            raise ValueError("weight_scale > 0 violated")
        if abs(self.duration / self.dt - round(self.duration / self.dt)) > 1e-9:
            raise ValueError("duration must be a multiple of dt")
        if self.trace_clip[0] > self.trace_clip[1]:
            raise ValueError("trace_clip lo <= hi violated")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def cycles_per_step(self) -> float:
        return self.cycles_per_dt if self.cycles_per_dt is not None else self.dt * self.clock_mhz

    def hardware(self, events_per_cycle: int = 2, buffer_len: int | None = None) -> EmulatorConfig:
        return dataclasses.replace(
            self,
            hardware_fidelity=True,
            events_per_cycle=events_per_cycle,
            buffer_len=self.buffer_len if buffer_len is None else buffer_len,
        )


def quantize_weights(w, cfg: EmulatorConfig) -> np.ndarray:
    lim = 2**cfg.weight_bits - 1
    return np.clip(np.rint(np.asarray(w, dtype=np.float64) * cfg.weight_scale), -lim, lim).astype(np.int64)


def clip_traces(traces: TraceTensor, cfg: EmulatorConfig) -> TraceTensor:
    lo, hi = cfg.trace_clip
    hw = np.clip(traces.values * cfg.trace_scale, lo, hi)
    return TraceTensor(hw / cfg.trace_scale, traces.dt)


def apply_bandwidth(inputs: EventStream, cfg: EmulatorConfig) -> tuple[EventStream, int]:
    """Serve at most ``events_per_cycle`` events per FPGA clock cycle.

    Excess events wait in a FIFO of ``buffer_len`` entries and are sent in
    following cycles; events that find the FIFO full are dropped, as are
    delayed events pushed past the end of the trial.
    """
    cap = cfg.events_per_cycle
    if cap is None or len(inputs) == 0:
        return inputs, 0
    per_us = cfg.cycles_per_step / cfg.dt
    cycles = np.floor(inputs.times * per_us + _BIN_EPS).astype(np.int64)
    out_t, out_i, out_b = [], [], []
    dropped = 0
    for b in range(inputs.batch_size):
        sel = np.flatnonzero(inputs.batch == b)
        if sel.size == 0:
            continue
        queue: deque[int] = deque()
        cur = None
        delivered: list[tuple[float, int]] = []

        def serve(cycle, pending):
            for e in pending[:cap]:
                t = inputs.times[e] if cycles[e] == cycle else cycle / per_us
                delivered.append((t, e))
            return pending[cap:]

        groups = np.split(sel, np.flatnonzero(np.diff(cycles[sel])) + 1)
        for grp in groups:
            c = int(cycles[grp[0]])
            while queue and cur < c:
                rest = serve(cur, list(queue))
                queue = deque(rest)
                cur += 1
            rest = serve(c, list(queue) + list(grp))
            queue = deque(rest[: cfg.buffer_len])
            dropped += len(rest) - len(queue)
            cur = c + 1
        while queue:
            queue = deque(serve(cur, list(queue)))
            cur += 1
        for t, e in delivered:
            if t < inputs.duration:
                out_t.append(t)
                out_i.append(inputs.ids[e])
                out_b.append(b)
            else:
                dropped += 1
    out = EventStream(np.array(out_t), np.array(out_i, dtype=np.int64), inputs.duration, np.array(out_b, dtype=np.int64), inputs.batch_size)
    return out, dropped


@dataclass
class PartitionOutput:
    """Observables of one execution, indexed by local neuron id."""

    spikes: np.ndarray  # [batch, steps, n] in {0, 1}
    traces: TraceTensor
    dropped: int = 0
    duration: float = 0.0

    def events(self) -> EventStream:
        return EventStream.from_grid(self.spikes, self.traces.dt, self.duration)


def _decays(params: NeuronParams, dt: float) -> tuple[float, float]:
    return float(np.exp(-dt / params.tau_syn)), float(np.exp(-dt / params.tau_mem))


class NeuronState:
    """Per-population integration state for one batch."""

    def __init__(self, params: NeuronParams, dt: float, batch: int, n: int):
        self.params, self.dt = params, dt
        self.a, self.b = _decays(params, dt)
        self.i = np.zeros((batch, n))
        self.v = np.full((batch, n), params.v_leak)
        self.s = np.zeros((batch, n))
        self.ref = np.zeros((batch, n), dtype=np.int64)
        self.ref_steps = int(round(params.refractory / dt)) if params.spiking else 0

    def step(self, xk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        self.i = self.i * self.a + xk
        u = p.v_leak + (self.v - p.v_leak) * self.b + self.i * self.dt
        if not p.spiking:
            self.v = u
            return self.s, u
        refr = self.ref > 0
        fire = (u >= p.v_thresh) & ~refr
        self.s = fire.astype(np.float64)
        trace = np.where(refr, p.v_reset, u)
        self.v = np.where(fire | refr, p.v_reset, u)
        self.ref = np.where(fire, self.ref_steps, np.where(refr, self.ref - 1, 0))
        return self.s, trace


def integrate(x: np.ndarray, params: NeuronParams, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exponential-Euler integration of one population.

    ``x`` is the synaptic input per step, shape (batch, steps, n). Returns
    ``(spikes, traces)``; traces hold the membrane after integration and
    before reset, clamped to ``v_reset`` while refractory.
    """
    B, steps, n = x.shape
    state = NeuronState(params, dt, B, n)
    spikes = np.zeros((B, steps, n))
    traces = np.empty((B, steps, n))
    for k in range(steps):
        spikes[:, k], traces[:, k] = state.step(x[:, k])
    return spikes, traces


def _effective_weights(w: np.ndarray, cfg: EmulatorConfig) -> np.ndarray:
    if cfg.hardware_fidelity:
        return quantize_weights(w, cfg) / cfg.weight_scale
    return w


def accumulate(out, proj, weights, b, k, pre, post_start, post_stop, n_pre) -> None:
    """Add the synaptic input of events (b, k, pre) into ``out`` in place.

    Events must be sorted by (b, k, pre); every output element then is a
    sequential sum over increasing pre index, independent of how the post
    population is sliced.
    """
    if b.size == 0:
        return
    if isinstance(proj.connectivity, ReceptiveField):
        posts, slots, pres = _rf_targets(proj.connectivity, n_pre, post_start, post_stop)
        lo = np.searchsorted(pres, pre, side="left")
        counts = np.searchsorted(pres, pre, side="right") - lo
        total = int(counts.sum())
        if total == 0:
            return
        ev = np.repeat(np.arange(pre.size), counts)
        first = np.cumsum(counts) - counts
        sel = np.repeat(lo, counts) + np.arange(total) - np.repeat(first, counts)
        p = posts[sel]
        np.add.at(out, (b[ev], k[ev], p), weights[p + post_start, slots[sel]])
    else:
        np.add.at(out, (b, k), weights[pre, post_start:post_stop])


def _rf_targets(rf: ReceptiveField, n_pre: int, start: int, stop: int):
    """(local post, slot, pre) triples sorted by pre, then post."""
    idx = rf.indices(n_pre)[start:stop]
    posts, slots = np.nonzero(idx >= 0)
    pres = idx[posts, slots]
    order = np.lexsort((posts, pres))
    return posts[order], slots[order], pres[order]


def _sorted_events(b, k, pre):
    order = np.lexsort((pre, k, b))
    return b[order], k[order], pre[order]


def _masked(b, k, pre, mask):
    if mask is None or b.size == 0:
        return b, k, pre
    keep = np.asarray(mask)[b, pre] != 0
    return b[keep], k[keep], pre[keep]


def run_partition(
    execution: ExecutionInstance,
    network: NetworkGraph,
    inputs: EventStream,
    cfg: EmulatorConfig,
    masks: Mapping[str, np.ndarray] | None = None,
) -> PartitionOutput:
    """Emulate one execution for every batch entry of ``inputs``.

    ``inputs`` carries port labels of the execution. ``masks`` maps a source
    population to a (batch, size) array; events of masked-out neurons are
    not delivered to any projection.
    """
    steps, dt, B = cfg.steps, cfg.dt, inputs.batch_size
    if inputs.duration != cfg.duration:
        raise EmulatorError(f"input duration {inputs.duration} != configured {cfg.duration}")
    masks = masks or {}
    if len(inputs) and (inputs.ids.min() < 0 or inputs.ids.max() >= execution.n_labels):
        bad = inputs.ids[(inputs.ids < 0) | (inputs.ids >= execution.n_labels)][0]
        raise EmulatorError(f"unknown source id {bad} in execution {execution.id!r}")
    dropped = 0
    if cfg.events_per_cycle is not None:
        inputs, dropped = apply_bandwidth(inputs, cfg)
    in_steps = inputs.steps(dt)

    sources = {}
    for port in execution.ports:
        m = (inputs.ids >= port.offset) & (inputs.ids < port.offset + port.size)
        ev = _sorted_events(inputs.batch[m], in_steps[m], inputs.ids[m] - port.offset + port.start)
        sources[port.source] = _masked(*ev, masks.get(port.source))

    local = {s.population: s for s in execution.neurons}
    afferent: dict[str, list] = {}
    for ps in execution.projections:
        afferent.setdefault(network.projection(ps.projection).post, []).append(ps)
    results: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    empty = (np.zeros(0, dtype=np.int64),) * 3

    for unit in network.topological_units():
        unit = [m for m in unit if m in local]
        if not unit:
            continue
        xs, recurrent = {}, {}
        for pop_id in unit:
            s = local[pop_id]
            x = np.zeros((B, steps, s.size))
            for ps in afferent.get(pop_id, []):
                proj = network.projection(ps.projection)
                w = _effective_weights(proj.weights, cfg)
                n_pre = network.source_size(proj.pre)
                if proj.pre in unit:
                    recurrent.setdefault(pop_id, []).append((proj, w, n_pre, ps))
                    continue
                if proj.pre in local:
                    b, k, pre = _masked(*np.nonzero(results[proj.pre][0]), masks.get(proj.pre))
                else:
                    b, k, pre = sources.get(proj.pre, empty)
                accumulate(x, proj, w, b, k, pre, ps.start, ps.stop, n_pre)
            xs[pop_id] = x
        if recurrent:
            _integrate_recurrent(unit, xs, recurrent, network, local, masks, dt, results)
        else:
            for pop_id in unit:
                results[pop_id] = integrate(xs[pop_id], network.population(pop_id).params, dt)
        for pop_id in unit:
            if not np.all(np.isfinite(results[pop_id][1])):
                raise EmulatorError(f"non-finite membrane in population {pop_id!r} of execution {execution.id!r}")

    spikes = np.concatenate([results[s.population][0] for s in execution.neurons], axis=2)
    traces = np.concatenate([results[s.population][1] for s in execution.neurons], axis=2)
    trace_tensor = TraceTensor(traces, dt)
    if cfg.hardware_fidelity:
        trace_tensor = clip_traces(trace_tensor, cfg)
    return PartitionOutput(spikes, trace_tensor, dropped, cfg.duration)


def _integrate_recurrent(unit, xs, recurrent, network, local, masks, dt, results):
    # recurrent projections deliver the previous step's spikes
    B, steps = next(iter(xs.values())).shape[:2]
    states = {m: NeuronState(network.population(m).params, dt, B, local[m].size) for m in unit}
    spikes = {m: np.zeros((B, steps, local[m].size)) for m in unit}
    traces = {m: np.empty((B, steps, local[m].size)) for m in unit}
    for k in range(steps):
        prev = {m: states[m].s for m in unit}
        for m in unit:
            xk = xs[m][:, k]
            if m in recurrent:
                extra = np.zeros((B, 1, local[m].size))
                for proj, w, n_pre, ps in recurrent[m]:
                    b, pre = np.nonzero(prev[proj.pre])
                    b, kk, pre = _masked(b, np.zeros_like(b), pre, masks.get(proj.pre))
                    accumulate(extra, proj, w, b, kk, pre, ps.start, ps.stop, n_pre)
                xk = xk + extra[:, 0]
            spikes[m][:, k], traces[m][:, k] = states[m].step(xk)
    for m in unit:
        results[m] = (spikes[m], traces[m])
