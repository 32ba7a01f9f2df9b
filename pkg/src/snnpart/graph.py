"""Declarative description of a spiking network: populations, projections
and optional execution-instance annotations."""

from __future__ import annotations

import dataclasses
import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Iterable

import networkx as nx
import numpy as np


class GraphError(ValueError):
    pass


class NeuronKind(str, enum.Enum):
    LIF = "LIF"
    LI = "LI"


@dataclass(frozen=True)
class NeuronParams:
    """Neuron parameters in model units, times in microseconds."""

    kind: NeuronKind = NeuronKind.LIF
    tau_mem: float = 6.0
    tau_syn: float = 5.7
    v_leak: float = 0.0
    v_reset: float | None = 0.0
    v_thresh: float | None = 1.0
    refractory: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NeuronKind(self.kind))
        if not self.tau_mem > 0:
            raise GraphError("tau_mem > 0 violated")
        if not self.tau_syn > 0:
            raise GraphError("tau_syn > 0 violated")
        if not self.refractory >= 0:
            raise GraphError("refractory >= 0 violated")
        if self.kind is NeuronKind.LIF:
            if self.v_thresh is None or self.v_reset is None:
                raise GraphError("LIF requires v_thresh and v_reset")
            if not self.v_thresh > self.v_reset:
                raise GraphError("LIF requires v_thresh > v_reset")
        else:
            if self.v_thresh is not None or self.refractory != 0:
                raise GraphError("LI has no threshold/reset/refractory")

    @classmethod
    def lif(cls, **kw) -> NeuronParams:
        return cls(kind=NeuronKind.LIF, **kw)

    @classmethod
    def li(cls, **kw) -> NeuronParams:
        kw.setdefault("v_reset", None)
        return cls(kind=NeuronKind.LI, v_thresh=None, **kw)

    @property
    def spiking(self) -> bool:
        return self.kind is NeuronKind.LIF


@dataclass(frozen=True)
class Dense:
    kind = "dense"

    def post_size(self, n_pre: int) -> int | None:
        return None

    def fan_in(self, n_pre: int) -> int:
        return n_pre

    def weight_shape(self, n_pre: int, n_post: int) -> tuple[int, int]:
        return (n_pre, n_post)


@dataclass(frozen=True)
class ReceptiveField:
    """Locally connected projection over an HWC-ordered image.

    Every post neuron owns an unshared kernel of ``kernel_h * kernel_w *
    channels`` weights; weights have shape ``(n_post, fan_in)``. The output
    grid covers the whole input, padding evenly where the stride does not
    tile it. Padded slots count towards the fan-in but carry no source.
    """

    kernel_h: int
    kernel_w: int
    channels: int
    stride: int
    in_h: int | None = None
    in_w: int | None = None

    kind = "receptive_field"

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "channels", "stride"):
            if getattr(self, name) < 1:
                raise GraphError(f"receptive field {name} >= 1 violated")

    def geometry(self, n_pre: int) -> tuple[int, int]:
        if n_pre % self.channels:
            raise GraphError(f"input size {n_pre} not divisible by {self.channels} channels")
        pixels = n_pre // self.channels
        h, w = self.in_h, self.in_w
        if h is None and w is None:
            side = math.isqrt(pixels)
            if side * side != pixels:
                raise GraphError("non-square input needs in_h/in_w")
            h = w = side
        elif h is None:
            h = pixels // w
        elif w is None:
            w = pixels // h
        if h * w != pixels:
            raise GraphError(f"input geometry {h}x{w}x{self.channels} != {n_pre}")
        return h, w

    def out_shape(self, n_pre: int) -> tuple[int, int]:
        h, w = self.geometry(n_pre)
        out_h = max(1, -(-(h - self.kernel_h) // self.stride) + 1)
        out_w = max(1, -(-(w - self.kernel_w) // self.stride) + 1)
        return out_h, out_w

    def post_size(self, n_pre: int) -> int:
        out_h, out_w = self.out_shape(n_pre)
        return out_h * out_w

    def fan_in(self, n_pre: int) -> int:
        return self.kernel_h * self.kernel_w * self.channels

    def weight_shape(self, n_pre: int, n_post: int) -> tuple[int, int]:
        return (n_post, self.fan_in(n_pre))

    def indices(self, n_pre: int) -> np.ndarray:
        """(n_post, fan_in) table of pre indices, -1 marks padding."""
        return _rf_indices(self, n_pre)


@functools.lru_cache(maxsize=64)
def _rf_indices(rf: ReceptiveField, n_pre: int) -> np.ndarray:
    h, w = rf.geometry(n_pre)
    out_h, out_w = rf.out_shape(n_pre)
    pad_y = ((out_h - 1) * rf.stride + rf.kernel_h - h) // 2
    pad_x = ((out_w - 1) * rf.stride + rf.kernel_w - w) // 2
    oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    ky, kx, c = np.meshgrid(
        np.arange(rf.kernel_h), np.arange(rf.kernel_w), np.arange(rf.channels), indexing="ij"
    )
    y = oy.reshape(-1, 1) * rf.stride - pad_y + ky.reshape(1, -1)
    x = ox.reshape(-1, 1) * rf.stride - pad_x + kx.reshape(1, -1)
    valid = (y >= 0) & (y < h) & (x >= 0) & (x < w)
    idx = np.where(valid, (y * w + x) * rf.channels + c.reshape(1, -1), -1)
    idx.setflags(write=False)
    return idx


Connectivity = Dense | ReceptiveField


@dataclass(frozen=True)
class Population:
    id: str
    size: int
    params: NeuronParams
    execution: str | None = None

    def __post_init__(self):
        if self.size < 1:
            raise GraphError("size >= 1 violated")


@dataclass(frozen=True, eq=False)
class Projection:
    id: str
    pre: str
    post: str
    connectivity: Connectivity
    weights: np.ndarray
    execution: str | None = None

    def with_weights(self, weights: np.ndarray) -> Projection:
        return dataclasses.replace(self, weights=np.asarray(weights, dtype=np.float64))


@dataclass(frozen=True)
class ExternalInput:
    id: str
    size: int


@dataclass
class NetworkGraph:
    """Append-only container; treat as immutable once built."""

    populations: list[Population] = field(default_factory=list)
    projections: list[Projection] = field(default_factory=list)
    inputs: list[ExternalInput] = field(default_factory=list)
    executions: dict[str, str] = field(default_factory=dict)  # id -> backend

    def population(self, pid: str) -> Population:
        for p in self.populations:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def projection(self, pid: str) -> Projection:
        for p in self.projections:
            if p.id == pid:
                return p
        raise KeyError(pid)

    def source_size(self, sid: str) -> int:
        for i in self.inputs:
            if i.id == sid:
                return i.size
        return self.population(sid).size

    def is_input(self, sid: str) -> bool:
        return any(i.id == sid for i in self.inputs)

    def afferents(self, pid: str) -> list[Projection]:
        return [p for p in self.projections if p.post == pid]

    def fan_in(self, pid: str) -> int:
        return sum(p.connectivity.fan_in(self.source_size(p.pre)) for p in self.afferents(pid))

    def with_weights(self, weights: dict[str, np.ndarray]) -> NetworkGraph:
        projs = [p.with_weights(weights[p.id]) if p.id in weights else p for p in self.projections]
        return NetworkGraph(list(self.populations), projs, list(self.inputs), dict(self.executions))

    def weights(self) -> dict[str, np.ndarray]:
        return {p.id: p.weights for p in self.projections}

    def population_digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(p.id for p in self.populations)
        for proj in self.projections:
            if not self.is_input(proj.pre):
                g.add_edge(proj.pre, proj.post)
        return g

    def topological_units(self) -> list[tuple[str, ...]]:
        """Strongly connected components in dependency order, members in
        declaration order."""
        g = self.population_digraph()
        cond = nx.condensation(g)
        order = {p.id: k for k, p in enumerate(self.populations)}
        units = []
        for c in nx.lexicographical_topological_sort(
            cond, key=lambda c: min(order[m] for m in cond.nodes[c]["members"])
        ):
            units.append(tuple(sorted(cond.nodes[c]["members"], key=order.__getitem__)))
        return units

    def recurrent_units(self) -> list[tuple[str, ...]]:
        g = self.population_digraph()
        return [u for u in self.topological_units() if len(u) > 1 or g.has_edge(u[0], u[0])]


def _next_id(prefix: str, taken: Iterable[str]) -> str:
    taken = set(taken)
    k = 1
    while f"{prefix}{k}" in taken:
        k += 1
    return f"{prefix}{k}"


def add_input(graph: NetworkGraph, size: int, id: str | None = None) -> str:
    if size < 1:
        raise GraphError("size >= 1 violated")
    iid = id or _next_id("in", _all_ids(graph))
    if iid in _all_ids(graph):
        raise GraphError(f"duplicate id {iid!r}")
    graph.inputs.append(ExternalInput(iid, size))
    return iid


def add_population(
    graph: NetworkGraph,
    size: int,
    params: NeuronParams,
    execution: str | None = None,
    id: str | None = None,
) -> str:
    pid = id or _next_id("p", _all_ids(graph))
    if pid in _all_ids(graph):
        raise GraphError(f"duplicate id {pid!r}")
    graph.populations.append(Population(pid, size, params, execution))
    return pid


def add_projection(
    graph: NetworkGraph,
    pre: str,
    post: str,
    connectivity: Connectivity,
    weights,
    execution: str | None = None,
    id: str | None = None,
) -> str:
    ids = {p.id for p in graph.populations} | {i.id for i in graph.inputs}
    if pre not in ids:
        raise GraphError(f"unknown endpoint {pre!r}")
    if post not in {p.id for p in graph.populations}:
        raise GraphError(f"unknown endpoint {post!r}")
    n_pre, n_post = graph.source_size(pre), graph.population(post).size
    expected_post = connectivity.post_size(n_pre)
    if expected_post is not None and expected_post != n_post:
        raise GraphError(f"receptive field yields {expected_post} post neurons, population has {n_post}")
    weights = np.array(weights, dtype=np.float64)
    shape = connectivity.weight_shape(n_pre, n_post)
    if weights.shape != shape:
        raise GraphError(f"weight shape mismatch: expected {shape}, got {weights.shape}")
    jid = id or _next_id("s", _all_ids(graph))
    if jid in _all_ids(graph):
        raise GraphError(f"duplicate id {jid!r}")
    graph.projections.append(Projection(jid, pre, post, connectivity, weights, execution))
    return jid


def _all_ids(graph: NetworkGraph) -> set[str]:
    return (
        {p.id for p in graph.populations}
        | {p.id for p in graph.projections}
        | {i.id for i in graph.inputs}
    )


@dataclass
class ValidationReport:
    recurrence_violations: list[tuple[str, ...]] = field(default_factory=list)
    dangling: list[str] = field(default_factory=list)
    duplicates: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.recurrence_violations or self.dangling or self.duplicates)

    def lines(self) -> list[str]:
        out = [f"recurrence spans executions: {', '.join(c)}" for c in self.recurrence_violations]
        out += [f"dangling reference: {d}" for d in self.dangling]
        out += [f"duplicate id: {d}" for d in self.duplicates]
        return out


def validate_graph(graph: NetworkGraph) -> ValidationReport:
    report = ValidationReport()
    seen: set[str] = set()
    for eid in [p.id for p in graph.populations] + [i.id for i in graph.inputs] + [
        p.id for p in graph.projections
    ]:
        if eid in seen:
            report.duplicates.append(eid)
        seen.add(eid)
    pops = {p.id for p in graph.populations}
    sources = pops | {i.id for i in graph.inputs}
    for proj in graph.projections:
        if proj.pre not in sources:
            report.dangling.append(f"{proj.id}.pre={proj.pre}")
        if proj.post not in pops:
            report.dangling.append(f"{proj.id}.post={proj.post}")
    if report.dangling:
        return report
    by_id = {p.id: p for p in graph.populations}
    for unit in graph.recurrent_units():
        labels = {by_id[m].execution for m in unit} - {None}
        if len(labels) > 1:
            report.recurrence_violations.append(unit)
    return report
