"""File formats: binary tensors, event files, IDX, and YAML network, chip
and plan descriptions."""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .chip import ChipSpec
from .emulator import EventStream
from .graph import (
    Dense,
    ExternalInput,
    NetworkGraph,
    NeuronParams,
    Population,
    Projection,
    ReceptiveField,
    add_input,
    add_population,
    add_projection,
)
from .partition import Backend, ExecutionGraph, PopulationSlice, build_plan


class FormatError(ValueError):
    """Malformed file content."""


TENSOR_MAGIC = b"CSPT"


def tensor_to_bytes(array) -> bytes:
    a = np.asarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + a.tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    if len(data) < 8:
        raise FormatError("truncated tensor header at byte offset 4")
    (rank,) = struct.unpack_from("<I", data, 4)
    end = 8 + 4 * rank
    if len(data) < end:
        raise FormatError(f"truncated tensor header at byte offset {len(data)}")
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    need = end + 4 * int(np.prod(shape, dtype=np.int64))
    if len(data) != need:
        raise FormatError(f"tensor payload ends at byte offset {len(data)}, expected {need}")
    return np.frombuffer(data, dtype="<f4", offset=end).reshape(shape).astype(np.float32)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def format_events(events: EventStream) -> str:
    """Tab-separated ``time id`` lines after a ``#duration_us`` header.

    Streams with more than one batch entry add ``#batch_size`` and start
    every entry with an ``#entry k`` line.
    """
    lines = [f"#duration_us {events.duration!r}"]
    batched = events.batch_size > 1
    if batched:
        lines.append(f"#batch_size {events.batch_size}")
    cur = -1
    for t, i, b in zip(events.times.tolist(), events.ids.tolist(), events.batch.tolist()):
        if batched:
            while cur < b:
                cur += 1
                lines.append(f"#entry {cur}")
        lines.append(f"{t!r}\t{i}")
    if batched:
        while cur < events.batch_size - 1:
            cur += 1
            lines.append(f"#entry {cur}")
    return "\n".join(lines) + "\n"


def parse_events(text: str) -> EventStream:
    duration = None
    batch_size, entry = 1, 0
    times, ids, batch = [], [], []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith("#"):
                key, _, value = line[1:].partition(" ")
                if key == "duration_us":
                    duration = float(value)
                elif key == "batch_size":
                    batch_size = int(value)
                elif key == "entry":
                    entry = int(value)
                continue
            t, i = line.split("\t")
            times.append(float(t))
            ids.append(int(i))
            batch.append(entry)
        except ValueError as exc:
            raise FormatError(f"line {n}: {exc}") from exc
    if duration is None:
        raise FormatError("missing #duration_us header")
    try:
        return EventStream(times, ids, duration, batch, batch_size)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_events(path, events: EventStream) -> None:
    Path(path).write_text(format_events(events))


def read_events(path) -> EventStream:
    return parse_events(Path(path).read_text())


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def parse_idx(data: bytes, scale: bool = True) -> np.ndarray:
    """Decode IDX bytes. Unsigned-byte data with two or more dimensions is
    scaled to [0, 1]; label vectors are returned as integers."""
    if len(data) < 4:
        raise FormatError(f"truncated IDX header at byte offset {len(data)}")
    if data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise FormatError("bad IDX magic")
    dtype = np.dtype(_IDX_TYPES[data[2]])
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"truncated IDX header at byte offset {len(data)}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    count = int(np.prod(dims, dtype=np.int64))
    need = header + dtype.itemsize * count
    if len(data) < need:
        raise FormatError(f"truncated IDX payload at byte offset {len(data)}, expected {need} bytes")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)
    if scale and dtype == np.dtype(">u1") and ndim >= 2:
        return arr.astype(np.float64) / 255.0
    if dtype.kind in "ui":
        return arr.astype(np.int64)
    return arr.astype(np.float64)


def load_idx(path, scale: bool = True) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw, scale)


# ---- declarative configs -------------------------------------------------


def _params_to_dict(p: NeuronParams) -> dict:
    d = {"kind": p.kind.value, "tau_mem": p.tau_mem, "tau_syn": p.tau_syn, "v_leak": p.v_leak}
    if p.spiking:
        d.update(v_reset=p.v_reset, v_thresh=p.v_thresh, refractory=p.refractory)
    return d


def _params_from_dict(d: Mapping) -> NeuronParams:
    d = dict(d)
    kind = d.pop("kind", "LIF")
    return NeuronParams.lif(**d) if kind == "LIF" else NeuronParams.li(**d)


def _conn_to_dict(c) -> dict:
    if isinstance(c, ReceptiveField):
        d = {"type": "receptive_field", "kernel": [c.kernel_h, c.kernel_w], "channels": c.channels, "stride": c.stride}
        if c.in_h is not None:
            d["input_hw"] = [c.in_h, c.in_w]
        return d
    return {"type": "dense"}


def _conn_from_dict(d: Mapping):
    kind = d.get("type", "dense")
    if kind == "dense":
        return Dense()
    if kind == "receptive_field":
        hw = d.get("input_hw") or [None, None]
        return ReceptiveField(int(d["kernel"][0]), int(d["kernel"][1]), int(d["channels"]), int(d["stride"]), hw[0], hw[1])
    raise FormatError(f"unknown connectivity {kind!r}")


def _weights_from_entry(entry, shape, base: Path) -> np.ndarray:
    if isinstance(entry, list):
        return np.asarray(entry, dtype=np.float64).reshape(shape)
    if isinstance(entry, Mapping):
        if "file" in entry:
            return read_tensor(base / entry["file"]).astype(np.float64)
        init = entry.get("init")
        if init == "zeros":
            return np.zeros(shape)
        if init == "normal":
            rng = np.random.default_rng(entry.get("seed", 0))
            return rng.normal(entry.get("mean", 0.0), entry.get("std", 1.0), size=shape)
    raise FormatError(f"unrecognized weight entry {entry!r}")


def network_to_dict(graph: NetworkGraph, sidecar_dir: Path | None = None) -> dict:
    """Plain-data description; weights inline unless ``sidecar_dir`` is
    given, in which case they go to ``<projection>.cspt`` files there."""
    projections = []
    for p in graph.projections:
        if sidecar_dir is None:
            weights: Any = p.weights.tolist()
        else:
            write_tensor(Path(sidecar_dir) / f"{p.id}.cspt", p.weights)
            weights = {"file": f"{p.id}.cspt"}
        entry = {"id": p.id, "pre": p.pre, "post": p.post, "connectivity": _conn_to_dict(p.connectivity), "weights": weights}
        if p.execution is not None:
            entry["execution"] = p.execution
        projections.append(entry)
    populations = []
    for p in graph.populations:
        entry = {"id": p.id, "size": p.size, "params": _params_to_dict(p.params)}
        if p.execution is not None:
            entry["execution"] = p.execution
        populations.append(entry)
    return {
        "inputs": [{"id": i.id, "size": i.size} for i in graph.inputs],
        "populations": populations,
        "projections": projections,
        "executions": {k: Backend(v).value for k, v in graph.executions.items()},
    }


def network_from_dict(d: Mapping, base: Path | str = ".") -> NetworkGraph:
    base = Path(base)
    g = NetworkGraph()
    try:
        for i in d.get("inputs", []):
            add_input(g, int(i["size"]), i["id"])
        for p in d.get("populations", []):
            add_population(g, int(p["size"]), _params_from_dict(p.get("params", {})), p.get("execution"), p["id"])
        for p in d.get("projections", []):
            conn = _conn_from_dict(p.get("connectivity", {}))
            n_pre = g.source_size(p["pre"])
            n_post = g.population(p["post"]).size
            w = _weights_from_entry(p["weights"], conn.weight_shape(n_pre, n_post), base)
            add_projection(g, p["pre"], p["post"], conn, w, p.get("execution"), p["id"])
    except KeyError as exc:
        raise FormatError(f"missing key or unknown reference {exc}") from exc
    g.executions.update({k: Backend(v) for k, v in (d.get("executions") or {}).items()})
    return g


def chip_to_dict(chip: ChipSpec) -> dict:
    return dataclasses.asdict(chip)


def chip_from_dict(d: Mapping | None) -> ChipSpec:
    d = dict(d or {})
    unknown = set(d) - {f.name for f in dataclasses.fields(ChipSpec)}
    if unknown:
        raise FormatError(f"unknown chip fields {sorted(unknown)}")
    return ChipSpec(**d)


def plan_to_dict(plan: ExecutionGraph, sidecar_dir: Path | None = None) -> dict:
    execs = []
    for e in plan.executions:
        entry = {
            "id": e.id,
            "backend": e.backend.value,
            "neurons": [[s.population, s.start, s.stop] for s in e.neurons],
            "ports": [[p.source, p.start, p.stop, p.offset] for p in e.ports],
        }
        if e.resources is not None:
            entry["resources"] = e.resources.summary()
        execs.append(entry)
    edges = [
        {
            "source": ed.source,
            "target": ed.target,
            "source_slice": [ed.source_slice.population, ed.source_slice.start, ed.source_slice.stop],
            "port": ed.port_source,
            "projections": list(ed.projections),
            "translation": [list(r) for r in ed.translation],
        }
        for ed in plan.edges
    ]
    return {
        **network_to_dict(plan.network, sidecar_dir),
        "chip": chip_to_dict(plan.chip),
        "plan": {"round_to_power_of_two": plan.round_to_power_of_two, "executions": execs, "edges": edges},
    }


def plan_from_dict(d: Mapping, base: Path | str = ".") -> ExecutionGraph:
    """Rebuild a plan; stored ports and edges must match the derived ones."""
    network = network_from_dict(d, base)
    chip = chip_from_dict(d.get("chip"))
    section = d.get("plan")
    if not section:
        raise FormatError("missing plan section")
    assignment = [
        (e["id"], [PopulationSlice(*s) for s in e["neurons"]], Backend(e.get("backend", "reference_simulated")))
        for e in section["executions"]
    ]
    plan = build_plan(network, assignment, chip, bool(section.get("round_to_power_of_two", False)), require_fit=False)
    derived = plan_to_dict(plan)["plan"]
    for a, b in zip(section["executions"], derived["executions"]):
        if "ports" in a and [list(p) for p in a["ports"]] != b["ports"]:
            raise FormatError(f"execution {a['id']!r}: stored ports disagree with the network")
    stored_edges = section.get("edges", [])
    if [(e["source"], e["target"], [list(r) for r in e["translation"]]) for e in stored_edges] != [
        (e["source"], e["target"], e["translation"]) for e in derived["edges"]
    ]:
        raise FormatError("stored inter-execution projections disagree with the network")
    return plan


# libyaml is much faster on inline weight matrices
_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
_Dumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)


def dump_yaml(data: Mapping) -> str:
    return yaml.dump(dict(data), Dumper=_Dumper, sort_keys=False, default_flow_style=None)


def _dump(path, data: Mapping) -> None:
    Path(path).write_text(dump_yaml(data))


def read_config(path) -> dict:
    try:
        data = yaml.load(Path(path).read_text(), Loader=_Loader)
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise FormatError(f"{path}: top level must be a mapping")
    return data


def save_network(path, graph: NetworkGraph, sidecar: bool = False) -> None:
    path = Path(path)
    _dump(path, network_to_dict(graph, path.parent if sidecar else None))


def load_network(path) -> NetworkGraph:
    return network_from_dict(read_config(path), Path(path).parent)


def load_chip(path) -> ChipSpec:
    data = read_config(path)
    return chip_from_dict(data.get("chip", data))


def save_plan(path, plan: ExecutionGraph, sidecar: bool = False) -> None:
    path = Path(path)
    _dump(path, plan_to_dict(plan, path.parent if sidecar else None))


def load_plan(path) -> ExecutionGraph:
    return plan_from_dict(read_config(path), Path(path).parent)


def format_key_values(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} {v}\n" for k, v in values.items())


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition(" ")
            out[k] = v.strip()
    return out


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    plan_path: str
    config: dict
    input_hashes: dict[str, str]
    outputs: list[str] = field(default_factory=list)
    timing: dict[str, float] = field(default_factory=dict)

    @classmethod
    def start(cls, plan_path, config: Mapping, inputs: Mapping[str, str]) -> RunManifest:
        # hashes are taken before anything runs
        return cls(str(plan_path), dict(config), {k: file_hash(v) for k, v in inputs.items()})

    def save(self, path) -> None:
        _dump(path, dataclasses.asdict(self))
