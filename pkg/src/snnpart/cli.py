"""Command-line driver: compile, estimate, encode, run, train, validate."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io
from .chip import ChipError, ChipSpec, circuits_required
from .data import DatasetHandle, random_flips, random_rotation, split_dataset
from .emulator import EmulatorConfig, EmulatorError, EventStream
from .encoders import CurrentTtfsParams, LinearTtfsParams, encode_current_batch, encode_linear_batch
from .graph import GraphError, validate_graph
from .partition import Backend, PartitionError, partition_feedforward
from .scheduler import RuntimeModel, SchedulerError, estimate_runtime, orchestrate, simulate, topological_levels
from .trainer import Dataset, RegularizerConstants, SpikingModel, TrainConfig, TrainingError, train_loop

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _key_ints(items) -> dict[str, int]:
    out = {}
    for item in items or []:
        k, _, v = item.partition("=")
        out[k] = int(v)
    return out


def _key_paths(items) -> dict[str, Path]:
    out = {}
    for item in items or []:
        k, sep, v = item.partition("=")
        if not sep:
            k, v = "x", k
        out[k] = Path(v)
    return out


def _compile_options(cfg: dict) -> dict:
    # optional `compile` section: round_to_power_of_two, split_factors, emulate
    return dict(cfg.get("compile") or {})


def cmd_compile(args) -> int:
    cfg = io.read_config(args.network)
    network = io.network_from_dict(cfg, Path(args.network).parent)
    chip = io.load_chip(args.chip) if args.chip else io.chip_from_dict(cfg.get("chip"))
    opts = _compile_options(cfg)
    pow2 = args.round_to_power_of_two or bool(opts.get("round_to_power_of_two", False))
    splits = {**opts.get("split_factors", {}), **_key_ints(args.split)}
    backends = {p: Backend.EMULATED for p in (args.emulate or opts.get("emulate", []))}
    plan = partition_feedforward(network, chip, pow2, splits, backends)
    out = Path(args.output or Path(args.network).with_suffix(".plan.yaml"))
    io.save_plan(out, plan, sidecar=args.sidecar)
    print(f"executions {len(plan.executions)}")
    print("id\tbackend\tneurons\tcircuits\trows\tlabels")
    for e in plan.executions:
        r = e.resources
        print(f"{e.id}\t{e.backend.value}\t{e.n_neurons}\t{r.circuits_used}\t{r.rows_used}\t{r.labels_used}")
    print(f"plan {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    plan = io.load_plan(args.plan)
    model = RuntimeModel(args.batch, args.time, args.wait, args.overhead)
    est = estimate_runtime(topological_levels(plan), model, args.chips)
    print("\n".join(est.lines()))
    return EXIT_OK


def _load_images(path: Path) -> np.ndarray:
    return io.read_tensor(path).astype(np.float64) if path.suffix == ".cspt" else io.load_idx(path)


def _encoder(name: str, duration: float | None):
    if name == "linear":
        p = LinearTtfsParams() if duration is None else LinearTtfsParams(T=duration)
        return lambda x, rng: encode_linear_batch(x, p), p.T
    p = CurrentTtfsParams() if duration is None else CurrentTtfsParams(T=duration)
    return lambda x, rng: encode_current_batch(x, p, rng), p.T


def cmd_encode(args) -> int:
    images = _load_images(Path(args.images))
    if args.limit:
        images = images[: args.limit]
    encode, _ = _encoder(args.encoder, args.duration)
    events = encode(images, np.random.default_rng(args.seed))
    io.write_events(args.output, events)
    print(f"events {len(events)}")
    print(f"batch_size {events.batch_size}")
    return EXIT_OK


def cmd_run(args) -> int:
    plan = io.load_plan(args.plan)
    inputs = {k: io.read_events(v) for k, v in _key_paths(args.inputs).items()}
    duration = {s.duration for s in inputs.values()}
    if len(duration) > 1:
        raise SchedulerError("input streams disagree on duration")
    cfg = EmulatorConfig(dt=args.dt, duration=duration.pop() if duration else args.duration, seed=args.seed)
    if args.mode == "reference" or args.mode == "partitioned":
        plan = plan.with_backends({e.id: Backend.REFERENCE for e in plan.executions})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = io.RunManifest.start(args.plan, {**dataclasses.asdict(cfg), "mode": args.mode}, _key_paths(args.inputs))
    if args.mode == "reference":
        res = simulate(plan.network, inputs, cfg)
    else:
        res = orchestrate(plan, inputs, cfg, workers=args.workers)
    # per-population results look the same in every mode
    for pop in plan.network.populations:
        spikes = res.population_spikes(pop.id)
        io.write_events(out / f"{pop.id}.events", EventStream.from_grid(spikes, cfg.dt, cfg.duration))
        io.write_tensor(out / f"{pop.id}.traces.cspt", res.population_traces(pop.id))
        manifest.outputs += [f"{pop.id}.events", f"{pop.id}.traces.cspt"]
    if args.mode != "reference":
        (out / "executions").mkdir(exist_ok=True)
        for eid, o in res.outputs.items():
            io.write_events(out / "executions" / f"{eid}.events", o.events())
            io.write_tensor(out / "executions" / f"{eid}.traces.cspt", o.traces.values)
            manifest.outputs += [f"executions/{eid}.events", f"executions/{eid}.traces.cspt"]
    timing = {**res.timing, "dropped_events": sum(res.dropped.values())}
    (out / "timing.txt").write_text(io.format_key_values(timing))
    manifest.timing = dict(res.timing)
    manifest.save(out / "manifest.yaml")
    sys.stdout.write(io.format_key_values(timing))
    return EXIT_OK


def cmd_train(args) -> int:
    from . import models

    cfg = io.read_config(args.network)
    network = io.network_from_dict(cfg, Path(args.network).parent)
    tc = dict(cfg.get("train", {}))
    for key in ("epochs", "batch_size", "learning_rate"):
        if getattr(args, key) is not None:
            tc[key] = getattr(args, key)
    tc.update(mode=args.mode, seed=args.seed)
    if "lr_milestones" in tc:
        tc["lr_milestones"] = tuple(tc["lr_milestones"])
    train_cfg = TrainConfig(**tc)
    reg = RegularizerConstants(**cfg.get("regularizer", dataclasses.asdict(models.MNIST_REG)))
    emu_opts = dict(cfg.get("emulator") or {})
    if "trace_clip" in emu_opts:
        emu_opts["trace_clip"] = tuple(emu_opts["trace_clip"])
    emu = EmulatorConfig(**emu_opts)
    plan = None
    if args.mode != "reference":
        plan = io.load_plan(args.plan) if args.plan else partition_feedforward(
            network, io.load_chip(args.chip) if args.chip else ChipSpec()
        )
    model = SpikingModel(network, emu, plan)
    handle = DatasetHandle.from_files(args.images, args.labels)
    train_idx, val_idx, _ = split_dataset(handle, tuple(args.split), args.seed)
    if args.train_size:
        train_idx = train_idx[: args.train_size]
    if len(network.inputs) != 1:
        raise TrainingError("train expects a network with exactly one input")
    input_id = network.inputs[0].id
    encode_stream, _ = _encoder(args.encoder, emu.duration)

    def encode(x, rng):
        return {input_id: encode_stream(x, rng)}

    data = Dataset(handle.images[train_idx], handle.labels[train_idx], handle.images[val_idx], handle.labels[val_idx])

    def augment(x, rng):
        if args.rotate:
            x = random_rotation(x, rng, 25.0, args.rotate)
        if args.flip:
            x = random_flips(x, rng, args.flip)
        return x

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.log"
    log_path.write_text("epoch train_loss train_acc val_loss val_acc lr\n")

    def on_epoch(m, current):
        with log_path.open("a") as f:
            f.write(m.line() + "\n")
        print(m.line(), flush=True)

    result = train_loop(model, data, encode, train_cfg, reg, augment if (args.rotate or args.flip) else None, on_epoch)
    ckpt = out / "checkpoint"
    ckpt.mkdir(exist_ok=True)
    snapshot = io.network_to_dict(result.model.network, ckpt)
    snapshot["train"] = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(train_cfg).items()}
    snapshot["regularizer"] = dataclasses.asdict(reg)
    snapshot["emulator"] = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(emu).items()}
    (ckpt / "network.yaml").write_text(io.dump_yaml(snapshot))
    print(f"best_epoch {result.best_epoch}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = io.read_config(args.network)
    network = io.network_from_dict(cfg, Path(args.network).parent)
    chip = io.load_chip(args.chip) if args.chip else io.chip_from_dict(cfg.get("chip"))
    report = validate_graph(network)
    lines = report.lines()
    for unit in network.recurrent_units():
        fan_in = max(network.fan_in(p) for p in unit)
        size = sum(network.population(p).size for p in unit)
        try:
            c = circuits_required(fan_in, chip)
            if size * c > chip.neuron_circuits:
                lines.append(f"recurrent component {','.join(unit)} needs {size * c} circuits > {chip.neuron_circuits}")
        except ChipError as exc:
            lines.append(f"recurrent component {','.join(unit)}: {exc}")
    for p in network.populations:
        if network.fan_in(p.id) > chip.max_signed_fan_in:
            lines.append(f"population {p.id} fan-in {network.fan_in(p.id)} > {chip.max_signed_fan_in}")
    if lines:
        print("\n".join(lines))
        return EXIT_INVALID
    print("clean")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snnpart", description="Partitioned spiking-network compiler and emulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compile", help="partition a network into a plan")
    c.add_argument("network")
    c.add_argument("--chip")
    c.add_argument("-o", "--output")
    c.add_argument("--split", action="append", metavar="POP=K")
    c.add_argument("--emulate", action="append", metavar="POP")
    c.add_argument("--round-to-power-of-two", action="store_true")
    c.add_argument("--sidecar", action="store_true", help="write weights as tensor files")
    c.set_defaults(fn=cmd_compile)

    e = sub.add_parser("estimate", help="hardware runtime of a plan")
    e.add_argument("plan")
    e.add_argument("--chips", type=int, default=1)
    e.add_argument("--batch", type=int, default=100)
    e.add_argument("--time", type=float, default=30.0, help="experiment time per entry, us")
    e.add_argument("--wait", type=float, default=50.0, help="relaxation wait per entry, us")
    e.add_argument("--overhead", type=float, default=0.0, help="fixed overhead per run, us")
    e.set_defaults(fn=cmd_estimate)

    n = sub.add_parser("encode", help="images to an event file")
    n.add_argument("images")
    n.add_argument("-o", "--output", required=True)
    n.add_argument("--encoder", choices=("linear", "current"), default="linear")
    n.add_argument("--duration", type=float)
    n.add_argument("--limit", type=int)
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(fn=cmd_encode)

    r = sub.add_parser("run", help="execute a plan on input events")
    r.add_argument("plan")
    r.add_argument("--inputs", action="append", required=True, metavar="ID=FILE")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("reference", "partitioned", "mixed"), default="partitioned")
    r.add_argument("--dt", type=float, default=1.0)
    r.add_argument("--duration", type=float, default=30.0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_run)

    t = sub.add_parser("train", help="train a network on an image dataset")
    t.add_argument("network")
    t.add_argument("--images", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--plan")
    t.add_argument("--chip")
    t.add_argument("--mode", choices=("reference", "partitioned", "mixed"), default="reference")
    t.add_argument("--encoder", choices=("linear", "current"), default="linear")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--split", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    t.add_argument("--train-size", type=int)
    t.add_argument("--rotate", type=float, default=0.0, help="rotation probability")
    t.add_argument("--flip", type=float, default=0.0, help="flip probability")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("validate", help="check a network for placement problems")
    v.add_argument("network")
    v.add_argument("--chip")
    v.set_defaults(fn=cmd_validate)
    return p


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING)
    try:
        return args.fn(args)
    except (OSError, io.FormatError, yaml.YAMLError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GraphError, PartitionError, ChipError, SchedulerError, EmulatorError, TrainingError, ValueError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
