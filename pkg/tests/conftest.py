import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("deterministic", derandomize=True, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "deterministic"))

from snnpart.emulator import EventStream
from snnpart.graph import Dense, NetworkGraph, NeuronParams, ReceptiveField, add_input, add_population, add_projection

MNIST_DIR = Path(os.environ.get("MNIST_DIR", "/root/data/mnist"))


def random_ff_network(rng, sizes, n_in=None, rf_first=False, refractory=0.0, lif_last=False, weight_std=1.0):
    """Chain input -> LIF ... -> LI (or LIF) with random weights."""
    g = NetworkGraph()
    if rf_first:
        side = int(rng.integers(4, 8))
        n_in = side * side * 2
        src = add_input(g, n_in, "x")
        rf = ReceptiveField(2, 2, 2, int(rng.integers(1, 3)), side, side)
        n = rf.post_size(n_in)
        pop = add_population(g, n, NeuronParams.lif(tau_mem=float(rng.uniform(2, 10)), tau_syn=float(rng.uniform(2, 10)), refractory=refractory))
        add_projection(g, src, pop, rf, rng.normal(0.3, weight_std, (n, 8)))
        src = pop
        sizes = sizes[1:]
    else:
        n_in = n_in or int(rng.integers(4, 40))
        src = add_input(g, n_in, "x")
    for k, n in enumerate(sizes):
        last = k == len(sizes) - 1
        if last and not lif_last:
            params = NeuronParams.li(tau_mem=float(rng.uniform(2, 10)), tau_syn=float(rng.uniform(2, 10)))
        else:
            params = NeuronParams.lif(
                tau_mem=float(rng.uniform(2, 10)), tau_syn=float(rng.uniform(2, 10)),
                v_thresh=float(rng.uniform(0.5, 1.5)), refractory=refractory,
            )
        pop = add_population(g, int(n), params)
        n_pre = g.source_size(src)
        add_projection(g, src, pop, Dense(), rng.normal(0.5 / np.sqrt(n_pre), weight_std / np.sqrt(n_pre) * 3, (n_pre, int(n))))
        src = pop
    return g


def random_events(rng, network, batch, duration, dt=1.0, rate=0.2):
    out = {}
    steps = int(round(duration / dt))
    for inp in network.inputs:
        grid = (rng.random((batch, steps, inp.size)) < rate).astype(float)
        out[inp.id] = EventStream.from_grid(grid, dt, duration)
    return out


def plain_network(network):
    """Description consumed by the scalar oracles."""
    pops = []
    for p in network.populations:
        q = p.params
        pops.append(dict(
            id=p.id, size=p.size, lif=q.spiking, tau_mem=q.tau_mem, tau_syn=q.tau_syn, v_leak=q.v_leak,
            v_reset=q.v_reset, v_thresh=q.v_thresh, refractory=q.refractory,
        ))
    projs = []
    for pr in network.projections:
        d = dict(pre=pr.pre, post=pr.post, W=pr.weights.tolist())
        if isinstance(pr.connectivity, ReceptiveField):
            c = pr.connectivity
            h, w = c.geometry(network.source_size(pr.pre))
            d["rf"] = (c.kernel_h, c.kernel_w, c.channels, c.stride, h, w)
        projs.append(d)
    return dict(populations=pops, projections=projs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST files not found in {MNIST_DIR}")
    return MNIST_DIR


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
