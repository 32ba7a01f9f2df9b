import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnpart.chip import ChipSpec, check_fit
from snnpart.graph import Dense, NetworkGraph, NeuronParams, add_input, add_population, add_projection
from snnpart.models import EUROSAT_SPLIT, eurosat_network, mnist_network
from snnpart.partition import (
    Backend,
    PartitionError,
    PopulationSlice,
    assign_manual,
    neuron_groups,
    partition_feedforward,
    split_layer,
)
from conftest import random_ff_network


def _fig1e_network():
    g = NetworkGraph()
    x = add_input(g, 20, "x")
    first = add_population(g, 30, NeuronParams.lif(), execution="first", id="first")
    second = add_population(g, 30, NeuronParams.lif(), execution="second", id="second")
    third = add_population(g, 10, NeuronParams.li(), execution="third", id="third")
    add_projection(g, x, first, Dense(), np.zeros((20, 30)), execution="first")
    add_projection(g, x, second, Dense(), np.zeros((20, 30)), execution="second")
    add_projection(g, first, third, Dense(), np.zeros((30, 10)), execution="third")
    add_projection(g, second, third, Dense(), np.zeros((30, 10)), execution="third")
    return g


def test_manual_three_executions():
    plan = assign_manual(_fig1e_network())
    assert sorted(e.id for e in plan.executions) == ["first", "second", "third"]
    assert len(plan.edges_into("third")) == 2


def test_manual_single_execution():
    g = NetworkGraph()
    x = add_input(g, 5, "x")
    a = add_population(g, 4, NeuronParams.lif(), execution="e")
    b = add_population(g, 3, NeuronParams.li(), execution="e")
    add_projection(g, x, a, Dense(), np.zeros((5, 4)), execution="e")
    add_projection(g, a, b, Dense(), np.zeros((4, 3)), execution="e")
    plan = assign_manual(g)
    assert len(plan.executions) == 1 and not plan.edges


def test_manual_recurrence_across_executions_rejected():
    g = NetworkGraph()
    a = add_population(g, 4, NeuronParams.lif(), execution="e1")
    b = add_population(g, 4, NeuronParams.lif(), execution="e2")
    add_projection(g, a, b, Dense(), np.zeros((4, 4)), execution="e2")
    add_projection(g, b, a, Dense(), np.zeros((4, 4)), execution="e1")
    with pytest.raises(PartitionError):
        assign_manual(g)


def test_mnist_five_executions():
    plan = partition_feedforward(mnist_network(), ChipSpec(), round_to_power_of_two=True)
    assert [e.id for e in plan.executions] == ["p1.0", "p1.1", "p1.2", "p1.3", "p2"]
    assert [e.n_neurons for e in plan.executions] == [64, 64, 64, 64, 10]


def test_eurosat_ten_executions():
    plan = partition_feedforward(eurosat_network(), ChipSpec(), split_factors=EUROSAT_SPLIT)
    assert len(plan.executions) == 10


def test_tiny_net_one_execution():
    g = NetworkGraph()
    x = add_input(g, 10, "x")
    p = add_population(g, 10, NeuronParams.li())
    add_projection(g, x, p, Dense(), np.zeros((10, 10)))
    assert len(partition_feedforward(g).executions) == 1


def test_split_layer_examples():
    assert sorted(b - a for a, b in split_layer(484, 8)) == [60] * 4 + [61] * 4
    assert split_layer(256, 4) == [(0, 64), (64, 128), (128, 192), (192, 256)]
    assert split_layer(7, 1) == [(0, 7)]


@given(st.integers(1, 600), st.data())
def test_split_layer_properties(size, data):
    k = data.draw(st.integers(1, size))
    parts = split_layer(size, k)
    sizes = [b - a for a, b in parts]
    assert parts[0][0] == 0 and parts[-1][1] == size
    assert all(parts[i][1] == parts[i + 1][0] for i in range(k - 1))
    assert max(sizes) - min(sizes) <= 1


def test_fan_in_reduction_error():
    g = NetworkGraph()
    x = add_input(g, 9000, "x")
    p = add_population(g, 2, NeuronParams.lif())
    add_projection(g, x, p, Dense(), np.zeros((9000, 2)))
    with pytest.raises(PartitionError, match="requires fan-in reduction"):
        partition_feedforward(g)


def _check_invariants(plan):
    for pop in plan.network.populations:
        covered = np.zeros(pop.size, dtype=int)
        for _, s, _ in plan.owners(pop.id):
            covered[s.start : s.stop] += 1
        assert np.all(covered == 1)
    assert nx.is_directed_acyclic_graph(plan.digraph())
    for e in plan.edges:
        assert e.source != e.target
        targets = [d + k for _, d, n in e.translation for k in range(n)]
        assert len(targets) == len(set(targets))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_random_plans_satisfy_invariants(seed, pow2):
    rng = np.random.default_rng(seed)
    sizes = list(rng.integers(16, 700, size=int(rng.integers(1, 4))))
    g = random_ff_network(rng, sizes, n_in=int(rng.integers(16, 2000)))
    plan = partition_feedforward(g, ChipSpec(), pow2)
    _check_invariants(plan)
    for e in plan.executions:
        assert e.resources.fits
    # minimality: one part fewer makes some part fail
    for pop in g.populations:
        k = len(plan.owners(pop.id))
        if k > 1:
            fits = [
                check_fit(neuron_groups(g, [PopulationSlice(pop.id, a, b)]), ChipSpec(), pow2).fits
                for a, b in split_layer(pop.size, k - 1)
            ]
            assert not all(fits)
    assert partition_feedforward(g, ChipSpec(), pow2) == plan


def test_backend_flags():
    plan = partition_feedforward(mnist_network(), backends={"p1": Backend.EMULATED})
    assert {e.id for e in plan.executions if e.backend is Backend.EMULATED} == {"p1.0", "p1.1", "p1.2", "p1.3"}


def test_translation_maps_owner_slice_to_port():
    plan = partition_feedforward(mnist_network(), round_to_power_of_two=True)
    edges = plan.edges_into("p2")
    assert [e.translation for e in edges] == [((0, 0, 64),), ((0, 64, 64),), ((0, 128, 64),), ((0, 192, 64),)]
