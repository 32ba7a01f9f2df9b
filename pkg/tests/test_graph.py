import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snnpart.graph import (
    Dense,
    GraphError,
    NetworkGraph,
    NeuronParams,
    ReceptiveField,
    add_input,
    add_population,
    add_projection,
    validate_graph,
)
from oracles import rf_sources


def test_add_population_ids():
    g = NetworkGraph()
    assert add_population(g, 256, NeuronParams.lif()) == "p1"
    assert len(g.populations) == 1
    assert add_population(g, 10, NeuronParams.li()) == "p2"


def test_size_zero_rejected():
    with pytest.raises(GraphError, match="size"):
        add_population(NetworkGraph(), 0, NeuronParams.lif())


@pytest.mark.parametrize(
    "kw, msg",
    [
        (dict(tau_mem=0), "tau_mem > 0"),
        (dict(tau_syn=-1), "tau_syn > 0"),
        (dict(refractory=-0.1), "refractory >= 0"),
        (dict(v_thresh=0.0, v_reset=0.0), "v_thresh > v_reset"),
    ],
)
def test_invalid_params_name_invariant(kw, msg):
    with pytest.raises(GraphError, match=msg):
        NeuronParams.lif(**kw)


def test_li_has_no_threshold():
    with pytest.raises(GraphError):
        NeuronParams(kind="LI", v_thresh=1.0)


def test_dense_projection_shapes():
    g = NetworkGraph()
    x = add_input(g, 784, "x")
    h = add_population(g, 256, NeuronParams.lif())
    add_projection(g, x, h, Dense(), np.zeros((784, 256)))
    with pytest.raises(GraphError):
        add_projection(g, x, h, Dense(), np.zeros((256, 784)))
    with pytest.raises(GraphError):
        add_projection(g, "nope", h, Dense(), np.zeros((784, 256)))


def test_receptive_field_on_64x64x3():
    g = NetworkGraph()
    x = add_input(g, 64 * 64 * 3, "x")
    rf = ReceptiveField(3, 3, 3, 3, 64, 64)
    assert rf.post_size(64 * 64 * 3) == 484
    h = add_population(g, 484, NeuronParams.lif())
    add_projection(g, x, h, rf, np.zeros((484, 27)))
    assert g.fan_in(h) == 27


@settings(max_examples=40, deadline=None)
@given(
    kh=st.integers(1, 3), kw=st.integers(1, 3), ch=st.integers(1, 3), stride=st.integers(1, 3),
    h=st.integers(1, 9), w=st.integers(1, 9),
)
def test_rf_indices_match_scalar_construction(kh, kw, ch, stride, h, w):
    rf = ReceptiveField(kh, kw, ch, stride, h, w)
    idx = rf.indices(h * w * ch)
    expected = rf_sources(kh, kw, ch, stride, h, w)
    assert idx.shape == (len(expected), kh * kw * ch)
    for post, row in enumerate(expected):
        got = [(s, int(j)) for s, j in enumerate(idx[post]) if j >= 0]
        assert got == row


def test_feedforward_clean():
    g = NetworkGraph()
    x = add_input(g, 4, "x")
    a = add_population(g, 3, NeuronParams.lif(), execution="e1")
    b = add_population(g, 3, NeuronParams.lif(), execution="e2")
    c = add_population(g, 2, NeuronParams.li(), execution="e3")
    add_projection(g, x, a, Dense(), np.zeros((4, 3)))
    add_projection(g, a, b, Dense(), np.zeros((3, 3)))
    add_projection(g, b, c, Dense(), np.zeros((3, 2)))
    assert validate_graph(g).clean


def test_recurrent_pair_across_executions_flagged():
    g = NetworkGraph()
    a = add_population(g, 3, NeuronParams.lif(), execution="e1")
    b = add_population(g, 3, NeuronParams.lif(), execution="e2")
    add_projection(g, a, b, Dense(), np.zeros((3, 3)))
    add_projection(g, b, a, Dense(), np.zeros((3, 3)))
    report = validate_graph(g)
    assert not report.clean
    assert report.recurrence_violations == [("p1", "p2")]


def test_recurrent_pair_in_one_execution_clean():
    g = NetworkGraph()
    a = add_population(g, 3, NeuronParams.lif(), execution="e1")
    b = add_population(g, 3, NeuronParams.lif(), execution="e1")
    add_projection(g, a, b, Dense(), np.zeros((3, 3)))
    add_projection(g, b, a, Dense(), np.zeros((3, 3)))
    assert validate_graph(g).clean


def test_add_does_not_mutate_existing():
    g = NetworkGraph()
    x = add_input(g, 2, "x")
    p = add_population(g, 2, NeuronParams.lif())
    w = np.ones((2, 2))
    add_projection(g, x, p, Dense(), w)
    before = (list(g.populations), [q.weights.copy() for q in g.projections])
    add_population(g, 5, NeuronParams.li())
    assert g.populations[:1] == before[0]
    assert np.array_equal(g.projections[0].weights, before[1][0])


def _reachability_violation(n, edges, labels):
    reach = [[i == j for j in range(n)] for i in range(n)]
    for a, b in edges:
        reach[a][b] = True
    # product() varies k slowest, which is the Floyd-Warshall order
    for k, i, j in itertools.product(range(n), repeat=3):
        if reach[i][k] and reach[k][j]:
            reach[i][j] = True
    for i in range(n):
        members = [j for j in range(n) if reach[i][j] and reach[j][i]]
        cyclic = len(members) > 1 or (i, i) in edges
        annotated = {labels[j] for j in members if labels[j] is not None}
        if cyclic and len(annotated) > 1:
            return True
    return False


@settings(max_examples=150, deadline=None)
@given(
    n=st.integers(1, 8),
    data=st.data(),
)
def test_validate_matches_bruteforce_reachability(n, data):
    edges = data.draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=12, unique=True))
    labels = data.draw(st.lists(st.sampled_from([None, "e1", "e2", "e3"]), min_size=n, max_size=n))
    g = NetworkGraph()
    for i in range(n):
        add_population(g, 2, NeuronParams.lif(), execution=labels[i])
    for a, b in edges:
        add_projection(g, f"p{a + 1}", f"p{b + 1}", Dense(), np.zeros((2, 2)))
    expected = _reachability_violation(n, set(edges), labels)
    assert (not validate_graph(g).clean) == expected


def test_topological_units_dependency_order(rng):
    g = NetworkGraph()
    x = add_input(g, 2, "x")
    ids = [add_population(g, 2, NeuronParams.lif()) for _ in range(4)]
    add_projection(g, x, ids[2], Dense(), np.zeros((2, 2)))
    add_projection(g, ids[2], ids[0], Dense(), np.zeros((2, 2)))
    add_projection(g, ids[0], ids[1], Dense(), np.zeros((2, 2)))
    add_projection(g, ids[1], ids[0], Dense(), np.zeros((2, 2)))
    add_projection(g, ids[1], ids[3], Dense(), np.zeros((2, 2)))
    units = g.topological_units()
    pos = {m: k for k, u in enumerate(units) for m in u}
    for proj in g.projections:
        if not g.is_input(proj.pre):
            assert pos[proj.pre] <= pos[proj.post]
    assert ("p1", "p2") in units
    assert nx.is_directed_acyclic_graph(nx.condensation(g.population_digraph()))
