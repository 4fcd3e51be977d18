import json

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e3wae.exceptions import ContractViolation, GenerationError, ParseError, ValidationError
from e3wae.molgraph import (
    AtomGraph,
    Expand,
    FragmentGraph3D,
    FragmentVocab,
    Stop,
    SynthConfig,
    bfs_trace,
    fragmentize,
    make_vocab,
    read_jsonl,
    synth_dataset,
    write_jsonl,
)

from molfixtures import bridged_five_rings, junction_atom, ring_with_pendant

seeds = st.integers(0, 2**32 - 1)


def random_atom_graph(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 16))
    bonds = {tuple(sorted((i, int(rng.integers(i))))) for i in range(1, n)}
    for _ in range(int(rng.integers(0, 4))):
        i, j = rng.choice(n, 2, replace=False)
        bonds.add(tuple(sorted((int(i), int(j)))))
    return AtomGraph(rng.integers(0, 3, n).tolist(), sorted(bonds), rng.normal(size=(n, 3)))


# --- fragmentizer -----------------------------------------------------------


def test_fragmentize_ring_with_pendant_bond():
    g = ring_with_pendant()
    frag, assign = fragmentize(g)
    assert frag.n == 2 and frag.edges == [(0, 1)]
    np.testing.assert_allclose(frag.coords[0], g.coords[:6].mean(0), atol=1e-15)
    np.testing.assert_allclose(frag.coords[1], g.coords[[0, 6]].mean(0), atol=1e-15)
    assert assign[0] == [0, 1] and assign[6] == [1] and all(assign[k] == [0] for k in range(1, 6))
    assert frag.frag_types[0] != frag.frag_types[1]


def test_fragmentize_bridged_rings_merge():
    g = bridged_five_rings()
    frag, assign = fragmentize(g)
    assert frag.n == 1 and frag.edges == []
    np.testing.assert_allclose(frag.coords[0], g.coords.mean(0), atol=1e-15)
    assert all(a == [0] for a in assign)


def test_fragmentize_junction_singleton():
    g = junction_atom()
    frag, assign = fragmentize(g)
    assert frag.n == 5
    assert frag.edges == [(0, 1), (0, 2), (0, 3), (0, 4)]
    np.testing.assert_allclose(frag.coords[0], g.coords[0])
    for k in range(1, 5):
        np.testing.assert_allclose(frag.coords[k], g.coords[[0, k]].mean(0))
    assert len(set(frag.frag_types[1:])) == 1 and frag.frag_types[0] != frag.frag_types[1]
    assert assign[0] == [0, 1, 2, 3, 4]


def test_fragmentize_single_bond_midpoint():
    g = AtomGraph([1, 1], [(0, 1)], np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    frag, _ = fragmentize(g)
    assert frag.n == 1
    np.testing.assert_allclose(frag.coords[0], [1.0, 0.0, 0.0])
    assert "asphericity" not in frag.props


def test_fragmentize_rejects_disconnected():
    with pytest.raises((ContractViolation, ValidationError)):
        fragmentize(AtomGraph([1, 1, 1], [(0, 1)], np.zeros((3, 3))))


def test_fragmentize_extends_vocab_index():
    index = {}
    fragmentize(junction_atom(), index)
    k = len(index)
    fragmentize(junction_atom(), index)
    assert len(index) == k == 2


@settings(max_examples=500, deadline=None)
@given(seed=seeds)
def test_fragmentize_tree_and_total_assignment(seed):
    g = random_atom_graph(seed)
    frag, assign = fragmentize(g)
    T = nx.Graph()
    T.add_nodes_from(range(frag.n))
    T.add_edges_from(frag.edges)
    assert nx.is_tree(T)
    assert len(assign) == g.n and all(len(a) >= 1 for a in assign)
    for i, j in g.bonds:
        assert set(assign[i]) & set(assign[j])


# --- traces -----------------------------------------------------------------


def _graph(n, edges):
    return FragmentGraph3D([0] * n, edges, np.arange(3 * n, dtype=float).reshape(n, 3))


def test_trace_single_node():
    assert bfs_trace(_graph(1, [])).steps == [Stop(0)]


def test_trace_path():
    t = bfs_trace(_graph(3, [(0, 1), (1, 2)]))
    assert t.steps == [Expand(0, 1, True), Stop(0), Expand(1, 2, True), Stop(1), Stop(2)]
    assert t.node_visit_order == [0, 1, 2]


def test_trace_triangle_closes_once():
    t = bfs_trace(_graph(3, [(0, 1), (1, 2), (0, 2)]))
    relinks = [s for s in t.steps if isinstance(s, Expand) and not s.is_new_node]
    assert relinks == [Expand(1, 2, False)]


def test_trace_rejects_bad_root():
    with pytest.raises(ContractViolation):
        bfs_trace(_graph(2, [(0, 1)]), root=5)


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_trace_replay_reconstructs_graph(seed):
    g = synth_dataset(SynthConfig(count=1, seed=int(seed % 10_000)), make_vocab(8, 0))[0]
    t = bfs_trace(g)
    t.check_against(g)
    stops = [s.focus for s in t.steps if isinstance(s, Stop)]
    assert stops == t.node_visit_order
    news = [s.target for s in t.steps if isinstance(s, Expand) and s.is_new_node]
    assert sorted(news + [t.root]) == list(range(g.n))


# --- synthetic data ---------------------------------------------------------


def test_synth_single_fragment():
    (g,) = synth_dataset(SynthConfig(count=1, n_range=(1, 1)))
    assert g.n == 1 and g.edges == [] and "asphericity" not in g.props and g.props["rg"] == 0.0


def test_synth_deterministic():
    a = synth_dataset(SynthConfig(count=20, seed=3))
    b = synth_dataset(SynthConfig(count=20, seed=3))
    assert [x.to_dict() for x in a] == [x.to_dict() for x in b]


def test_synth_property_spread_and_validity():
    vocab = make_vocab(8, 0)
    gs = synth_dataset(SynthConfig(count=500, n_range=(3, 8)), vocab)
    for g in gs:
        g.validate(vocab)
        assert 3 <= g.n <= 8
    assert np.std([g.props["asphericity"] for g in gs]) > 0.05


def test_synth_impossible_vocab():
    vocab = FragmentVocab(["a", "b"], np.zeros((2, 2), dtype=bool))
    with pytest.raises(GenerationError):
        synth_dataset(SynthConfig(count=1, K=2, n_range=(2, 2)), vocab)


def test_vocab_contracts():
    with pytest.raises(ValidationError):
        FragmentVocab(["a", "b"], [[1, 1], [0, 1]])
    v = make_vocab(5, 1)
    assert v.stop_index == 5 and np.array_equal(v.compat, v.compat.T)
    assert FragmentVocab.from_dict(json.loads(json.dumps(v.to_dict()))).compat.tolist() == v.compat.tolist()


# --- files ------------------------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    gs = synth_dataset(SynthConfig(count=15, seed=5))
    path = tmp_path / "d.jsonl"
    write_jsonl(path, gs)
    back = read_jsonl(path)
    for a, b in zip(gs, back):
        assert a.frag_types == b.frag_types and a.edges == b.edges and a.props == b.props and a.id == b.id
        assert np.array_equal(a.coords, b.coords)


def test_jsonl_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_jsonl(tmp_path / "e.jsonl") == []


def test_jsonl_bad_edge_names_graph(tmp_path):
    line = {"id": "bad", "frag_types": [0, 0], "edges": [[0, 5]], "coords": [[0, 0, 0], [1, 0, 0]], "props": {}}
    (tmp_path / "b.jsonl").write_text(json.dumps(line) + "\n")
    with pytest.raises(ValidationError, match="bad"):
        read_jsonl(tmp_path / "b.jsonl")


def test_jsonl_malformed_line_number(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"id": "a", "frag_types": [0], "edges": [], "coords": [[0,0,0]]}\n{oops\n')
    with pytest.raises(ParseError, match=":2:"):
        read_jsonl(tmp_path / "m.jsonl")


def test_validate_rejects_incompatible_edge():
    vocab = FragmentVocab(["a", "b"], [[0, 1], [1, 0]])
    g = FragmentGraph3D([0, 0], [(0, 1)], np.eye(2, 3), id="x")
    with pytest.raises(ValidationError, match="incompatible"):
        g.validate(vocab)
    with pytest.raises(ValidationError, match="disconnected"):
        FragmentGraph3D([0, 1, 0], [(0, 1)], np.zeros((3, 3))).validate()
