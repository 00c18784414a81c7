import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtgnn.graphs import (
    Graph,
    Dataset,
    ConfigError,
    make_folds,
    holdout_split,
)


def path_graph(n=3):
    edges = [(i, i + 1) for i in range(n - 1)]
    return Graph(n, edges)


def test_path_graph_neighbors():
    g = path_graph(3)
    assert list(g.neighbors(1)) == [0, 2]
    assert list(g.neighbors(0)) == [1]


def test_isolated_node_has_no_neighbors():
    g = Graph(4, [(0, 1)])
    assert list(g.neighbors(3)) == []


def test_directed_neighbors_are_in_neighbors():
    g = Graph(3, [(0, 1), (2, 1)], directed=True)
    assert list(g.neighbors(1)) == [0, 2]
    assert list(g.neighbors(0)) == []
    assert list(g.neighbors(2)) == []


def test_undirected_edges_stored_once():
    g = Graph(3, [(0, 1), (1, 0), (1, 2)])
    assert g.edge_count == 2


def test_degrees_match_neighbors():
    g = Graph(5, [(0, 1), (0, 2), (0, 3), (3, 4)])
    assert list(g.degrees()) == [3, 1, 1, 2, 1]


def test_edge_out_of_range_rejected():
    with pytest.raises(ValueError):
        Graph(2, [(0, 2)])


def test_neighbors_out_of_range_rejected():
    g = path_graph(3)
    with pytest.raises(ValueError):
        g.neighbors(3)


@st.composite
def random_graphs(draw):
    n = draw(st.integers(min_value=1, max_value=12))
    m = draw(st.integers(min_value=0, max_value=20))
    edges = draw(
        st.lists(
            st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)),
            min_size=m,
            max_size=m,
        )
    )
    edges = [(a, b) for a, b in edges if a != b]
    directed = draw(st.booleans())
    return Graph(n, edges, directed=directed)


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_adjacency_symmetric_iff_undirected(g):
    a = g.adjacency().toarray()
    if not g.directed:
        assert np.array_equal(a, a.T)
    # every stored edge is visible from the receiver side
    for s, t in g.edges:
        assert a[t, s] >= 1


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_graph_dict_round_trip(g):
    assert Graph.from_dict(g.to_dict()) == g


def toy_graph_dataset(n_graphs=40):
    graphs = []
    for i in range(n_graphs):
        graphs.append(Graph(3, [(0, 1), (1, 2)], graph_label=i % 2,
                            features=[0, 0, 0]))
    return Dataset("toy", "graph", graphs, class_count=2, feature_count=1)


def toy_node_dataset():
    g = Graph(6, [(i, i + 1) for i in range(5)],
              node_labels=[0, 1, 0, 1, 0, 1])
    return Dataset("toynode", "node", [g] * 4, class_count=2, feature_count=0)


def test_units_graph_task():
    ds = toy_graph_dataset(5)
    assert ds.units() == [(0, -1), (1, -1), (2, -1), (3, -1), (4, -1)]
    assert list(ds.unit_labels()) == [0, 1, 0, 1, 0]


def test_units_node_task_skips_unlabeled():
    g = Graph(4, [(0, 1), (1, 2), (2, 3)], node_labels=[0, -1, 1, -1])
    ds = Dataset("partial", "node", [g], class_count=2, feature_count=0)
    assert ds.units() == [(0, 0), (0, 2)]
    assert list(ds.unit_labels()) == [0, 1]


def test_make_folds_sizes_and_partition():
    graphs = [Graph(2, [(0, 1)], graph_label=i % 2, features=[0, 0])
              for i in range(1000)]
    ds = Dataset("thousand", "graph", graphs, class_count=2, feature_count=1)
    folds = make_folds(ds, seed=7)
    assert len(folds) == 10
    all_test = np.concatenate([f.test_ids for f in folds])
    assert len(all_test) == 1000
    assert len(np.unique(all_test)) == 1000
    for f in folds:
        assert len(f.test_ids) == 100
        assert len(f.validation_ids) == 90
        assert len(f.train_ids) == 810
        combined = np.concatenate([f.train_ids, f.validation_ids, f.test_ids])
        assert len(np.unique(combined)) == 1000


def test_make_folds_deterministic():
    ds = toy_graph_dataset(50)
    a = make_folds(ds, seed=3)
    b = make_folds(ds, seed=3)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.train_ids, fb.train_ids)
        assert np.array_equal(fa.validation_ids, fb.validation_ids)
        assert np.array_equal(fa.test_ids, fb.test_ids)
    c = make_folds(ds, seed=4)
    assert any(not np.array_equal(fa.test_ids, fc.test_ids)
               for fa, fc in zip(a, c))


def test_make_folds_too_small():
    ds = toy_graph_dataset(5)
    with pytest.raises(ConfigError):
        make_folds(ds, seed=0)


def test_holdout_split_partition():
    train = np.arange(100)
    fit, hold = holdout_split(train, np.random.default_rng(11))
    assert len(hold) == 10
    assert len(fit) == 90
    assert np.array_equal(np.sort(np.concatenate([fit, hold])), train)
    fit2, hold2 = holdout_split(train, np.random.default_rng(11))
    assert np.array_equal(fit, fit2) and np.array_equal(hold, hold2)


def test_dataset_round_trip():
    ds = toy_graph_dataset(6)
    assert Dataset.from_dict(ds.to_dict()) == ds


def test_dataset_validation_errors():
    g = Graph(2, [(0, 1)])
    with pytest.raises(ValueError):
        Dataset("bad", "graph", [g], class_count=2, feature_count=0)
    with pytest.raises(ValueError):
        Dataset("bad", "weird", [], class_count=2, feature_count=0)
