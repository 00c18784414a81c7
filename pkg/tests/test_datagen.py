import json

import networkx as nx
import numpy as np
import pytest

from dtgnn import datagen
from dtgnn.graphs import ConfigError

TOLERANCE = 0.10  # generators are stochastic; counts must land within 10%


def within(value, target):
    return (1 - TOLERANCE) * target <= value <= (1 + TOLERANCE) * target


def block_edges(graph, lo, hi):
    """Edges fully inside [lo, hi) and edges crossing its boundary."""
    e = graph.edges
    inside = (e >= lo) & (e < hi)
    return e[inside.all(axis=1)], e[inside.any(axis=1) & ~inside.all(axis=1)]


# --- infection ---------------------------------------------------------------


def test_infection_shape():
    ds = datagen.generate_infection(seed=0)
    assert ds.task == "node"
    assert ds.class_count == 7
    assert ds.feature_count == 2
    g = ds.graphs[0]
    assert len(ds.graphs) == 1
    assert g.directed
    assert g.node_count == 1000
    assert within(g.edge_count, 3973)
    assert set(np.unique(g.node_labels)) == set(range(7))


def test_infection_infected_nodes_are_class_zero():
    g = datagen.generate_infection(seed=1).graphs[0]
    assert np.array_equal(g.node_labels == 0, g.features == 1)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_infection_labels_match_bfs_oracle(seed):
    g = datagen.generate_infection(seed=seed).graphs[0]
    # independent oracle: BFS from a virtual source wired to all infected
    G = nx.DiGraph()
    G.add_nodes_from(range(g.node_count))
    G.add_edges_from(map(tuple, g.edges))
    source = g.node_count
    G.add_edges_from((source, v) for v in np.flatnonzero(g.features == 1))
    dist = nx.single_source_shortest_path_length(G, source)
    for v in range(g.node_count):
        d = dist[v] - 1 if v in dist else None
        expected = d if d is not None and d <= 5 else 6
        assert g.node_labels[v] == expected


# --- negative evidence -------------------------------------------------------


def test_negative_evidence_shape():
    ds = datagen.generate_negative_evidence(seed=0)
    g = ds.graphs[0]
    assert ds.class_count == 2
    assert ds.feature_count == 3
    assert not g.directed
    assert g.node_count == 2000
    assert within(2 * g.edge_count, 102394)
    assert np.sum(g.features == 1) == 10
    assert np.sum(g.features == 2) == 10
    # red and blue nodes carry no label
    assert np.all(g.node_labels[g.features != 0] == -1)
    assert np.all(g.node_labels[g.features == 0] >= 0)


@pytest.mark.parametrize("seed", [0, 1])
def test_negative_evidence_labels_match_recount_oracle(seed):
    g = datagen.generate_negative_evidence(seed=seed).graphs[0]
    for v in np.flatnonzero(g.features == 0):
        colors = g.features[g.neighbors(v)]
        red, blue = np.sum(colors == 1), np.sum(colors == 2)
        assert red != blue
        assert g.node_labels[v] == (0 if red > blue else 1)


def test_negative_evidence_rejects_impossible_link_count():
    with pytest.raises(ConfigError):
        datagen.generate_negative_evidence(red_count=4, max_links=10)


# --- motif datasets ----------------------------------------------------------


def test_ba_shapes_structure():
    ds = datagen.generate_ba_shapes(seed=0)
    g = ds.graphs[0]
    assert ds.class_count == 4
    assert ds.feature_count == 0
    assert g.node_count == 700
    assert within(2 * g.edge_count, 4110)
    assert np.all(g.node_labels[:300] == 0)
    for k in range(80):
        lo = 300 + 5 * k
        inside, crossing = block_edges(g, lo, lo + 5)
        assert len(inside) == 6  # the house itself
        assert len(crossing) == 1  # one bridge
        local = {tuple(sorted(e - lo)) for e in inside}
        assert local == {tuple(sorted(e)) for e in datagen.HOUSE_EDGES}
        assert list(g.node_labels[lo:lo + 5]) == datagen.HOUSE_ROLES


def test_tree_cycles_structure():
    ds = datagen.generate_tree_cycles(seed=0)
    g = ds.graphs[0]
    assert ds.class_count == 2
    assert g.node_count == 871
    assert within(2 * g.edge_count, 1942)
    inside, _ = block_edges(g, 0, 511)
    tree = nx.Graph(list(map(tuple, inside)))
    tree.add_nodes_from(range(511))
    assert nx.is_tree(tree)
    assert np.all(g.node_labels[:511] == 0)
    for k in range(60):
        lo = 511 + 6 * k
        inside, crossing = block_edges(g, lo, lo + 6)
        assert len(inside) == 6 and len(crossing) == 1
        degrees = np.zeros(6, dtype=int)
        for a, b in inside - lo:
            degrees[a] += 1
            degrees[b] += 1
        assert np.all(degrees == 2)  # a plain cycle
        assert np.all(g.node_labels[lo:lo + 6] == 1)


def test_tree_grid_structure():
    ds = datagen.generate_tree_grid(seed=0)
    g = ds.graphs[0]
    assert g.node_count == 1231
    assert within(2 * g.edge_count, 3130)
    for k in range(80):
        lo = 511 + 9 * k
        inside, crossing = block_edges(g, lo, lo + 9)
        assert len(inside) == 12 and len(crossing) == 1
        degrees = np.zeros(9, dtype=int)
        for a, b in inside - lo:
            degrees[a] += 1
            degrees[b] += 1
        assert sorted(degrees) == [2, 2, 2, 2, 3, 3, 3, 3, 4]
        assert np.all(g.node_labels[lo:lo + 9] == 1)


def test_ba_2motifs_structure():
    ds = datagen.generate_ba_2motifs(seed=0)
    assert ds.task == "graph"
    assert len(ds.graphs) == 1000
    labels = np.array([g.graph_label for g in ds.graphs])
    assert np.sum(labels == 1) == 500 and np.sum(labels == 0) == 500
    assert within(np.mean([2 * g.edge_count for g in ds.graphs]), 50.96)
    for g in ds.graphs:
        assert g.node_count == 25
        inside, crossing = block_edges(g, 20, 25)
        assert len(crossing) == 1
        local = {tuple(sorted(e - 20)) for e in inside}
        if g.graph_label == 1:
            assert local == {tuple(sorted(e)) for e in datagen.HOUSE_EDGES}
        else:
            assert local == {tuple(sorted(e)) for e in datagen.CYCLE5_EDGES}


# --- dispatch / config -------------------------------------------------------


def test_generators_deterministic():
    for name in datagen.GENERATORS:
        a = datagen.generate(name, seed=5)
        b = datagen.generate(name, seed=5)
        assert a == b, name
    a = datagen.generate("infection", seed=5)
    c = datagen.generate("infection", seed=6)
    assert a != c


def test_canonical_name_aliases():
    assert datagen.canonical_name("Tree-Cycle") == "tree_cycles"
    assert datagen.canonical_name("BA Shapes") == "ba_shapes"
    assert datagen.canonical_name("negative evidence") == "negative_evidence"
    with pytest.raises(ConfigError):
        datagen.canonical_name("karate_club")


def test_generator_config_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(
        {"name": "tree_cycles", "seed": 3, "params": {"cycle_count": 5}}))
    cfg = datagen.GeneratorConfig.load(path)
    ds = datagen.generate(cfg)
    assert ds.graphs[0].node_count == 511 + 30


def test_generator_config_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text('name = "ba_2motifs"\nseed = 1\n[params]\ngraph_count = 4\n')
    ds = datagen.generate(datagen.GeneratorConfig.load(path))
    assert len(ds.graphs) == 4


def test_bad_counts_rejected():
    with pytest.raises(ConfigError):
        datagen.generate_tree_cycles(cycle_count=0)
    with pytest.raises(ConfigError):
        datagen.generate_infection(node_count=-5)


# --- TUDataset format --------------------------------------------------------


def write_toy_tudataset(directory, name="TOY"):
    """Two triangles, the second with a pendant node; labels -1/1."""
    (directory / f"{name}_A.txt").write_text(
        "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n"
        "4, 5\n5, 4\n5, 6\n6, 5\n4, 6\n6, 4\n6, 7\n7, 6\n")
    (directory / f"{name}_graph_indicator.txt").write_text(
        "1\n1\n1\n2\n2\n2\n2\n")
    (directory / f"{name}_graph_labels.txt").write_text("-1\n1\n")
    (directory / f"{name}_node_labels.txt").write_text("0\n0\n2\n0\n2\n2\n0\n")


def test_parse_toy_tudataset(tmp_path):
    write_toy_tudataset(tmp_path)
    ds = datagen.parse_tudataset(tmp_path, "TOY")
    assert len(ds.graphs) == 2
    assert ds.class_count == 2
    assert ds.feature_count == 2  # labels {0, 2} densified to {0, 1}
    g0, g1 = ds.graphs
    assert g0.node_count == 3 and g0.edge_count == 3
    assert g1.node_count == 4 and g1.edge_count == 4
    assert g0.graph_label == 0 and g1.graph_label == 1  # -1 -> 0, 1 -> 1
    assert list(g1.features) == [0, 1, 1, 0]
    assert list(g1.neighbors(2)) == [0, 1, 3]


def test_parse_single_graph_minimal(tmp_path):
    (tmp_path / "T_A.txt").write_text("1, 2\n2, 3\n")
    (tmp_path / "T_graph_indicator.txt").write_text("1\n1\n1\n")
    (tmp_path / "T_graph_labels.txt").write_text("0\n")
    ds = datagen.parse_tudataset(tmp_path, "T")
    assert len(ds.graphs) == 1
    assert ds.graphs[0].node_count == 3
    assert ds.graphs[0].edge_count == 2
    assert ds.feature_count == 0


def test_parse_missing_file_names_it(tmp_path):
    write_toy_tudataset(tmp_path)
    (tmp_path / "TOY_A.txt").unlink()
    with pytest.raises(datagen.TUDatasetError, match="TOY_A.txt"):
        datagen.parse_tudataset(tmp_path, "TOY")


def test_parse_cross_graph_edge_reports_line(tmp_path):
    write_toy_tudataset(tmp_path)
    (tmp_path / "TOY_A.txt").write_text("1, 2\n2, 4\n")
    with pytest.raises(datagen.TUDatasetError, match="line 2"):
        datagen.parse_tudataset(tmp_path, "TOY")


def test_parse_decreasing_indicator_reports_line(tmp_path):
    write_toy_tudataset(tmp_path)
    (tmp_path / "TOY_graph_indicator.txt").write_text("1\n2\n1\n")
    with pytest.raises(datagen.TUDatasetError, match="line 3"):
        datagen.parse_tudataset(tmp_path, "TOY")


def test_parse_label_count_mismatch(tmp_path):
    write_toy_tudataset(tmp_path)
    (tmp_path / "TOY_graph_labels.txt").write_text("1\n")
    with pytest.raises(datagen.TUDatasetError, match="graph_labels"):
        datagen.parse_tudataset(tmp_path, "TOY")


def test_tudataset_write_parse_round_trip(tmp_path):
    ds = datagen.generate_ba_2motifs(seed=2, graph_count=6)
    out = datagen.write_tudataset(ds, tmp_path / "out", name="ba_2motifs")
    back = datagen.parse_tudataset(out, "ba_2motifs")
    assert back == ds


def test_tudataset_write_parse_round_trip_with_features(tmp_path):
    write_toy_tudataset(tmp_path)
    ds = datagen.parse_tudataset(tmp_path, "TOY")
    out = datagen.write_tudataset(ds, tmp_path / "again")
    assert datagen.parse_tudataset(out, "TOY") == ds


def test_write_rejects_node_task(tmp_path):
    ds = datagen.generate_tree_cycles(seed=0, cycle_count=2)
    with pytest.raises(datagen.TUDatasetError):
        datagen.write_tudataset(ds, tmp_path)
