"""Synthetic benchmark generators and TUDataset-format I/O.

Six generators cover the standard interpretability benchmarks: two
hand-designed tasks with exact label rules (Infection, Negative
Evidence) and four motif-attachment tasks (BA-Shapes, Tree-Cycles,
Tree-Grid, BA-2Motifs). Defaults are frozen so that the generated
node/edge/class statistics match the commonly reported dataset sizes.

Real-world graph-classification datasets are read from the TUDataset
plain-text layout (``DS_A.txt``, ``DS_graph_indicator.txt``, ...).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .graphs import Dataset, Graph, ConfigError, GRAPH_TASK, NODE_TASK
from .rng import substream

# House motif: two bottom nodes (0, 1), two middle (2, 3), one top (4).
HOUSE_EDGES = [(0, 1), (0, 2), (1, 3), (2, 3), (2, 4), (3, 4)]
HOUSE_ROLES = [1, 1, 2, 2, 3]  # base graph nodes are role/class 0

CYCLE6_EDGES = [(i, (i + 1) % 6) for i in range(6)]
CYCLE5_EDGES = [(i, (i + 1) % 5) for i in range(5)]
GRID3_EDGES = [
    (r * 3 + c, r * 3 + c + 1) for r in range(3) for c in range(2)
] + [
    (r * 3 + c, (r + 1) * 3 + c) for r in range(2) for c in range(3)
]


def _positive(**counts):
    for key, value in counts.items():
        if value <= 0:
            raise ConfigError(f"{key} must be positive, got {value}")


def generate_infection(seed=0, node_count=1000, edge_probability=0.003977,
                       infected_count=2):
    """Directed ER graph where a few nodes start out infected.

    Node features say healthy (0) or infected (1); the label of a node is
    the length of the shortest directed path from any infected node,
    bucketed as distances 0-5 plus a final class for distance >= 6 or
    unreachable (7 classes total).
    """
    _positive(node_count=node_count, infected_count=infected_count)
    rng = substream(seed, "datagen", "infection")
    mask = rng.random((node_count, node_count)) < edge_probability
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    edges = np.stack([src, dst], axis=1)

    infected = rng.choice(node_count, size=infected_count, replace=False)
    features = np.zeros(node_count, dtype=np.int64)
    features[infected] = 1

    out_adj = sp.csr_matrix(
        (np.ones(len(src)), (src, dst)), shape=(node_count, node_count))
    dist = csgraph.dijkstra(out_adj, directed=True, unweighted=True,
                            indices=infected, min_only=True)
    labels = np.where(np.isfinite(dist) & (dist <= 5), dist, 6).astype(np.int64)

    graph = Graph(node_count, edges, directed=True, features=features,
                  node_labels=labels)
    return Dataset("infection", NODE_TASK, [graph], class_count=7,
                   feature_count=2)


def generate_negative_evidence(seed=0, red_count=10, blue_count=10,
                               white_count=1980, max_links=10,
                               white_edge_probability=0.016025):
    """Ten red and ten blue hub nodes among a sea of white nodes.

    Each white node connects to r red and b blue nodes with (r, b) drawn
    uniformly from {0..max_links}^2 minus the diagonal; the task is to say
    which color is in the majority (label 0: more red, 1: more blue).
    White-white filler edges keep the colored links a small minority of
    the neighborhood, so counting -- not mere presence -- is required.
    Red and blue nodes are unlabeled.
    """
    _positive(red_count=red_count, blue_count=blue_count,
              white_count=white_count, max_links=max_links)
    if max_links > min(red_count, blue_count):
        raise ConfigError("max_links cannot exceed the hub counts")
    rng = substream(seed, "datagen", "negative_evidence")
    n = red_count + blue_count + white_count
    whites = np.arange(red_count + blue_count, n)

    r_links = rng.integers(0, max_links + 1, size=white_count)
    b_links = rng.integers(0, max_links + 1, size=white_count)
    ties = r_links == b_links
    while ties.any():
        r_links[ties] = rng.integers(0, max_links + 1, size=int(ties.sum()))
        b_links[ties] = rng.integers(0, max_links + 1, size=int(ties.sum()))
        ties = r_links == b_links

    edges = []
    for white, r, b in zip(whites, r_links, b_links):
        for red in rng.choice(red_count, size=r, replace=False):
            edges.append((white, red))
        for blue in rng.choice(blue_count, size=b, replace=False):
            edges.append((white, red_count + blue))
    hi, lo = np.triu_indices(white_count, k=1)
    keep = rng.random(len(hi)) < white_edge_probability
    ww = np.stack([whites[hi[keep]], whites[lo[keep]]], axis=1)
    edges = np.concatenate([np.asarray(edges, dtype=np.int64), ww], axis=0)

    features = np.zeros(n, dtype=np.int64)  # white = 0
    features[:red_count] = 1
    features[red_count:red_count + blue_count] = 2
    labels = np.full(n, -1, dtype=np.int64)
    labels[whites] = np.where(r_links > b_links, 0, 1)

    graph = Graph(n, edges, features=features, node_labels=labels)
    return Dataset("negative_evidence", NODE_TASK, [graph], class_count=2,
                   feature_count=3)


def _attach_motifs(base_edges, base_count, motif_edges, motif_labels,
                   motif_count, rng):
    """Append ``motif_count`` copies of a motif, each bridged to a random
    base node by a single edge. Returns (edges, labels)."""
    motif_size = len(motif_labels)
    edges = list(base_edges)
    labels = np.zeros(base_count + motif_count * motif_size, dtype=np.int64)
    for k in range(motif_count):
        offset = base_count + k * motif_size
        edges.extend((offset + a, offset + b) for a, b in motif_edges)
        edges.append((offset, int(rng.integers(base_count))))
        labels[offset:offset + motif_size] = motif_labels
    return np.asarray(edges, dtype=np.int64), labels


def generate_ba_shapes(seed=0, base_nodes=300, attachment=5, house_count=80):
    """Barabasi-Albert base graph with house motifs hung off random nodes.

    Classes: 0 base, 1 house bottom, 2 house middle, 3 house top.
    """
    _positive(base_nodes=base_nodes, attachment=attachment,
              house_count=house_count)
    rng = substream(seed, "datagen", "ba_shapes")
    base = nx.barabasi_albert_graph(base_nodes, attachment,
                                    seed=int(rng.integers(2 ** 31)))
    edges, labels = _attach_motifs(base.edges(), base_nodes, HOUSE_EDGES,
                                   HOUSE_ROLES, house_count, rng)
    graph = Graph(base_nodes + 5 * house_count, edges, node_labels=labels)
    return Dataset("ba_shapes", NODE_TASK, [graph], class_count=4,
                   feature_count=0)


def generate_tree_cycles(seed=0, tree_height=8, cycle_count=60):
    """Balanced binary tree with six-node cycles attached (label 1 = cycle)."""
    _positive(tree_height=tree_height, cycle_count=cycle_count)
    rng = substream(seed, "datagen", "tree_cycles")
    tree = nx.balanced_tree(2, tree_height)
    edges, labels = _attach_motifs(tree.edges(), tree.number_of_nodes(),
                                   CYCLE6_EDGES, [1] * 6, cycle_count, rng)
    graph = Graph(tree.number_of_nodes() + 6 * cycle_count, edges,
                  node_labels=labels)
    return Dataset("tree_cycles", NODE_TASK, [graph], class_count=2,
                   feature_count=0)


def generate_tree_grid(seed=0, tree_height=8, grid_count=80):
    """Balanced binary tree with 3x3 grids attached (label 1 = grid)."""
    _positive(tree_height=tree_height, grid_count=grid_count)
    rng = substream(seed, "datagen", "tree_grid")
    tree = nx.balanced_tree(2, tree_height)
    edges, labels = _attach_motifs(tree.edges(), tree.number_of_nodes(),
                                   GRID3_EDGES, [1] * 9, grid_count, rng)
    graph = Graph(tree.number_of_nodes() + 9 * grid_count, edges,
                  node_labels=labels)
    return Dataset("tree_grid", NODE_TASK, [graph], class_count=2,
                   feature_count=0)


def generate_ba_2motifs(seed=0, graph_count=1000, base_nodes=20, attachment=1):
    """Graph classification: BA base plus either a house (label 1) or a
    five-node cycle (label 0), attached by a single bridge edge."""
    _positive(graph_count=graph_count, base_nodes=base_nodes,
              attachment=attachment)
    rng = substream(seed, "datagen", "ba_2motifs")
    graphs = []
    for i in range(graph_count):
        base = nx.barabasi_albert_graph(base_nodes, attachment,
                                        seed=int(rng.integers(2 ** 31)))
        has_house = i < graph_count // 2
        motif = HOUSE_EDGES if has_house else CYCLE5_EDGES
        motif_size = 5
        edges = list(base.edges())
        edges.extend((base_nodes + a, base_nodes + b) for a, b in motif)
        edges.append((base_nodes, int(rng.integers(base_nodes))))
        graphs.append(Graph(base_nodes + motif_size, edges,
                            graph_label=int(has_house)))
    return Dataset("ba_2motifs", GRAPH_TASK, graphs, class_count=2,
                   feature_count=0)


GENERATORS = {
    "infection": generate_infection,
    "negative_evidence": generate_negative_evidence,
    "ba_shapes": generate_ba_shapes,
    "tree_cycles": generate_tree_cycles,
    "tree_grid": generate_tree_grid,
    "ba_2motifs": generate_ba_2motifs,
}

_ALIASES = {
    "negative": "negative_evidence",
    "negativeevidence": "negative_evidence",
    "bashapes": "ba_shapes",
    "treecycle": "tree_cycles",
    "treecycles": "tree_cycles",
    "tree_cycle": "tree_cycles",
    "treegrid": "tree_grid",
    "ba2motifs": "ba_2motifs",
}


def canonical_name(name):
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    key = _ALIASES.get(key.replace("_", ""), _ALIASES.get(key, key))
    if key not in GENERATORS:
        raise ConfigError(
            f"unknown synthetic dataset {name!r}; "
            f"choose from {sorted(GENERATORS)}")
    return key


@dataclass(frozen=True)
class GeneratorConfig:
    """Name + seed + generator-specific size overrides."""

    name: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ImportError:  # python < 3.11
                import tomli as tomllib
            raw = tomllib.loads(path.read_text())
        else:
            raw = json.loads(path.read_text())
        return cls(raw["name"], raw.get("seed", 0), raw.get("params", {}))


def generate(config, seed=None, **params):
    """Run a generator by name or :class:`GeneratorConfig`."""
    if isinstance(config, GeneratorConfig):
        name, seed, params = config.name, config.seed, config.params
    else:
        name = config
        seed = 0 if seed is None else seed
    return GENERATORS[canonical_name(name)](seed=seed, **params)


# --- TUDataset format -------------------------------------------------------


class TUDatasetError(ValueError):
    """Raised when a TUDataset directory is missing files or malformed."""


def _read_lines(path):
    return path.read_text().splitlines()


def _require(directory, name, suffix):
    path = Path(directory) / f"{name}_{suffix}.txt"
    if not path.is_file():
        raise TUDatasetError(f"missing file: {path.name} (in {directory})")
    return path


def parse_tudataset(directory, name):
    """Read a graph-classification dataset in TUDataset plain-text layout.

    Expects ``{name}_A.txt`` (1-indexed "i, j" edge lines),
    ``{name}_graph_indicator.txt`` (graph id per node, non-decreasing),
    ``{name}_graph_labels.txt``, and optionally ``{name}_node_labels.txt``
    whose values become one-hot node features. Graph and node label values
    are remapped to dense 0-based indices by sorted order.
    """
    directory = Path(directory)
    indicator_path = _require(directory, name, "graph_indicator")
    indicator = []
    for ln, line in enumerate(_read_lines(indicator_path), start=1):
        if not line.strip():
            continue
        try:
            indicator.append(int(line))
        except ValueError:
            raise TUDatasetError(
                f"{indicator_path.name}: line {ln}: not an integer") from None
        if len(indicator) >= 2 and indicator[-1] < indicator[-2]:
            raise TUDatasetError(
                f"{indicator_path.name}: line {ln}: graph indicator decreases")
    if not indicator:
        raise TUDatasetError(f"{indicator_path.name}: empty")
    indicator = np.asarray(indicator, dtype=np.int64)
    graph_ids = np.unique(indicator)
    if indicator.min() < 1 or len(graph_ids) != indicator.max():
        raise TUDatasetError(
            f"{indicator_path.name}: graph ids must cover 1..N contiguously")
    n_graphs = int(indicator.max())
    # global node id (1-indexed) -> (graph index, local node id)
    first_node = np.searchsorted(indicator, np.arange(1, n_graphs + 1))
    node_counts = np.bincount(indicator - 1, minlength=n_graphs)

    labels_path = _require(directory, name, "graph_labels")
    raw_labels = []
    for ln, line in enumerate(_read_lines(labels_path), start=1):
        if not line.strip():
            continue
        try:
            raw_labels.append(int(float(line)))
        except ValueError:
            raise TUDatasetError(
                f"{labels_path.name}: line {ln}: not a number") from None
    if len(raw_labels) != n_graphs:
        raise TUDatasetError(
            f"{labels_path.name}: {len(raw_labels)} labels for {n_graphs} graphs")
    classes = sorted(set(raw_labels))
    graph_labels = [classes.index(v) for v in raw_labels]

    node_label_path = directory / f"{name}_node_labels.txt"
    features = None
    feature_count = 0
    if node_label_path.is_file():
        raw = []
        for ln, line in enumerate(_read_lines(node_label_path), start=1):
            if not line.strip():
                continue
            try:
                raw.append(int(float(line)))
            except ValueError:
                raise TUDatasetError(
                    f"{node_label_path.name}: line {ln}: not a number") from None
        if len(raw) != len(indicator):
            raise TUDatasetError(
                f"{node_label_path.name}: {len(raw)} labels for "
                f"{len(indicator)} nodes")
        values = sorted(set(raw))
        feature_count = len(values)
        features = np.asarray([values.index(v) for v in raw], dtype=np.int64)

    adj_path = _require(directory, name, "A")
    edge_lists = [[] for _ in range(n_graphs)]
    for ln, line in enumerate(_read_lines(adj_path), start=1):
        if not line.strip():
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise TUDatasetError(
                f"{adj_path.name}: line {ln}: expected 'i, j'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise TUDatasetError(
                f"{adj_path.name}: line {ln}: not integers") from None
        if not (1 <= a <= len(indicator) and 1 <= b <= len(indicator)):
            raise TUDatasetError(
                f"{adj_path.name}: line {ln}: node id out of range")
        ga, gb = indicator[a - 1] - 1, indicator[b - 1] - 1
        if ga != gb:
            raise TUDatasetError(
                f"{adj_path.name}: line {ln}: edge joins two graphs")
        edge_lists[ga].append((a - 1 - first_node[ga], b - 1 - first_node[ga]))

    graphs = []
    for gi in range(n_graphs):
        lo, count = first_node[gi], node_counts[gi]
        feats = None if features is None else features[lo:lo + count]
        graphs.append(Graph(count, edge_lists[gi], features=feats,
                            graph_label=graph_labels[gi]))
    return Dataset(name, GRAPH_TASK, graphs, class_count=len(classes),
                   feature_count=feature_count)


def write_tudataset(dataset, directory, name=None):
    """Write a graph-classification dataset in TUDataset layout.

    Each undirected edge is written in both directions, 1-indexed, as the
    format expects. Returns the directory written to.
    """
    if dataset.task != GRAPH_TASK:
        raise TUDatasetError("TUDataset layout holds graph-classification data")
    name = name or dataset.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    a_lines, ind_lines, glab_lines, nlab_lines = [], [], [], []
    offset = 0
    for gi, g in enumerate(dataset.graphs, start=1):
        if g.directed:
            raise TUDatasetError("TUDataset layout holds undirected graphs")
        both = np.concatenate([g.edges, g.edges[:, ::-1]], axis=0)
        both = both[np.lexsort((both[:, 1], both[:, 0]))]
        a_lines.extend(f"{a + offset + 1}, {b + offset + 1}" for a, b in both)
        ind_lines.extend([str(gi)] * g.node_count)
        glab_lines.append(str(g.graph_label))
        if dataset.feature_count:
            nlab_lines.extend(str(int(v)) for v in g.features)
        offset += g.node_count

    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text(
        "\n".join(ind_lines) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(glab_lines) + "\n")
    if dataset.feature_count:
        (directory / f"{name}_node_labels.txt").write_text(
            "\n".join(nlab_lines) + "\n")
    return directory


def write_dataset(dataset, directory, name=None):
    """Write any Dataset to ``directory``.

    Graph-classification data goes out in plain TUDataset layout.  Node
    classification reuses the same file family — adjacency, indicator, and
    ``{name}_node_labels.txt`` for features — plus ``{name}_node_targets.txt``
    for the per-node classes and a ``{name}_meta.json`` sidecar carrying what
    those files cannot (task, directedness, class/feature counts).
    """
    if dataset.task == GRAPH_TASK:
        return write_tudataset(dataset, directory, name)
    name = name or dataset.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    a_lines, ind_lines, target_lines, nlab_lines = [], [], [], []
    offset = 0
    for gi, g in enumerate(dataset.graphs, start=1):
        a_lines.extend(f"{a + offset + 1}, {b + offset + 1}"
                       for a, b in g.edges)
        ind_lines.extend([str(gi)] * g.node_count)
        target_lines.extend(str(int(v)) for v in g.node_labels)
        if dataset.feature_count:
            nlab_lines.extend(str(int(v)) for v in g.features)
        offset += g.node_count

    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text(
        "\n".join(ind_lines) + "\n")
    (directory / f"{name}_node_targets.txt").write_text(
        "\n".join(target_lines) + "\n")
    if dataset.feature_count:
        (directory / f"{name}_node_labels.txt").write_text(
            "\n".join(nlab_lines) + "\n")
    meta = {"name": name, "task": dataset.task,
            "directed": any(g.directed for g in dataset.graphs),
            "class_count": dataset.class_count,
            "feature_count": dataset.feature_count}
    (directory / f"{name}_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def read_dataset(directory, name):
    """Inverse of :func:`write_dataset`: dispatches on the meta sidecar,
    falling back to plain TUDataset parsing when there is none."""
    directory = Path(directory)
    meta_path = directory / f"{name}_meta.json"
    if not meta_path.is_file():
        return parse_tudataset(directory, name)
    meta = json.loads(meta_path.read_text())

    def ints(path):
        return np.asarray([int(line) for line in _read_lines(path)
                           if line.strip()], dtype=np.int64)

    indicator = ints(_require(directory, name, "graph_indicator"))
    targets = ints(_require(directory, name, "node_targets"))
    if len(targets) != len(indicator):
        raise TUDatasetError(
            f"{name}_node_targets.txt: {len(targets)} targets for "
            f"{len(indicator)} nodes")
    features = None
    feature_path = directory / f"{name}_node_labels.txt"
    if feature_path.is_file():
        features = ints(feature_path)

    pairs = []
    for ln, line in enumerate(_read_lines(_require(directory, name, "A")),
                              start=1):
        if not line.strip():
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise TUDatasetError(f"{name}_A.txt: line {ln}: expected 'i, j'")
        pairs.append((int(parts[0]) - 1, int(parts[1]) - 1))
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    n_graphs = int(indicator.max())
    first = np.searchsorted(indicator, np.arange(1, n_graphs + 1))
    counts = np.bincount(indicator - 1, minlength=n_graphs)
    graphs = []
    for gi in range(n_graphs):
        lo, count = first[gi], counts[gi]
        inside = (indicator[edges[:, 0]] - 1 == gi) if len(edges) \
            else np.zeros(0, dtype=bool)
        graphs.append(Graph(
            count, edges[inside] - lo, directed=meta["directed"],
            features=None if features is None else features[lo:lo + count],
            node_labels=targets[lo:lo + count]))
    return Dataset(meta["name"], NODE_TASK, graphs,
                   class_count=meta["class_count"],
                   feature_count=meta["feature_count"])
