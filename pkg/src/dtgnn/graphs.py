"""Graph and dataset containers, split bookkeeping, deterministic iteration.

Graphs are immutable after construction: node ids are dense integers
0..n-1, undirected edges are stored once, and adjacency queries expose
both directions. Directed graphs store (source, target) pairs and
adjacency queries return in-neighbors (the message senders).
"""

import numpy as np
import scipy.sparse as sp

from .rng import substream

NODE_TASK = "node"
GRAPH_TASK = "graph"


class ConfigError(ValueError):
    """A dataset/split configuration that cannot be honored."""


class Graph:
    def __init__(self, node_count, edges, directed=False, features=None,
                 node_labels=None, graph_label=None):
        self.node_count = int(node_count)
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.node_count):
            raise ValueError(
                f"edge endpoint out of range for graph with {self.node_count} nodes")
        self.directed = bool(directed)
        if not self.directed and edges.size:
            # store each undirected edge once, canonically (min, max), deduped
            lo = np.minimum(edges[:, 0], edges[:, 1])
            hi = np.maximum(edges[:, 0], edges[:, 1])
            edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
        self.edges = edges
        self.features = None if features is None else np.asarray(features, dtype=np.int64)
        if self.features is not None and self.features.shape != (self.node_count,):
            raise ValueError("features must hold one categorical index per node")
        self.node_labels = None if node_labels is None else np.asarray(node_labels, dtype=np.int64)
        if self.node_labels is not None and self.node_labels.shape != (self.node_count,):
            raise ValueError("node_labels must hold one entry per node")
        self.graph_label = None if graph_label is None else int(graph_label)
        if self.node_labels is not None and self.graph_label is not None:
            raise ValueError("a graph carries node labels or a graph label, not both")
        self._csr = None

    @property
    def edge_count(self):
        """Stored edge count (undirected edges counted once)."""
        return self.edges.shape[0]

    def adjacency(self) -> sp.csr_matrix:
        """Receiver-oriented adjacency: row v lists the message senders of v.

        For undirected graphs both directions are present; for directed
        graphs entry (v, w) means an edge w -> v exists.
        """
        if self._csr is None:
            if self.directed:
                rows, cols = self.edges[:, 1], self.edges[:, 0]
            else:
                rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
                cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
            data = np.ones(len(rows), dtype=np.float64)
            csr = sp.csr_matrix((data, (rows, cols)),
                                shape=(self.node_count, self.node_count))
            csr.sum_duplicates()
            csr.sort_indices()
            self._csr = csr
        return self._csr

    def neighbors(self, node):
        """In-neighbors (directed) or all adjacent nodes (undirected), ascending."""
        if not 0 <= node < self.node_count:
            raise ValueError(f"node {node} out of range [0, {self.node_count})")
        csr = self.adjacency()
        return csr.indices[csr.indptr[node]:csr.indptr[node + 1]].astype(np.int64)

    def degrees(self):
        csr = self.adjacency()
        return np.diff(csr.indptr).astype(np.int64)

    def to_dict(self):
        return {
            "node_count": self.node_count,
            "directed": self.directed,
            "edges": self.edges.tolist(),
            "features": None if self.features is None else self.features.tolist(),
            "node_labels": None if self.node_labels is None else self.node_labels.tolist(),
            "graph_label": self.graph_label,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["node_count"], np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2),
                   directed=d["directed"], features=d["features"],
                   node_labels=d["node_labels"], graph_label=d["graph_label"])

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.to_dict() == other.to_dict()


class Dataset:
    def __init__(self, name, task, graphs, class_count, feature_count):
        if task not in (NODE_TASK, GRAPH_TASK):
            raise ValueError(f"unknown task {task!r}")
        self.name = name
        self.task = task
        self.graphs = list(graphs)
        self.class_count = int(class_count)
        self.feature_count = int(feature_count)
        for g in self.graphs:
            if task == NODE_TASK and g.node_labels is None:
                raise ValueError("node-classification graphs need node_labels")
            if task == GRAPH_TASK and g.graph_label is None:
                raise ValueError("graph-classification graphs need a graph_label")
            labels = g.node_labels if task == NODE_TASK else np.array([g.graph_label])
            present = labels[labels >= 0]
            if present.size and (present.min() < 0 or present.max() >= self.class_count):
                raise ValueError("label outside [0, class_count)")
            if self.feature_count == 0:
                if g.features is not None:
                    raise ValueError("feature_count=0 dataset with per-node features")
            else:
                if g.features is None or (g.features.size and g.features.max() >= self.feature_count):
                    raise ValueError("features inconsistent with feature_count")
        self._units = None

    def units(self):
        """Labeled units: (graph index, node index) pairs for node tasks,
        (graph index, -1) for graph tasks. Order is deterministic."""
        if self._units is None:
            out = []
            for gi, g in enumerate(self.graphs):
                if self.task == NODE_TASK:
                    for v in np.flatnonzero(g.node_labels >= 0):
                        out.append((gi, int(v)))
                else:
                    out.append((gi, -1))
            self._units = out
        return self._units

    def unit_labels(self):
        labels = []
        for gi, v in self.units():
            g = self.graphs[gi]
            labels.append(g.graph_label if v < 0 else int(g.node_labels[v]))
        return np.asarray(labels, dtype=np.int64)

    def to_dict(self):
        return {
            "name": self.name,
            "task": self.task,
            "class_count": self.class_count,
            "feature_count": self.feature_count,
            "graphs": [g.to_dict() for g in self.graphs],
        }

    @classmethod
    def from_dict(cls, d):
        graphs = [Graph.from_dict(g) for g in d["graphs"]]
        return cls(d["name"], d["task"], graphs, d["class_count"], d["feature_count"])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.to_dict() == other.to_dict()


class FoldSplit:
    """One cross-validation fold: disjoint unit-id sets covering the dataset."""

    def __init__(self, fold_index, train_ids, validation_ids, test_ids):
        self.fold_index = int(fold_index)
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        self.validation_ids = np.asarray(validation_ids, dtype=np.int64)
        self.test_ids = np.asarray(test_ids, dtype=np.int64)

    def to_dict(self):
        return {
            "fold_index": self.fold_index,
            "train_ids": self.train_ids.tolist(),
            "validation_ids": self.validation_ids.tolist(),
            "test_ids": self.test_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["fold_index"], d["train_ids"], d["validation_ids"], d["test_ids"])


def make_folds(dataset, seed, n_folds=10, validation_fraction=0.1):
    """Deterministic n-fold splits over the dataset's labeled units.

    Every unit lands in exactly one test set across folds; validation is
    drawn from the non-test remainder (10% by default); the rest trains.
    """
    n = len(dataset.units())
    if n < n_folds:
        raise ConfigError(
            f"dataset {dataset.name!r} has {n} labeled units, needs >= {n_folds}")
    order = substream(seed, "split", dataset.name).permutation(n)
    bounds = np.linspace(0, n, n_folds + 1).astype(int)
    folds = []
    for k in range(n_folds):
        test = np.sort(order[bounds[k]:bounds[k + 1]])
        rest = np.sort(np.setdiff1d(order, test, assume_unique=True))
        rng = substream(seed, "split", dataset.name, "validation", k)
        rest_shuffled = rng.permutation(rest)
        n_val = max(1, int(round(validation_fraction * len(rest))))
        val = np.sort(rest_shuffled[:n_val])
        train = np.sort(rest_shuffled[n_val:])
        folds.append(FoldSplit(k, train, val, test))
    return folds


def holdout_split(train_ids, rng, fraction=0.1):
    """Split training unit ids into (fit, holdout), holdout getting ``fraction``."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    shuffled = rng.permutation(train_ids)
    n_hold = max(1, int(round(fraction * len(train_ids))))
    return np.sort(shuffled[n_hold:]), np.sort(shuffled[:n_hold])
