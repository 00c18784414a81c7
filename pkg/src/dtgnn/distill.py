"""Distillation of a trained differentiable GNN into decision trees.

Every MLP block of the differentiable model (encoder, one per message-passing
layer, decoder) is replaced by a CART-style decision tree fitted to imitate
that block's argmax behaviour on the training graphs.  The resulting
:class:`DTGNNModel` is a faithful, fully discrete pipeline: integer states,
integer neighbor counts, and root-to-leaf decision paths for every node.

Tree feature spaces
-------------------
Layer trees see, for each node, three blocks of features:

* state block   -- |S| binary indicators, one per own state,
* message block -- |S| integer neighbor-state counts,
* delta block   -- |S|^2 - |S| binary pairwise comparisons,
  one per ordered pair (s, s'), set iff count(s) > count(s').

The encoder tree sees the raw categorical input features; the node-level
decoder tree sees the per-layer state indicators; the graph-level decoder
tree sees pooled per-state counts per layer plus delta comparisons between
the pooled counts of the same layer.
"""

import heapq
from dataclasses import dataclass, replace

import numpy as np

from .graphs import NODE_TASK
from .diffgnn import GraphBatch, ModelConfig

LEAF_CAP = 100

STATE_TEST = "state"
COUNT_THRESHOLD = "count"
DELTA_TEST = "delta"
INPUT_TEST = "input"


@dataclass(frozen=True)
class Branch:
    """One internal-node test.

    * ``state``: own state is ``state``  (binary indicator)
    * ``count``: neighbor count of ``state`` exceeds ``threshold``
    * ``delta``: count(``state``) > count(``other_state``)
    * ``input``: raw input feature equals ``state``

    ``layer`` qualifies decoder-tree features with the message-passing layer
    whose output they read; it is None inside the per-layer trees.
    """

    kind: str
    state: int
    other_state: int = None
    threshold: int = None
    layer: int = None

    def to_dict(self):
        out = {"kind": self.kind, "state": int(self.state)}
        if self.other_state is not None:
            out["other_state"] = int(self.other_state)
        if self.threshold is not None:
            out["threshold"] = int(self.threshold)
        if self.layer is not None:
            out["layer"] = int(self.layer)
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], state=d["state"],
                   other_state=d.get("other_state"),
                   threshold=d.get("threshold"), layer=d.get("layer"))

    def describe(self):
        where = "" if self.layer is None else f"[L{self.layer}] "
        if self.kind == STATE_TEST:
            return f"{where}state == {self.state}"
        if self.kind == COUNT_THRESHOLD:
            return f"{where}count({self.state}) > {self.threshold}"
        if self.kind == DELTA_TEST:
            return f"{where}count({self.state}) > count({self.other_state})"
        return f"input == {self.state}"


class FeatureSpace:
    """Typed columns of a tree's training table.

    Each column is a :class:`Branch` template (count templates carry no
    threshold; the threshold is chosen when a split is made).
    """

    def __init__(self, columns):
        self.columns = list(columns)
        self.binary = np.array([c.kind != COUNT_THRESHOLD for c in columns])

    def __len__(self):
        return len(self.columns)

    def branch_for(self, column, threshold):
        template = self.columns[column]
        if template.kind == COUNT_THRESHOLD:
            return replace(template, threshold=int(threshold))
        return template

    def column_of(self, branch):
        probe = replace(branch, threshold=None) \
            if branch.kind == COUNT_THRESHOLD else branch
        return self.columns.index(probe)

    def to_dict(self):
        return [c.to_dict() for c in self.columns]

    @classmethod
    def from_dict(cls, d):
        return cls([Branch.from_dict(c) for c in d])

    @classmethod
    def layer_space(cls, state_count):
        cols = [Branch(STATE_TEST, s) for s in range(state_count)]
        cols += [Branch(COUNT_THRESHOLD, s) for s in range(state_count)]
        cols += [Branch(DELTA_TEST, s, other_state=t)
                 for s in range(state_count)
                 for t in range(state_count) if t != s]
        return cls(cols)

    @classmethod
    def encoder_space(cls, feature_count):
        return cls([Branch(INPUT_TEST, f)
                    for f in range(max(feature_count, 1))])

    @classmethod
    def node_decoder_space(cls, layer_count, state_count):
        return cls([Branch(STATE_TEST, s, layer=l)
                    for l in range(layer_count + 1)
                    for s in range(state_count)])

    @classmethod
    def graph_decoder_space(cls, layer_count, state_count):
        cols = []
        for l in range(layer_count + 1):
            cols += [Branch(COUNT_THRESHOLD, s, layer=l)
                     for s in range(state_count)]
            cols += [Branch(DELTA_TEST, s, other_state=t, layer=l)
                     for s in range(state_count)
                     for t in range(state_count) if t != s]
        return cls(cols)


# ---------------------------------------------------------------------------
# row builders


def _one_hot_int(indices, width):
    out = np.zeros((len(indices), width), dtype=np.int64)
    out[np.arange(len(indices)), indices] = 1
    return out


def delta_block(counts):
    """Binary comparisons count(s) > count(s') for all ordered pairs s != s'."""
    counts = np.asarray(counts)
    s = counts.shape[1]
    pairs = [(a, b) for a in range(s) for b in range(s) if b != a]
    if not pairs:
        return np.zeros((len(counts), 0), dtype=np.int64)
    left = counts[:, [a for a, _ in pairs]]
    right = counts[:, [b for _, b in pairs]]
    return (left > right).astype(np.int64)


def layer_rows(state_ids, counts):
    """Feature rows of one message-passing layer: state, counts, deltas."""
    counts = np.asarray(counts, dtype=np.int64)
    own = _one_hot_int(state_ids, counts.shape[1])
    return np.concatenate([own, counts, delta_block(counts)], axis=1)


def encoder_rows(batch):
    if batch.feature_count:
        return _one_hot_int(batch.features, batch.feature_count)
    return np.ones((batch.node_count, 1), dtype=np.int64)


def node_decoder_rows(state_ids, state_count):
    """Concatenated per-layer state indicators, (n, (L+1)*|S|)."""
    blocks = [_one_hot_int(col, state_count) for col in state_ids.T]
    return np.concatenate(blocks, axis=1)


def graph_decoder_rows(pooled):
    """Pooled count + delta blocks per layer; pooled is (G, L+1, |S|) ints."""
    pooled = np.asarray(pooled, dtype=np.int64)
    blocks = []
    for l in range(pooled.shape[1]):
        counts = pooled[:, l, :]
        blocks += [counts, delta_block(counts)]
    return np.concatenate(blocks, axis=1)


# ---------------------------------------------------------------------------
# decision trees


@dataclass
class TreeNode:
    index: int
    branch: Branch = None       # None marks a leaf
    column: int = None
    true_child: int = None
    false_child: int = None
    klass: int = 0
    histogram: np.ndarray = None
    samples: int = 0

    @property
    def is_leaf(self):
        return self.branch is None


class DecisionTree:
    """A fitted tree over a typed feature space.

    Internal nodes test one feature column; the true edge is taken when the
    test holds.  Every node keeps the training-sample class histogram seen
    during fitting, which pruning later uses for replacement leaves.
    """

    def __init__(self, nodes, feature_space, target_count):
        self.nodes = nodes
        self.feature_space = feature_space
        self.target_count = int(target_count)
        self._parents = None

    @property
    def root(self):
        return self.nodes[0]

    @property
    def leaf_count(self):
        return sum(1 for n in self.nodes if n.is_leaf)

    @property
    def decision_node_count(self):
        return sum(1 for n in self.nodes if not n.is_leaf)

    def apply(self, rows):
        """Route rows; returns (predicted class, leaf node index) per row."""
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[1] != len(self.feature_space):
            raise ValueError(
                f"expected {len(self.feature_space)} feature columns, "
                f"got shape {rows.shape}")
        preds = np.zeros(len(rows), dtype=np.int64)
        leafs = np.zeros(len(rows), dtype=np.int64)
        stack = [(0, np.arange(len(rows)))]
        while stack:
            index, idx = stack.pop()
            if not idx.size:
                continue
            node = self.nodes[index]
            if node.is_leaf:
                preds[idx] = node.klass
                leafs[idx] = node.index
                continue
            taken = self._test(node, rows[idx])
            stack.append((node.true_child, idx[taken]))
            stack.append((node.false_child, idx[~taken]))
        return preds, leafs

    def _test(self, node, rows):
        threshold = node.branch.threshold \
            if node.branch.kind == COUNT_THRESHOLD else 0
        return rows[:, node.column] > threshold

    def decision_path(self, leaf_index):
        """Root-to-leaf list of (node index, branch outcome taken)."""
        if self._parents is None:
            self._parents = {}
            for node in self.nodes:
                if not node.is_leaf:
                    self._parents[node.true_child] = (node.index, True)
                    self._parents[node.false_child] = (node.index, False)
        path = []
        index = leaf_index
        while index in self._parents:
            parent, took = self._parents[index]
            path.append((parent, took))
            index = parent
        return path[::-1]

    def to_dict(self):
        nodes = []
        for n in self.nodes:
            d = {"histogram": [int(c) for c in n.histogram],
                 "samples": int(n.samples)}
            if n.is_leaf:
                d["klass"] = int(n.klass)
            else:
                d.update(branch=n.branch.to_dict(), column=int(n.column),
                         true_child=int(n.true_child),
                         false_child=int(n.false_child), klass=int(n.klass))
            nodes.append(d)
        return {"nodes": nodes, "target_count": self.target_count,
                "feature_space": self.feature_space.to_dict()}

    @classmethod
    def from_dict(cls, d):
        space = FeatureSpace.from_dict(d["feature_space"])
        nodes = []
        for i, nd in enumerate(d["nodes"]):
            branch = Branch.from_dict(nd["branch"]) if "branch" in nd else None
            nodes.append(TreeNode(
                index=i, branch=branch, column=nd.get("column"),
                true_child=nd.get("true_child"),
                false_child=nd.get("false_child"),
                klass=int(nd["klass"]),
                histogram=np.asarray(nd["histogram"], dtype=np.int64),
                samples=int(nd["samples"])))
        return cls(nodes, space, d["target_count"])


def _best_split(rows, targets, subset, target_count, gini_parent):
    """Best (decrease, column, threshold) over all columns, or None.

    Ties prefer the lowest column index, then the lowest threshold; the
    threshold is the floor of the CART midpoint between adjacent observed
    values, so every test reads ``value > threshold`` over integers.
    """
    y = targets[subset]
    n = len(subset)
    onehot = np.zeros((n, target_count))
    onehot[np.arange(n), y] = 1
    total = onehot.sum(axis=0)
    best = None
    for j in range(rows.shape[1]):
        v = rows[subset, j]
        order = np.argsort(v, kind="stable")
        vs = v[order]
        cuts = np.flatnonzero(vs[:-1] != vs[1:])
        if not cuts.size:
            continue
        cum = np.cumsum(onehot[order], axis=0)
        left = cum[cuts]
        nl = (cuts + 1).astype(np.float64)
        nr = n - nl
        right = total - left
        gini_l = 1.0 - ((left / nl[:, None]) ** 2).sum(axis=1)
        gini_r = 1.0 - ((right / nr[:, None]) ** 2).sum(axis=1)
        decrease = gini_parent - (nl / n) * gini_l - (nr / n) * gini_r
        k = int(np.argmax(decrease))        # first max = lowest threshold
        if decrease[k] <= 1e-12:
            continue
        threshold = int(np.floor((vs[cuts[k]] + vs[cuts[k] + 1]) / 2.0))
        if best is None or decrease[k] > best[0] + 1e-12:
            best = (float(decrease[k]), j, threshold)
    return best


def fit_tree(rows, targets, feature_space, target_count=None,
             leaf_cap=LEAF_CAP):
    """Fit a CART tree (Gini impurity) grown best-first up to ``leaf_cap``.

    Growth expands, at each step, the leaf whose best split yields the
    largest impurity decrease weighted by the fraction of samples routed
    through it, which makes the leaf cap spend its budget where it matters.
    """
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if rows.ndim != 2 or len(rows) != len(targets) or not len(targets):
        raise ValueError("need a non-empty table with matching targets")
    if len(feature_space) != rows.shape[1]:
        raise ValueError("feature space does not match table width")
    if target_count is None:
        target_count = int(targets.max()) + 1

    nodes = []

    def make_node(subset):
        hist = np.bincount(targets[subset], minlength=target_count)
        node = TreeNode(index=len(nodes), klass=int(hist.argmax()),
                        histogram=hist, samples=len(subset))
        nodes.append(node)
        return node

    def gini(node):
        p = node.histogram / node.samples
        return 1.0 - (p ** 2).sum()

    heap = []

    def offer(node, subset):
        if (node.histogram > 0).sum() <= 1:
            return
        split = _best_split(rows, targets, subset, target_count, gini(node))
        if split is not None:
            weighted = split[0] * len(subset) / len(targets)
            heapq.heappush(heap, (-weighted, node.index, split, subset))

    everything = np.arange(len(targets))
    offer(make_node(everything), everything)
    leaves = 1
    while heap and leaves < leaf_cap:
        _, index, (_, column, threshold), subset = heapq.heappop(heap)
        node = nodes[index]
        taken = rows[subset, column] > threshold
        node.branch = feature_space.branch_for(column, threshold)
        node.column = column
        true_node = make_node(subset[taken])
        false_node = make_node(subset[~taken])
        node.true_child = true_node.index
        node.false_child = false_node.index
        leaves += 1
        offer(true_node, subset[taken])
        offer(false_node, subset[~taken])
    return DecisionTree(nodes, feature_space, target_count)


# ---------------------------------------------------------------------------
# the distilled pipeline


class DTGNNModel:
    """Fully discrete tree pipeline mirroring a trained differentiable model."""

    def __init__(self, config, feature_count, encoder, layers, decoder,
                 fidelity=None):
        self.config = config
        self.feature_count = int(feature_count)
        self.encoder = encoder
        self.layers = list(layers)
        self.decoder = decoder
        self.fidelity = dict(fidelity or {})

    @property
    def blocks(self):
        named = [("encoder", self.encoder)]
        named += [(f"layer{i}", t) for i, t in enumerate(self.layers)]
        named.append(("decoder", self.decoder))
        return named

    def to_dict(self):
        return {"config": self.config.to_dict(),
                "feature_count": self.feature_count,
                "encoder": self.encoder.to_dict(),
                "layers": [t.to_dict() for t in self.layers],
                "decoder": self.decoder.to_dict(),
                "fidelity": self.fidelity}

    @classmethod
    def from_dict(cls, d):
        return cls(config=ModelConfig.from_dict(d["config"]),
                   feature_count=d["feature_count"],
                   encoder=DecisionTree.from_dict(d["encoder"]),
                   layers=[DecisionTree.from_dict(t) for t in d["layers"]],
                   decoder=DecisionTree.from_dict(d["decoder"]),
                   fidelity=d.get("fidelity"))


def record_traces(model, dataset, fit_ids):
    """Input/output tables of every MLP block on the fit portion of the data.

    The trained model runs in evaluation mode (plain argmax states).  Layer
    tables hold one row per node of every recorded graph; the decoder table
    holds one row per fit unit (labeled node, or one per training graph).
    Targets are always the block's own argmax output, never dataset labels.
    """
    fit_ids = np.asarray(fit_ids, dtype=np.int64)
    if not fit_ids.size:
        raise ValueError("record_traces needs at least one fit unit")
    units = dataset.units()
    if dataset.task == NODE_TASK:
        batch = GraphBatch(dataset)
    else:
        graph_ids = sorted({units[u][0] for u in fit_ids})
        batch = GraphBatch(dataset, graph_ids)

    states, logits = model.forward(batch, training=False)
    ids = np.stack([s.values.argmax(axis=1) for s in states], axis=1)
    state_count = model.config.state_count

    tables = {"encoder": (encoder_rows(batch), ids[:, 0])}
    for i in range(model.config.layer_count):
        counts = batch.adjacency @ _one_hot_int(ids[:, i], state_count)
        counts = np.rint(counts).astype(np.int64)
        tables[f"layer{i}"] = (layer_rows(ids[:, i], counts), ids[:, i + 1])

    predicted = logits.values.argmax(axis=1)
    if dataset.task == NODE_TASK:
        rows, _ = batch.rows_for(fit_ids)
        table = node_decoder_rows(ids, state_count)[rows]
        tables["decoder"] = (table, predicted[rows])
    else:
        pooled = _pooled_counts(batch, ids, state_count)
        tables["decoder"] = (graph_decoder_rows(pooled), predicted)
    return tables


def _pooled_counts(batch, ids, state_count):
    """Per-graph per-layer state counts, (G, L+1, |S|) ints."""
    layers = ids.shape[1]
    pooled = np.zeros((batch.graph_count, layers, state_count),
                      dtype=np.int64)
    for l in range(layers):
        np.add.at(pooled[:, l, :], (batch.segments, ids[:, l]), 1)
    return pooled


def distill(model, dataset, fit_ids, leaf_cap=LEAF_CAP):
    """Fit one decision tree per MLP block and assemble the tree pipeline."""
    tables = record_traces(model, dataset, fit_ids)
    config = model.config
    s = config.state_count
    spaces = {"encoder": FeatureSpace.encoder_space(model.feature_count)}
    for i in range(config.layer_count):
        spaces[f"layer{i}"] = FeatureSpace.layer_space(s)
    if dataset.task == NODE_TASK:
        spaces["decoder"] = FeatureSpace.node_decoder_space(
            config.layer_count, s)
    else:
        spaces["decoder"] = FeatureSpace.graph_decoder_space(
            config.layer_count, s)

    trees, fidelity = {}, {}
    for name, (rows, targets) in tables.items():
        width = s if name != "decoder" else config.class_count
        tree = fit_tree(rows, targets, spaces[name], target_count=width,
                        leaf_cap=leaf_cap)
        preds, _ = tree.apply(rows)
        trees[name] = tree
        fidelity[name] = float(np.mean(preds == targets))
    return DTGNNModel(config, model.feature_count, trees["encoder"],
                      [trees[f"layer{i}"] for i in range(config.layer_count)],
                      trees["decoder"], fidelity)


@dataclass
class DTGNNOutput:
    """One discrete forward pass: states, predictions, and routing."""

    states: np.ndarray           # (n, L+1) integer states per node
    predictions: np.ndarray      # per decoder row (node or graph)
    leaf_ids: dict               # block name -> leaf node index per row

    def path(self, model, block, row):
        """Decision path of one row through one block's tree."""
        tree = dict(model.blocks)[block]
        return tree.decision_path(int(self.leaf_ids[block][row]))


def dtgnn_forward(model, batch):
    """Run the discrete pipeline over a batch (or a bare graph union).

    Returns a :class:`DTGNNOutput` with per-node integer states for layers
    0..L, decoder predictions (per node for node tasks, per graph
    otherwise), and per-block leaf assignments from which decision paths
    can be read back.
    """
    s = model.config.state_count
    leaf_ids = {}
    preds, leafs = model.encoder.apply(encoder_rows(batch))
    leaf_ids["encoder"] = leafs
    ids = [preds]
    for i, tree in enumerate(model.layers):
        counts = batch.adjacency @ _one_hot_int(ids[i], s)
        counts = np.rint(counts).astype(np.int64)
        preds, leafs = tree.apply(layer_rows(ids[i], counts))
        leaf_ids[f"layer{i}"] = leafs
        ids.append(preds)
    ids = np.stack(ids, axis=1)
    if model.config.task == NODE_TASK:
        rows = node_decoder_rows(ids, s)
    else:
        rows = graph_decoder_rows(_pooled_counts(batch, ids, s))
    predictions, leafs = model.decoder.apply(rows)
    leaf_ids["decoder"] = leafs
    return DTGNNOutput(states=ids, predictions=predictions,
                       leaf_ids=leaf_ids)


def predict_units(model, batch, unit_ids=None):
    """Distilled predictions aligned with the batch's dataset units."""
    out = dtgnn_forward(model, batch)
    if unit_ids is None:
        return out.predictions[batch.unit_rows]
    rows, _ = batch.rows_for(unit_ids)
    return out.predictions[rows]


def detect_used_capacity(model):
    """Minimal (layer count, state count) the tree pipeline actually uses.

    A state is used when any tree emits it from a leaf or tests it in a
    branch; a layer is used when the decoder reads features of that layer
    (every earlier layer is then needed to produce them).
    """
    used_states = set()
    for name, tree in model.blocks:
        for node in tree.nodes:
            if name != "decoder" and node.is_leaf:
                used_states.add(int(node.klass))
            if not node.is_leaf and node.branch.kind != INPUT_TEST:
                used_states.add(int(node.branch.state))
                if node.branch.other_state is not None:
                    used_states.add(int(node.branch.other_state))
    deepest = 0
    for node in model.decoder.nodes:
        if not node.is_leaf and node.branch.layer is not None:
            deepest = max(deepest, int(node.branch.layer))
    return deepest, max(2, len(used_states))
