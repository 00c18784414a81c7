"""Node-importance explanations for the distilled tree pipeline.

Explanations are per-node importance vectors: how much every graph node
contributed to node v reaching state t at layer l (and ultimately to the
predicted class).  They are built in two stages:

1. Exact TreeShap.  For every tree and sample, Shapley values of the tree's
   features under the path-dependent value function: a feature outside the
   conditioning set splits a path by the fit-time coverage of each child,
   a feature inside it routes deterministically.  Because that value
   function is additive over leaves and multiplicative over the distinct
   features of one leaf's path, the Shapley value has a closed form per
   leaf (an elementary-symmetric-polynomial sum), which keeps the
   computation polynomial while matching the brute-force subset
   enumeration exactly.

2. Propagation.  Starting from e0 = one-hot self-explanations, each layer
   combines three contributions: sigma (own-state features, sign-flipped
   when the node is not in the tested state), mu (message counts average
   the explanations of the neighbors in that state), and delta (pairwise
   count comparisons add the supporting side and subtract the opposing
   side).  The decoder is one more step of the same machinery: state
   features over all layers for node tasks, count/delta features pooled
   over the whole graph for graph tasks.
"""

from math import comb

import numpy as np

from .graphs import NODE_TASK
from .distill import (COUNT_THRESHOLD, _one_hot_int, _pooled_counts,
                      dtgnn_forward, graph_decoder_rows, layer_rows,
                      node_decoder_rows)


class TreeExplainer:
    """Exact path-dependent TreeShap for one fitted tree.

    Per leaf, the value function restricted to that leaf is
    score * prod_j (a_j if j conditioned else b_j) over the distinct
    features j on the leaf's path, where a_j is 1 iff the sample satisfies
    every j-test on the path and b_j is the product of fit-coverage ratios
    of the j-nodes.  Shapley values of such a product game follow from the
    coefficients of prod_{j != i} (b_j + a_j x).
    """

    def __init__(self, tree):
        self.tree = tree
        self.feature_count = len(tree.feature_space)
        self.target_count = tree.target_count
        self.leaf_info = []
        scores, empty_weights = [], []
        for node in tree.nodes:
            if not node.is_leaf:
                continue
            groups = {}     # column -> [tests, coverage product]
            for index, took in tree.decision_path(node.index):
                parent = tree.nodes[index]
                child = tree.nodes[parent.true_child if took
                                   else parent.false_child]
                threshold = parent.branch.threshold \
                    if parent.branch.kind == COUNT_THRESHOLD else 0
                entry = groups.setdefault(parent.column, [[], 1.0])
                entry[0].append((threshold, took))
                entry[1] *= child.samples / max(parent.samples, 1)
            columns = sorted(groups)
            self.leaf_info.append({
                "columns": columns,
                "tests": [groups[c][0] for c in columns],
                "b": np.array([groups[c][1] for c in columns]),
            })
            scores.append(node.histogram / max(node.samples, 1))
            empty_weights.append(float(np.prod(self.leaf_info[-1]["b"])))
        self.scores = np.asarray(scores)              # (leaves, targets)
        self.base_values = np.asarray(empty_weights) @ self.scores

    def shapley(self, sample):
        """(feature, target) attribution matrix for one sample row."""
        sample = np.asarray(sample)
        if sample.shape != (self.feature_count,):
            raise ValueError(
                f"sample must have {self.feature_count} features")
        out = np.zeros((self.feature_count, self.target_count))
        for info, score in zip(self.leaf_info, self.scores):
            m = len(info["columns"])
            if m == 0:
                continue
            a = np.array([
                float(all((sample[col] > thr) == took
                          for thr, took in tests))
                for col, tests in zip(info["columns"], info["tests"])])
            b = info["b"]
            weights = np.array([1.0 / (m * comb(m - 1, k))
                                for k in range(m)])
            for i, column in enumerate(info["columns"]):
                coeffs = np.zeros(m)
                coeffs[0] = 1.0
                for j in range(m):
                    if j == i:
                        continue
                    shifted = np.zeros(m)
                    shifted[1:] = coeffs[:-1] * a[j]
                    coeffs = coeffs * b[j] + shifted
                phi = (a[i] - b[i]) * float(weights @ coeffs)
                out[column] += phi * score
        return out


def tree_shap(tree, sample, target):
    """Per-feature attributions and base value for one sample and target."""
    explainer = TreeExplainer(tree)
    matrix = explainer.shapley(sample)
    return matrix[:, target], float(explainer.base_values[target])


# ---------------------------------------------------------------------------
# propagation


def _neighbor_sums(adjacency, e, states, state_count):
    """sums[v, s, :] = sum of e[w, s, :] over in-neighbors w of v in state s;
    counts[v, s] = |N_s(v)|."""
    n = len(states)
    sums = np.zeros((n, state_count, n))
    for s in range(state_count):
        mask = (states == s).astype(np.float64)
        sums[:, s, :] = adjacency @ (e[:, s, :] * mask[:, None])
    counts = np.rint(adjacency @ _one_hot_int(states, state_count)
                     ).astype(np.int64)
    return sums, counts


def propagate_state(i_s, e, states):
    """sigma[v, t, :] = sum_s I_S[v,t,s] * e[v,s,:] * sign(v, s)."""
    state_count = i_s.shape[2]
    sign = np.where(_one_hot_int(states, state_count) > 0, 1.0, -1.0)
    return np.einsum("vts,vs,vsn->vtn", i_s, sign, e)


def propagate_message(i_m, e, adjacency, states):
    """mu[v, t, :] = sum_s I_M[v,t,s] * mean of e[w,s,:] over N_s(v)."""
    state_count = i_m.shape[2]
    sums, counts = _neighbor_sums(adjacency, e, states, state_count)
    safe = np.maximum(counts, 1)
    average = sums / safe[:, :, None]
    return np.einsum("vts,vsn->vtn", i_m, average)


def delta_pairs(state_count):
    return [(s, t) for s in range(state_count)
            for t in range(state_count) if t != s]


def propagate_delta(i_d, e, adjacency, states):
    """Pairwise-count contributions: supporters minus opponents, averaged
    over both neighborhoods, sign-flipped when count(s) <= count(s')."""
    state_count = e.shape[1]
    sums, counts = _neighbor_sums(adjacency, e, states, state_count)
    n, targets = i_d.shape[:2]
    out = np.zeros((n, targets, e.shape[2]))
    for p, (s, t) in enumerate(delta_pairs(state_count)):
        denominator = counts[:, s] + counts[:, t]
        share = (sums[:, s, :] - sums[:, t, :]) \
            / np.maximum(denominator, 1)[:, None]
        indicator = np.where(counts[:, s] > counts[:, t], 1.0, -1.0)
        weight = i_d[:, :, p] * indicator[:, None]
        out += np.einsum("vt,vn->vtn", weight, share)
    return out


def importance_matrices(tree, rows):
    """Stacked per-sample TreeShap attributions, shape (n, targets, features)."""
    explainer = TreeExplainer(tree)
    return np.stack([explainer.shapley(row).T for row in rows])


class Explainer:
    """Explanation engine for one distilled model on one batch of graphs."""

    def __init__(self, model, batch):
        self.model = model
        self.batch = batch
        self.output = dtgnn_forward(model, batch)
        self.states = self.output.states       # (n, L+1)
        self._chain = None

    @property
    def chain(self):
        """Explanation matrices e^0 .. e^L, each (n, |S|, n)."""
        if self._chain is None:
            n = self.batch.node_count
            s = self.model.config.state_count
            e = np.zeros((n, s, n))
            e[np.arange(n), :, np.arange(n)] = 1.0
            self._chain = [e]
            for l, tree in enumerate(self.model.layers):
                self._chain.append(self._layer_step(tree, l,
                                                    self._chain[-1]))
        return self._chain

    def _layer_step(self, tree, layer, e):
        s = self.model.config.state_count
        states = self.states[:, layer]
        counts = np.rint(self.batch.adjacency @ _one_hot_int(states, s)
                         ).astype(np.int64)
        rows = layer_rows(states, counts)
        full = importance_matrices(tree, rows)
        i_s, i_m, i_d = full[:, :, :s], full[:, :, s:2 * s], full[:, :, 2 * s:]
        sigma = propagate_state(i_s, e, states)
        mu = propagate_message(i_m, e, self.batch.adjacency, states)
        delta = propagate_delta(i_d, e, self.batch.adjacency, states)
        return sigma + mu + delta

    def _decoder_row(self, row):
        s = self.model.config.state_count
        if self.model.config.task == NODE_TASK:
            return node_decoder_rows(self.states, s)[row]
        pooled = _pooled_counts(self.batch, self.states, s)
        return graph_decoder_rows(pooled)[row]

    def explain(self, row=0, klass=None):
        """Importance of every node for the decoder's output at ``row``
        (a node row for node tasks, a graph row otherwise)."""
        config = self.model.config
        if klass is None:
            klass = int(self.output.predictions[row])
        if not 0 <= klass < config.class_count:
            raise ValueError(f"class {klass} out of range")
        shap = TreeExplainer(self.model.decoder).shapley(
            self._decoder_row(row))[:, klass]
        s = config.state_count
        if config.task == NODE_TASK:
            importance = np.zeros(self.batch.node_count)
            for l in range(config.layer_count + 1):
                block = shap[l * s:(l + 1) * s]
                sign = np.where(
                    np.arange(s) == self.states[row, l], 1.0, -1.0)
                importance += (block * sign) @ self.chain[l][row]
            return importance
        return self._explain_graph(shap, row)

    def _explain_graph(self, shap, row):
        """Pooled decoder: neighborhoods are all nodes of the graph."""
        s = self.model.config.state_count
        member = self.batch.segments == row
        importance = np.zeros(self.batch.node_count)
        width = s + s * s - s                  # counts then deltas, per layer
        for l in range(self.model.config.layer_count + 1):
            states = self.states[:, l]
            e = self.chain[l]
            sums = np.zeros((s, self.batch.node_count))
            counts = np.zeros(s, dtype=np.int64)
            for state in range(s):
                inside = member & (states == state)
                counts[state] = inside.sum()
                sums[state] = e[inside, state, :].sum(axis=0)
            block = shap[l * width:(l + 1) * width]
            for state in range(s):
                if counts[state]:
                    importance += block[state] * sums[state] / counts[state]
            for p, (a, b) in enumerate(delta_pairs(s)):
                denominator = counts[a] + counts[b]
                if not denominator:
                    continue
                indicator = 1.0 if counts[a] > counts[b] else -1.0
                importance += (block[s + p] * indicator
                               * (sums[a] - sums[b]) / denominator)
        return importance


def explain_layer(model, batch, layer):
    """Explanation matrix e^{layer}: entry [v, t, :] spreads the credit for
    node v being in state t at ``layer`` over all graph nodes."""
    if not 0 <= layer <= model.config.layer_count:
        raise ValueError(f"layer {layer} out of range")
    return Explainer(model, batch).chain[layer]


def explain_prediction(model, batch, node=None, graph=None, klass=None):
    """Per-node importances for one prediction of the distilled pipeline.

    For node tasks pass ``node`` (a row into the batch); for graph tasks
    pass ``graph`` (a graph index into the batch).  ``klass`` defaults to
    the model's own prediction for that target.
    """
    explainer = Explainer(model, batch)
    if model.config.task == NODE_TASK:
        if node is None:
            raise ValueError("node tasks need a target node")
        return explainer.explain(int(node), klass)
    return explainer.explain(0 if graph is None else int(graph), klass)
