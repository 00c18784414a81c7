"""Reduced-error pruning of the distilled tree pipeline.

Lossless pruning repeatedly replaces one decision node by its fit-majority
leaf, keeping a replacement only when whole-pipeline accuracy survives the
chosen criterion; candidates are assessed starting from the node that routes
the fewest samples.  Because a replacement inside one tree shifts the inputs
of every later tree, accuracies are always recomputed end-to-end; forward
states are cached per block so a candidate only pays for the blocks at and
after its own.

Lossy pruning then keeps going past losslessness: each greedy step removes
the decision node whose replacement hurts validation accuracy the least,
and the schedule snapshots the model at every 10% of the nodes the lossless
stage left behind, down to the fully collapsed single-leaf pipeline.
"""

from dataclasses import dataclass

import numpy as np

from .graphs import NODE_TASK
from .diffgnn import GraphBatch
from .distill import (DTGNNModel, DecisionTree, TreeNode, encoder_rows,
                      layer_rows, node_decoder_rows, graph_decoder_rows,
                      _one_hot_int, _pooled_counts)

TRAIN_ONLY = "train"
VALIDATION_ONLY = "validation"
COMBINED = "combined"
CRITERIA = (TRAIN_ONLY, VALIDATION_ONLY, COMBINED)

_ALIASES = {"train": TRAIN_ONLY, "trainonly": TRAIN_ONLY,
            "train_only": TRAIN_ONLY, "val": VALIDATION_ONLY,
            "validation": VALIDATION_ONLY, "validationonly": VALIDATION_ONLY,
            "validation_only": VALIDATION_ONLY, "combined": COMBINED}


def canonical_criterion(name):
    try:
        return _ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ValueError(
            f"unknown pruning criterion {name!r}; pick one of {CRITERIA}")


def model_size(model):
    """Total decision (internal) nodes across all trees of the pipeline."""
    return sum(tree.decision_node_count for _, tree in model.blocks)


def replace_with_leaf(tree, node_index):
    """A copy of ``tree`` with the subtree at ``node_index`` collapsed.

    The collapsed node becomes a leaf predicting the majority class of the
    fit samples that reached it when the tree was grown (its stored
    histogram); surviving nodes are reindexed in original order.
    """
    target = tree.nodes[node_index]
    dropped = set()
    if not target.is_leaf:
        stack = [target.true_child, target.false_child]
        while stack:
            index = stack.pop()
            dropped.add(index)
            node = tree.nodes[index]
            if not node.is_leaf:
                stack += [node.true_child, node.false_child]
    remap, kept = {}, []
    for node in tree.nodes:
        if node.index not in dropped:
            remap[node.index] = len(kept)
            kept.append(node)
    rebuilt = []
    for node in kept:
        if node.index == node_index or node.is_leaf:
            rebuilt.append(TreeNode(
                index=remap[node.index], klass=node.klass,
                histogram=node.histogram.copy(), samples=node.samples))
        else:
            rebuilt.append(TreeNode(
                index=remap[node.index], branch=node.branch,
                column=node.column, true_child=remap[node.true_child],
                false_child=remap[node.false_child], klass=node.klass,
                histogram=node.histogram.copy(), samples=node.samples))
    return DecisionTree(rebuilt, tree.feature_space, tree.target_count)


def route_counts(tree, rows):
    """Samples routed through every node of ``tree`` (leaves included)."""
    counts = np.zeros(len(tree.nodes), dtype=np.int64)
    stack = [(0, np.arange(len(rows)))]
    while stack:
        index, idx = stack.pop()
        counts[index] = len(idx)
        node = tree.nodes[index]
        if node.is_leaf or not idx.size:
            if not node.is_leaf:
                counts[node.true_child] = counts[node.false_child] = 0
            continue
        taken = tree._test(node, rows[idx])
        stack.append((node.true_child, idx[taken]))
        stack.append((node.false_child, idx[~taken]))
    return counts


class _Pipeline:
    """End-to-end evaluation with per-block state caching.

    Block indices: 0 = encoder, 1..L = message-passing layers (block b
    produces the cached state column b), L+1 = decoder.
    """

    def __init__(self, dataset, split_ids):
        self.batch = GraphBatch(dataset)
        self.task = dataset.task
        self.x_encoder = encoder_rows(self.batch)
        self.splits = {}
        for name, ids in split_ids.items():
            self.splits[name] = self.batch.rows_for(ids)
        if dataset.task == NODE_TASK:
            self.routed_nodes = slice(None)
        else:
            units = dataset.units()
            member = {units[u][0] for name in ("train", "validation")
                      for u in split_ids[name]}
            self.routed_nodes = np.isin(self.batch.segments,
                                        sorted(member))

    def states(self, model, cached=None, changed=0):
        s = model.config.state_count
        if cached is None or changed == 0:
            out = [model.encoder.apply(self.x_encoder)[0]]
            start = 1
        else:
            out = list(cached[:changed])
            start = changed
        for i in range(start, model.config.layer_count + 1):
            counts = self.batch.adjacency @ _one_hot_int(out[i - 1], s)
            counts = np.rint(counts).astype(np.int64)
            out.append(model.layers[i - 1].apply(
                layer_rows(out[i - 1], counts))[0])
        return out

    def decoder_rows(self, model, states):
        ids = np.stack(states, axis=1)
        if self.task == NODE_TASK:
            return node_decoder_rows(ids, model.config.state_count)
        return graph_decoder_rows(
            _pooled_counts(self.batch, ids, model.config.state_count))

    def accuracies(self, model, states):
        preds = model.decoder.apply(self.decoder_rows(model, states))[0]
        return {name: float(np.mean(preds[rows] == labels))
                for name, (rows, labels) in self.splits.items()}

    def block_rows(self, model, states, block):
        """The rows block ``block`` sees, restricted for routing counts."""
        s = model.config.state_count
        if block == 0:
            return self.x_encoder[self.routed_nodes]
        if block <= model.config.layer_count:
            prev = states[block - 1]
            counts = self.batch.adjacency @ _one_hot_int(prev, s)
            counts = np.rint(counts).astype(np.int64)
            return layer_rows(prev, counts)[self.routed_nodes]
        rows = self.decoder_rows(model, states)
        routed = np.concatenate([self.splits[n][0]
                                 for n in ("train", "validation")])
        return rows[routed]


def _blocks(model):
    return [model.encoder] + list(model.layers) + [model.decoder]


def _with_block(model, index, tree):
    blocks = _blocks(model)
    blocks[index] = tree
    return DTGNNModel(model.config, model.feature_count, blocks[0],
                      blocks[1:-1], blocks[-1], model.fidelity)


def _candidates(model, pipeline, states):
    """(routed count, block, node index) for every decision node, sorted
    ascending by count; ties fall to the earlier block, then lower node id."""
    found = []
    for b, tree in enumerate(_blocks(model)):
        if not tree.decision_node_count:
            continue
        counts = route_counts(tree, pipeline.block_rows(model, states, b))
        found += [(int(counts[n.index]), b, n.index)
                  for n in tree.nodes if not n.is_leaf]
    return sorted(found)


def _passes(criterion, current, candidate):
    if criterion == TRAIN_ONLY:
        return candidate["train"] >= current["train"]
    if criterion == VALIDATION_ONLY:
        return candidate["validation"] >= current["validation"]
    return (candidate["validation"] >= current["validation"]
            and candidate["train"] >= candidate["validation"])


def lossless_prune(model, dataset, fit_ids, validation_ids,
                   criterion=COMBINED):
    """Reduced-error pruning to a fixed point under the chosen criterion.

    Candidates are retried from the smallest routed count after every
    accepted replacement, so the result is a model in which no single
    remaining decision node can be collapsed without violating the
    criterion end-to-end.
    """
    criterion = canonical_criterion(criterion)
    pipeline = _Pipeline(dataset, {"train": fit_ids,
                                   "validation": validation_ids})
    states = pipeline.states(model)
    current = pipeline.accuracies(model, states)
    while True:
        accepted = False
        for _, block, index in _candidates(model, pipeline, states):
            trial = _with_block(
                model, block, replace_with_leaf(_blocks(model)[block], index))
            trial_states = pipeline.states(trial, states, changed=block)
            accuracies = pipeline.accuracies(trial, trial_states)
            if _passes(criterion, current, accuracies):
                model, states, current = trial, trial_states, accuracies
                accepted = True
                break
        if not accepted:
            return model


@dataclass
class PruneLevel:
    pruned: int          # decision nodes removed relative to level 0
    size: int            # decision nodes remaining
    model: DTGNNModel
    accuracy: dict       # train / validation / test

    def to_dict(self, include_model=True):
        out = {"pruned": self.pruned, "size": self.size,
               "accuracy": dict(self.accuracy)}
        if include_model:
            out["model"] = self.model.to_dict()
        return out


@dataclass
class PruneSchedule:
    levels: list

    def to_dict(self, include_models=True):
        return {"levels": [lv.to_dict(include_models) for lv in self.levels]}

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


def lossy_prune_schedule(model, dataset, fit_ids, validation_ids, test_ids,
                         levels=10):
    """Greedy lossy pruning from a (losslessly pruned) model down to leaves.

    Each step collapses the decision node whose replacement costs the least
    validation accuracy (ties: fewest routed samples, then earlier block,
    then lower node id), re-evaluating every candidate end-to-end after each
    removal.  The model is snapshotted whenever another ``1/levels`` slice
    of the starting decision nodes has been removed; the last entry is the
    fully collapsed pipeline of single-leaf trees.
    """
    pipeline = _Pipeline(dataset, {"train": fit_ids,
                                   "validation": validation_ids,
                                   "test": test_ids})
    states = pipeline.states(model)
    start_size = model_size(model)
    # collapsing one node can drop a whole subtree, so a single greedy step
    # may cross several 10% marks at once; each crossing emits one snapshot
    marks = sorted({int(round(k * start_size / levels))
                    for k in range(1, levels + 1)})
    entries = [PruneLevel(pruned=0, size=start_size, model=model,
                          accuracy=pipeline.accuracies(model, states))]
    pruned = 0
    while pruned < start_size:
        best = None
        for count, block, index in _candidates(model, pipeline, states):
            trial = _with_block(
                model, block, replace_with_leaf(_blocks(model)[block], index))
            trial_states = pipeline.states(trial, states, changed=block)
            accuracies = pipeline.accuracies(trial, trial_states)
            key = (-accuracies["validation"], count, block, index)
            if best is None or key < best[0]:
                best = (key, trial, trial_states, accuracies)
        _, model, states, accuracies = best
        pruned = start_size - model_size(model)
        if marks and pruned >= marks[0]:
            while marks and pruned >= marks[0]:
                marks.pop(0)
            entries.append(PruneLevel(pruned=pruned,
                                      size=start_size - pruned, model=model,
                                      accuracy=accuracies))
    return PruneSchedule(entries)
