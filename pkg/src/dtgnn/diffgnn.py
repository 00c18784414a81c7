"""The differentiable half of the pipeline.

An encoder MLP projects raw node features into a categorical state
space; L message-passing layers update states from the concatenation
[own state one-hot || neighbor state counts] through an MLP followed by
a straight-through Gumbel-Softmax; a decoder MLP reads the concatenated
states of layers 0..L (node tasks) or the pooled per-state counts of
layers 0..L (graph tasks). In evaluation mode sampling is replaced by a
plain argmax, so inference is deterministic and every node is in exactly
one discrete state after every layer — which is what makes the later
distillation into decision trees lossless in structure.
"""

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .graphs import GRAPH_TASK, NODE_TASK, holdout_split
from .rng import substream


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    layer_count: int
    state_count: int
    class_count: int
    task: str
    hidden_width: int = 16
    epochs: int = 1500
    patience: int = 100
    temperature: float = 1.0
    learning_rate: float = 0.01
    seed: int = 0
    full_batch_limit: int = 2000
    minibatch_size: int = 128
    restarts: int = 5
    restart_threshold: float = 0.99

    def __post_init__(self):
        if self.layer_count < 0:
            raise ValueError("layer_count must be >= 0")
        if self.state_count < 2:
            raise ValueError("state_count must be >= 2")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.task not in (NODE_TASK, GRAPH_TASK):
            raise ValueError(f"unknown task {self.task!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")

    @classmethod
    def for_dataset(cls, dataset, layer_count, state_count, **overrides):
        return cls(layer_count=layer_count, state_count=state_count,
                   class_count=dataset.class_count, task=dataset.task,
                   **overrides)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def aggregate_messages(graph, states):
    """Per-node neighbor-state counts: entry (v, s) = #neighbors of v in s.

    ``states`` is an (n, |S|) one-hot array; the result is the linear map
    A @ states where A is the receiver-oriented adjacency.
    """
    return graph.adjacency() @ np.asarray(states, dtype=np.float64)


class GraphBatch:
    """Disjoint union of (a subset of) a dataset's graphs.

    Keeps the sparse adjacency of the union, per-node graph segments, and
    the mapping from dataset unit ids to rows of the decoder output.
    """

    def __init__(self, dataset, graph_ids=None):
        if graph_ids is None:
            graph_ids = np.arange(len(dataset.graphs))
        self.graph_ids = np.asarray(graph_ids, dtype=np.int64)
        graphs = [dataset.graphs[i] for i in self.graph_ids]
        counts = np.array([g.node_count for g in graphs])
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.node_count = int(self.offsets[-1])
        self.graph_count = len(graphs)
        if self.graph_count == 1:
            self.adjacency = graphs[0].adjacency()
        else:
            self.adjacency = sp.block_diag(
                [g.adjacency() for g in graphs], format="csr")
        self.adjacency_t = self.adjacency.T.tocsr()
        self.segments = np.repeat(np.arange(self.graph_count), counts)
        if dataset.feature_count:
            self.features = np.concatenate([g.features for g in graphs])
        else:
            self.features = None
        self.feature_count = dataset.feature_count

        local = {int(g): i for i, g in enumerate(self.graph_ids)}
        unit_ids, unit_rows = [], []
        for ui, (gi, v) in enumerate(dataset.units()):
            if gi in local:
                unit_ids.append(ui)
                row = local[gi] if v < 0 else self.offsets[local[gi]] + v
                unit_rows.append(row)
        self.unit_ids = np.asarray(unit_ids, dtype=np.int64)
        self.unit_rows = np.asarray(unit_rows, dtype=np.int64)
        self.unit_labels = dataset.unit_labels()[self.unit_ids]

    def rows_for(self, unit_ids):
        """Decoder rows and labels for the given dataset unit ids."""
        unit_ids = np.asarray(unit_ids, dtype=np.int64)
        pos = np.searchsorted(self.unit_ids, unit_ids)
        if pos.size and (pos.max() >= len(self.unit_ids)
                         or not np.array_equal(self.unit_ids[pos], unit_ids)):
            raise KeyError("unit ids not present in this batch")
        return self.unit_rows[pos], self.unit_labels[pos]


class DiffGNN:
    def __init__(self, config, feature_count, rng):
        self.config = config
        self.feature_count = int(feature_count)
        in_width = self.feature_count if self.feature_count else 1
        s, hidden = config.state_count, config.hidden_width
        self.encoder = dc.MLP(in_width, hidden, s, rng)
        self.layers = [dc.MLP(2 * s, hidden, s, rng)
                       for _ in range(config.layer_count)]
        self.decoder = dc.MLP((config.layer_count + 1) * s, hidden,
                              config.class_count, rng)

    def input_features(self, batch):
        if self.feature_count:
            return dc.one_hot(batch.features, self.feature_count)
        return np.ones((batch.node_count, 1))

    def _to_states(self, logits, training, tape, rng):
        if training:
            return dc.gumbel_softmax(tape, logits, self.config.temperature,
                                     hard=True, rng=rng)
        return dc.constant(dc.one_hot(logits.values.argmax(axis=1),
                                      self.config.state_count))

    def forward(self, batch, training=False, tape=None, rng=None):
        """Returns (per-layer one-hot StateTensors, decoder logits)."""
        x = dc.constant(self.input_features(batch))
        state = self._to_states(self.encoder.forward(x, training, tape),
                                training, tape, rng)
        states = [state]
        for layer in self.layers:
            messages = dc.spmm(tape, batch.adjacency, state, batch.adjacency_t)
            h = dc.concat(tape, [state, messages])
            logits = layer.forward(h, training, tape)
            state = self._to_states(logits, training, tape, rng)
            states.append(state)
        if self.config.task == NODE_TASK:
            decoder_in = dc.concat(tape, states)
        else:
            pooled = [dc.segment_sum(tape, s, batch.segments, batch.graph_count)
                      for s in states]
            decoder_in = dc.concat(tape, pooled)
        return states, self.decoder.forward(decoder_in, training, tape)

    def predict_units(self, batch):
        """Predicted class for every unit in the batch (evaluation mode)."""
        _, logits = self.forward(batch, training=False)
        return logits.values[batch.unit_rows].argmax(axis=1)

    def parameters(self):
        params = self.encoder.parameters()
        for layer in self.layers:
            params += layer.parameters()
        return params + self.decoder.parameters()

    def state_dict(self):
        state = self.encoder.state_dict("encoder.")
        for i, layer in enumerate(self.layers):
            state.update(layer.state_dict(f"layer{i}."))
        state.update(self.decoder.state_dict("decoder."))
        return state

    def load_state_dict(self, state):
        self.encoder.load_state_dict(state, "encoder.")
        for i, layer in enumerate(self.layers):
            layer.load_state_dict(state, f"layer{i}.")
        self.decoder.load_state_dict(state, "decoder.")


def model_forward(model, graphs, training=False):
    """Forward one graph or a list of graphs outside any dataset bookkeeping."""
    if not isinstance(graphs, (list, tuple)):
        graphs = [graphs]
    shell = _BareBatch(graphs, model.feature_count)
    return model.forward(shell, training=training)


class _BareBatch(GraphBatch):
    """Structure-only batch for ad-hoc forwards (no unit bookkeeping)."""

    def __init__(self, graphs, feature_count):
        counts = np.array([g.node_count for g in graphs])
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.node_count = int(self.offsets[-1])
        self.graph_count = len(graphs)
        self.adjacency = (graphs[0].adjacency() if len(graphs) == 1 else
                          sp.block_diag([g.adjacency() for g in graphs],
                                        format="csr"))
        self.adjacency_t = self.adjacency.T.tocsr()
        self.segments = np.repeat(np.arange(self.graph_count), counts)
        self.feature_count = feature_count
        self.features = (np.concatenate([g.features for g in graphs])
                         if feature_count else None)
        self.unit_ids = np.zeros(0, dtype=np.int64)
        self.unit_rows = np.zeros(0, dtype=np.int64)
        self.unit_labels = np.zeros(0, dtype=np.int64)


def evaluate(model, batch, unit_ids):
    """(loss, accuracy, predictions) on the given units, evaluation mode."""
    rows, labels = batch.rows_for(unit_ids)
    _, logits = model.forward(batch, training=False)
    picked = logits.values[rows]
    loss = float(dc.cross_entropy(None, dc.constant(picked), labels).values)
    predictions = picked.argmax(axis=1)
    return loss, float(np.mean(predictions == labels)), predictions


@dataclass
class FoldResult:
    fold: object
    fit_ids: np.ndarray
    holdout_ids: np.ndarray
    model: DiffGNN
    metrics: dict = field(default_factory=dict)


def train(dataset, folds, config, workers=1):
    """Train one model per fold; returns a list of :class:`FoldResult`.

    The training portion of each fold is split 90/10 into a fit set (used
    for gradients) and a pruning holdout (untouched here, reserved for the
    tree-pruning stage). Early stopping watches the fold's validation loss
    with the configured patience and restores the best checkpoint.
    """
    jobs = [(dataset, fold, config) for fold in folds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_fold_job, jobs))
    return [_train_fold_job(job) for job in jobs]


def _train_fold_job(job):
    return train_fold(*job)


def train_fold(dataset, fold, config):
    """Train one fold with deterministic restarts.

    Straight-through estimation occasionally converges to a poor local
    optimum depending on the initialization draw, so an attempt whose best
    checkpoint scores below ``restart_threshold`` validation accuracy is
    retried from a fresh (still seed-derived) initialization, up to
    ``restarts`` attempts; the best attempt by validation accuracy (ties:
    lower validation loss) wins.
    """
    k = fold.fold_index
    fit_ids, holdout_ids = holdout_split(
        fold.train_ids, substream(config.seed, "split", dataset.name, "holdout", k))

    full_batch = GraphBatch(dataset)
    units = dataset.units()
    if dataset.task == GRAPH_TASK:
        fit_graphs = np.unique([units[u][0] for u in fit_ids])
        train_batch = GraphBatch(dataset, fit_graphs)
        val_graphs = np.unique([units[u][0] for u in fold.validation_ids])
        val_batch = GraphBatch(dataset, val_graphs)
    else:
        train_batch = val_batch = full_batch
    fit_rows, fit_labels = train_batch.rows_for(fit_ids)
    minibatched = (dataset.task == GRAPH_TASK
                   and train_batch.graph_count > config.full_batch_limit)

    best_key, model, metrics = None, None, None
    attempt = 0
    for attempt in range(config.restarts):
        candidate, candidate_metrics = _train_attempt(
            dataset, fold, config, attempt, train_batch, val_batch,
            fit_rows, fit_labels, fit_ids, minibatched)
        _, val_acc, _ = evaluate(candidate, val_batch, fold.validation_ids)
        key = (val_acc, -candidate_metrics["best_validation_loss"])
        if best_key is None or key > best_key:
            best_key, model, metrics = key, candidate, candidate_metrics
        if best_key[0] >= config.restart_threshold:
            break
    metrics["attempts"] = attempt + 1

    metrics["accuracy"] = {}
    for split_name, ids in (("fit", fit_ids), ("holdout", holdout_ids),
                            ("validation", fold.validation_ids),
                            ("test", fold.test_ids)):
        _, acc, _ = evaluate(model, full_batch, ids)
        metrics["accuracy"][split_name] = acc
    return FoldResult(fold=fold, fit_ids=fit_ids, holdout_ids=holdout_ids,
                      model=model, metrics=metrics)


def _train_attempt(dataset, fold, config, attempt, train_batch, val_batch,
                   fit_rows, fit_labels, fit_ids, minibatched):
    k = fold.fold_index
    tag = () if attempt == 0 else ("restart", attempt)
    rng_init = substream(config.seed, "model", dataset.name, k, "init", *tag)
    noise = substream(config.seed, "model", dataset.name, k, "noise", *tag)
    batch_rng = substream(config.seed, "model", dataset.name, k, "batches",
                          *tag)
    model = DiffGNN(config, dataset.feature_count, rng_init)

    optimizer = dc.Adam(model.parameters(), lr=config.learning_rate)
    best_loss, best_state, best_epoch = np.inf, None, 0
    curve = []
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        try:
            if minibatched:
                train_loss = _minibatch_epoch(
                    model, dataset, fit_ids, config, optimizer, noise, batch_rng)
            else:
                train_loss = _full_batch_step(
                    model, train_batch, fit_rows, fit_labels, optimizer, noise)
            val_loss, val_acc, _ = evaluate(model, val_batch,
                                            fold.validation_ids)
        except dc.NumericError as err:
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (fold {k})") from err
        curve.append({"epoch": epoch, "train_loss": train_loss,
                      "validation_loss": val_loss,
                      "validation_accuracy": val_acc})
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = {k_: v.copy() for k_, v in model.state_dict().items()}
        elif epoch - best_epoch >= config.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    metrics = {"fold": k, "epochs_run": epoch, "best_epoch": best_epoch,
               "best_validation_loss": best_loss, "curve": curve}
    return model, metrics


def _full_batch_step(model, batch, rows, labels, optimizer, noise):
    tape = dc.Tape()
    _, logits = model.forward(batch, training=True, tape=tape, rng=noise)
    loss = dc.cross_entropy(tape, dc.gather_rows(tape, logits, rows), labels)
    optimizer.zero_grad()
    tape.backward(loss)
    optimizer.step()
    return float(loss.values)


def _minibatch_epoch(model, dataset, fit_ids, config, optimizer, noise,
                     batch_rng):
    units = dataset.units()
    order = batch_rng.permutation(fit_ids)
    total, seen = 0.0, 0
    for lo in range(0, len(order), config.minibatch_size):
        chunk = np.sort(order[lo:lo + config.minibatch_size])
        graphs = np.unique([units[u][0] for u in chunk])
        batch = GraphBatch(dataset, graphs)
        rows, labels = batch.rows_for(chunk)
        total += _full_batch_step(model, batch, rows, labels, optimizer,
                                  noise) * len(chunk)
        seen += len(chunk)
    return total / seen


def workers_from_env(default=1):
    value = os.environ.get("DTGNN_WORKERS", "")
    try:
        return max(1, int(value))
    except ValueError:
        return default
