"""Experiment orchestration.

One :class:`ExperimentConfig` drives the full pipeline for a dataset:
cross-validated training of the differentiable model, distillation into
decision trees, reduced-error pruning, a lossy pruning schedule, and the
report/bundle artifacts the inspector consumes.  All randomness flows from
the one root seed through named substreams, so every stage can be rerun
independently and reproduces bit-identical outputs.

Reports deliberately contain no wall-clock numbers; timings are written to
a separate file so that reports and bundles are byte-identical across runs
with the same seed.
"""

import dataclasses
import json
import os
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import datagen, prune
from .diffgnn import GraphBatch, ModelConfig, train_fold
from .distill import detect_used_capacity, distill, dtgnn_forward, \
    predict_units
from .explain import Explainer
from .graphs import GRAPH_TASK, NODE_TASK, make_folds

BUNDLE_SCHEMA_VERSION = 1

# capacities found through tree inspection, per dataset
CAPACITY_DEFAULTS = {
    "infection": (5, 6),
    "negative_evidence": (1, 3),
    "ba_shapes": (5, 5),
    "tree_cycles": (5, 5),
    "tree_grid": (5, 5),
    "ba_2motifs": (4, 6),
    "mutag": (4, 6),
    "mutagenicity": (3, 8),
    "bbbp": (3, 5),
    "proteins": (3, 5),
    "imdb_binary": (3, 5),
    "reddit_binary": (3, 5),
    "collab": (3, 8),
}

# canonical name -> directory name in the TUDataset layout
REAL_DATASETS = {
    "mutag": "MUTAG",
    "mutagenicity": "Mutagenicity",
    "bbbp": "BBBP",
    "proteins": "PROTEINS",
    "imdb_binary": "IMDB-BINARY",
    "reddit_binary": "REDDIT-BINARY",
    "collab": "COLLAB",
}

STAGES = ("diff", "unpruned", "lossless", "lossy")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for triage."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def canonical_dataset(name):
    key = name.strip().lower().replace("-", "_").replace(" ", "_")
    if key.replace("_", "") in ("imdbbinary", "imdbb"):
        key = "imdb_binary"
    if key.replace("_", "") in ("redditbinary", "redditb"):
        key = "reddit_binary"
    if key in REAL_DATASETS:
        return key
    return datagen.canonical_name(name)


def resolve_dataset(name, seed=0, data_dir=None):
    """Synthetic names are generated; real names load TUDataset files from
    ``data_dir`` (default: the DTGNN_DATA_DIR environment variable).
    An already-built Dataset passes straight through."""
    if not isinstance(name, str):
        return name
    key = canonical_dataset(name)
    if key in datagen.GENERATORS:
        return datagen.generate(key, seed=seed)
    directory = data_dir or os.environ.get("DTGNN_DATA_DIR")
    if not directory:
        raise StageError("datagen",
                         f"dataset {name!r} needs DTGNN_DATA_DIR or "
                         "an explicit data directory")
    tu_name = REAL_DATASETS[key]
    dataset = datagen.parse_tudataset(Path(directory) / tu_name, tu_name)
    dataset.name = key
    return dataset


def default_capacity(name):
    key = canonical_dataset(name)
    return CAPACITY_DEFAULTS[key]


@dataclass
class ExperimentConfig:
    """Everything a full run needs; defaults reproduce the evaluation
    protocol (10 folds, combined pruning criterion, 10 lossy levels)."""

    dataset: str
    seed: int = 0
    folds: int = None              # None = all ten
    criterion: str = prune.COMBINED
    lossy_levels: int = 10
    output_dir: str = None
    overrides: dict = field(default_factory=dict)
    data_dir: str = None
    workers: int = None
    bundle_graphs: int = 5
    focus_nodes: int = 24

    def __post_init__(self):
        self.criterion = prune.canonical_criterion(self.criterion)
        if self.folds is not None and not 1 <= self.folds <= 10:
            raise ValueError("folds must be in 1..10")
        if self.lossy_levels < 1:
            raise ValueError("lossy_levels must be >= 1")

    def resolved_workers(self):
        if self.workers:
            return max(1, int(self.workers))
        return max(1, int(os.environ.get("DTGNN_WORKERS", "1")))


def model_config(dataset, config):
    """Per-dataset defaults with ExperimentConfig overrides applied."""
    overrides = dict(config.overrides)
    layer_count = overrides.pop("layer_count", None)
    state_count = overrides.pop("state_count", None)
    if layer_count is None or state_count is None:
        try:
            capacity = default_capacity(dataset.name)
        except Exception as exc:
            raise StageError(
                "config",
                f"no capacity defaults for {dataset.name!r}; pass "
                "layer_count and state_count overrides") from exc
        layer_count = capacity[0] if layer_count is None else layer_count
        state_count = capacity[1] if state_count is None else state_count
    overrides.setdefault("seed", config.seed)
    return ModelConfig.for_dataset(dataset, layer_count=layer_count,
                                   state_count=state_count, **overrides)


@dataclass
class FoldArtifact:
    """Everything one fold produced: a JSON-able record plus the models."""

    fold_index: int
    record: dict
    models: dict                   # unpruned / lossless / schedule
    fit_ids: np.ndarray
    holdout_ids: np.ndarray
    timings: dict


def _unit_accuracy(model, batch, labels, ids):
    predictions = predict_units(model, batch, ids)
    return float(np.mean(predictions == labels[ids]))


def _stage_accuracies(model, batch, labels, splits):
    return {name: _unit_accuracy(model, batch, labels, ids)
            for name, ids in splits.items()}


def choose_lossy_level(schedule):
    """Deepest level whose referee accuracy stays within 0.01 of level 0:
    the reported lossy operating point on the size/accuracy curve."""
    bar = schedule.levels[0].accuracy["validation"] - 0.01 - 1e-12
    chosen = 0
    for index, level in enumerate(schedule):
        if level.accuracy["validation"] >= bar:
            chosen = index
    return chosen


def run_fold(dataset, fold, mconfig, criterion, lossy_levels):
    """Train -> distill -> lossless prune -> lossy schedule for one fold."""
    timings = {}

    def staged(stage, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            value = fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(stage, f"fold {fold.fold_index}: {exc}") from exc
        timings[stage] = time.perf_counter() - start
        return value

    trained = staged("train", train_fold, dataset, fold, mconfig)
    unpruned = staged("distill", distill, trained.model, dataset,
                      trained.fit_ids)
    lossless = staged("lossless", prune.lossless_prune, unpruned, dataset,
                      trained.fit_ids, trained.holdout_ids, criterion)
    schedule = staged("lossy", prune.lossy_prune_schedule, lossless, dataset,
                      trained.fit_ids, trained.holdout_ids, fold.test_ids,
                      levels=lossy_levels)

    batch = GraphBatch(dataset)
    labels = dataset.unit_labels()
    splits = {"fit": trained.fit_ids, "holdout": trained.holdout_ids,
              "validation": fold.validation_ids, "test": fold.test_ids}
    chosen = choose_lossy_level(schedule)
    lossy = schedule.levels[chosen]
    record = {
        "fold": int(fold.fold_index),
        "attempts": trained.metrics["attempts"],
        "epochs_run": trained.metrics["epochs_run"],
        "best_epoch": trained.metrics["best_epoch"],
        "accuracy": {
            "diff": dict(trained.metrics["accuracy"]),
            "unpruned": _stage_accuracies(unpruned, batch, labels, splits),
            "lossless": _stage_accuracies(lossless, batch, labels, splits),
            "lossy": _stage_accuracies(lossy.model, batch, labels, splits),
        },
        "size": {
            "unpruned": prune.model_size(unpruned),
            "lossless": prune.model_size(lossless),
            "lossy": lossy.size,
        },
        "fidelity": unpruned.fidelity,
        "lossy_schedule": schedule.to_dict(include_models=False),
        "chosen_level": chosen,
        "capacity": list(detect_used_capacity(lossless)),
    }
    return FoldArtifact(fold_index=int(fold.fold_index), record=record,
                        models={"unpruned": unpruned, "lossless": lossless,
                                "schedule": schedule},
                        fit_ids=trained.fit_ids,
                        holdout_ids=trained.holdout_ids,
                        timings=timings)


def _fold_job(args):
    return run_fold(*args)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    dataset: object
    model_config: ModelConfig
    artifacts: list
    report: dict
    timings: dict


def run_experiment(config):
    """Full cross-validated pipeline for one dataset."""
    dataset = resolve_dataset(config.dataset, seed=config.seed,
                              data_dir=config.data_dir)
    folds = make_folds(dataset, seed=config.seed)
    if config.folds is not None:
        folds = folds[:config.folds]
    mconfig = model_config(dataset, config)

    jobs = [(dataset, fold, mconfig, config.criterion, config.lossy_levels)
            for fold in folds]
    workers = config.resolved_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            artifacts = list(pool.map(_fold_job, jobs))
    else:
        artifacts = [_fold_job(job) for job in jobs]

    report = build_report([(config, dataset, mconfig, artifacts)])
    timings = {"folds": [a.timings for a in artifacts]}
    result = ExperimentResult(config, dataset, mconfig, artifacts, report,
                              timings)
    if config.output_dir:
        _persist(result)
    return result


def _mean_std(values):
    data = np.asarray(values, dtype=np.float64)
    return {"mean": float(data.mean()), "std": float(data.std())}


def summarize(artifacts):
    records = [a.record for a in artifacts]
    summary = {
        "accuracy": {stage: _mean_std(
            [r["accuracy"][stage]["test"] for r in records])
            for stage in STAGES},
        "size": {stage: _mean_std([r["size"][stage] for r in records])
                 for stage in ("unpruned", "lossless", "lossy")},
        "folds": len(records),
    }
    votes = [tuple(r["capacity"]) for r in records]
    layers, states = majority_capacity(votes)
    summary["capacity"] = {"layers": layers, "states": states,
                           "votes": [list(v) for v in votes]}
    return summary


def majority_capacity(votes):
    """Most common (layers, states) pair; ties resolve to the smaller."""
    counts = Counter(votes)
    best = max(counts.items(), key=lambda kv: (kv[1], [-x for x in kv[0]]))
    return best[0]


def build_report(runs):
    """runs: list of (config, dataset, model_config, artifacts)."""
    config = runs[0][0]
    report = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "seed": config.seed,
        "criterion": config.criterion,
        "lossy_levels": config.lossy_levels,
        "datasets": {},
    }
    for run_config, dataset, mconfig, artifacts in runs:
        report["datasets"][dataset.name] = {
            "model": {"layer_count": mconfig.layer_count,
                      "state_count": mconfig.state_count,
                      "task": dataset.task,
                      "class_count": dataset.class_count},
            "summary": summarize(artifacts),
            "folds": [a.record for a in artifacts],
        }
    return report


def _cell(stats, digits=3):
    return f"{stats['mean']:.{digits}f} ± {stats['std']:.{digits}f}"


def render_report(report):
    """Plain-text tables: accuracy per stage, then sizes per stage."""
    names = list(report["datasets"])
    width = max([len(n) for n in names] + [8])
    lines = ["Test accuracy (mean ± std over folds)"]
    header = ["Diff-DT+GNN", "DT+GNN", "Lossless", "Lossy"]
    lines.append("  ".join([f"{'dataset':<{width}}"]
                           + [f"{h:<15}" for h in header]))
    for name in names:
        acc = report["datasets"][name]["summary"]["accuracy"]
        cells = [_cell(acc[stage]) for stage in STAGES]
        lines.append("  ".join([f"{name:<{width}}"]
                               + [f"{c:<15}" for c in cells]))
    lines.append("")
    lines.append("Model size in decision nodes (mean ± std over folds)")
    header = ["DT+GNN", "Lossless", "Lossy"]
    lines.append("  ".join([f"{'dataset':<{width}}"]
                           + [f"{h:<15}" for h in header]))
    for name in names:
        size = report["datasets"][name]["summary"]["size"]
        cells = [_cell(size[stage], digits=1)
                 for stage in ("unpruned", "lossless", "lossy")]
        lines.append("  ".join([f"{name:<{width}}"]
                               + [f"{c:<15}" for c in cells]))
    lines.append("")
    return "\n".join(lines)


def shrink_and_retrain(config, result):
    """Rerun with the capacity the trees actually used (majority vote over
    folds).  Returns the voted (layers, states) and the new result."""
    votes = [tuple(a.record["capacity"]) for a in result.artifacts]
    layers, states = majority_capacity(votes)
    overrides = dict(config.overrides)
    overrides["layer_count"] = layers
    overrides["state_count"] = states
    output = str(Path(config.output_dir) / "shrunken") \
        if config.output_dir else None
    shrunk = dataclasses.replace(config, overrides=overrides,
                                 output_dir=output)
    return (layers, states), run_experiment(shrunk)


# ---------------------------------------------------------------------------
# persistence


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value)!r}")


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp = path.with_name(path.name + ".tmp")
    temp.write_text(text)
    os.replace(temp, path)


def _persist(result):
    base = Path(result.config.output_dir) / result.dataset.name
    for artifact in result.artifacts:
        atomic_write(base / f"fold_{artifact.fold_index}.json",
                     dump_json(artifact.record))
    atomic_write(base / "report.json", dump_json(result.report))
    atomic_write(base / "report.txt", render_report(result.report))
    atomic_write(base / "timings.json", dump_json(result.timings))


# ---------------------------------------------------------------------------
# inspector bundles


def _bundle_schema():
    with resources.files("dtgnn").joinpath("bundle.schema.json") \
            .open() as handle:
        return json.load(handle)


def _model_trees(model):
    serialized = model.to_dict()
    return {"encoder": serialized["encoder"],
            "layers": serialized["layers"],
            "decoder": serialized["decoder"]}


def _representative_graphs(dataset, model, limit):
    """Smallest correctly-classified graph per class, one misclassified
    graph if any, padded with the next-smallest correct ones."""
    if dataset.task == NODE_TASK:
        return list(range(len(dataset.graphs)))
    batch = GraphBatch(dataset)
    predictions = dtgnn_forward(model, batch).predictions
    labels = np.array([g.graph_label for g in dataset.graphs])
    order = sorted(range(len(dataset.graphs)),
                   key=lambda i: (dataset.graphs[i].node_count, i))
    chosen = []
    for klass in range(dataset.class_count):
        for i in order:
            if labels[i] == klass and predictions[i] == klass:
                chosen.append(i)
                break
    for i in order:
        if predictions[i] != labels[i]:
            chosen.append(i)
            break
    for i in order:
        if len(chosen) >= min(limit, len(dataset.graphs)):
            break
        if i not in chosen and predictions[i] == labels[i]:
            chosen.append(i)
    return chosen


def _focus_nodes(dataset, batch, predictions, limit):
    """Unit rows whose explanations are precomputed: correctly classified
    test-style coverage of every class plus a few mistakes."""
    labels = batch.unit_labels
    rows = batch.unit_rows
    chosen = []
    per_class = max(1, limit // max(dataset.class_count, 1))
    for klass in range(dataset.class_count):
        hits = [int(r) for r, y in zip(rows, labels)
                if y == klass and predictions[r] == klass]
        chosen.extend(hits[:per_class])
    misses = [int(r) for r, y in zip(rows, labels) if predictions[r] != y]
    chosen.extend(misses[:2])
    if not chosen:
        chosen = [int(r) for r in rows[:limit]]
    return sorted(set(chosen))[:limit]


def _graph_entry(dataset, graph_id, levels, config):
    graph = dataset.graphs[graph_id]
    batch = GraphBatch(dataset, [graph_id])
    entry = {
        "id": int(graph_id),
        "node_count": int(graph.node_count),
        "directed": bool(graph.directed),
        "edges": [[int(a), int(b)] for a, b in graph.edges],
        "features": None if graph.features is None
        else np.asarray(graph.features).tolist(),
    }
    if dataset.task == NODE_TASK:
        entry["node_labels"] = np.asarray(graph.node_labels).tolist()
    else:
        entry["label"] = int(graph.graph_label)

    entry["levels"] = []
    for level in levels:
        out = dtgnn_forward(level.model, batch)
        entry["levels"].append({
            "states": out.states.T.tolist(),          # [layer][node]
            "predictions": out.predictions.tolist(),
            "leaves": {block: leaf.tolist()
                       for block, leaf in out.leaf_ids.items()},
        })

    model = levels[0].model
    explainer = Explainer(model, batch)
    out = explainer.output
    if dataset.task == NODE_TASK:
        focus = _focus_nodes(dataset, batch, out.predictions,
                             config.focus_nodes)
    else:
        focus = list(range(min(graph.node_count, config.focus_nodes)))
    nodes = []
    for v in focus:
        layers = [explainer.chain[l][v, out.states[v, l], :].tolist()
                  for l in range(model.config.layer_count + 1)]
        item = {"node": int(v), "layers": layers}
        if dataset.task == NODE_TASK:
            item["klass"] = int(out.predictions[v])
            item["prediction"] = explainer.explain(v).tolist()
        nodes.append(item)
    explanation = {"level": 0, "nodes": nodes}
    if dataset.task == GRAPH_TASK:
        explanation["graph"] = {
            "klass": int(out.predictions[0]),
            "importance": explainer.explain(0).tolist(),
        }
    entry["explanations"] = explanation
    return entry


def export_bundle(result, path=None, fold_index=0):
    """Self-contained inspector bundle from one fold's artifacts."""
    try:
        import jsonschema
    except ImportError:                              # pragma: no cover
        jsonschema = None
    artifact = result.artifacts[fold_index]
    schedule = artifact.models["schedule"]
    dataset = result.dataset
    mconfig = result.model_config

    graph_ids = _representative_graphs(dataset, artifact.models["lossless"],
                                       result.config.bundle_graphs)
    bundle = {
        "schema_version": BUNDLE_SCHEMA_VERSION,
        "dataset": {
            "name": dataset.name,
            "task": dataset.task,
            "class_count": int(dataset.class_count),
            "feature_count": int(dataset.feature_count),
            "graph_count": len(dataset.graphs),
            "layer_count": int(mconfig.layer_count),
            "state_count": int(mconfig.state_count),
        },
        "run": {
            "seed": result.config.seed,
            "criterion": result.config.criterion,
            "fold": artifact.fold_index,
        },
        "report": result.report["datasets"][dataset.name]["summary"],
        "levels": [
            {
                "pruned": int(level.pruned),
                "size": int(level.size),
                "accuracy": {k: float(v)
                             for k, v in level.accuracy.items()},
                "trees": _model_trees(level.model),
            }
            for level in schedule
        ],
        "graphs": [_graph_entry(dataset, g, schedule.levels, result.config)
                   for g in graph_ids],
    }
    if jsonschema is not None:
        try:
            jsonschema.validate(bundle, _bundle_schema())
        except jsonschema.ValidationError as exc:
            raise StageError("bundle", f"schema validation failed: "
                             f"{exc.message}") from exc
    if path is not None:
        atomic_write(path, dump_json(bundle))
    return bundle


def load_bundle(path):
    """Read a bundle back, rejecting schema-version mismatches."""
    data = json.loads(Path(path).read_text())
    version = data.get("schema_version")
    if version != BUNDLE_SCHEMA_VERSION:
        raise StageError("bundle",
                         f"unsupported bundle schema version {version!r}")
    return data
