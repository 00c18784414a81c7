"""Command-line front end.

Every stage recomputes deterministically from the root seed (named
substreams all the way down), so the commands need no artifact passing:

    dtgnn datagen --dataset infection --out data
    dtgnn train   --dataset infection --folds 3
    dtgnn distill --dataset infection --out runs
    dtgnn prune   --dataset infection --prune combined --out runs
    dtgnn explain --dataset ba_2motifs --graph 7 --node 3 --layer 2
    dtgnn report  --dataset negative_evidence --dataset infection --out runs
    dtgnn bundle  --dataset ba_2motifs --out runs

Worker count for fold parallelism comes from DTGNN_WORKERS.
"""

import argparse
import json
import sys
from pathlib import Path

from . import datagen, harness, prune
from .diffgnn import GraphBatch, train
from .distill import distill
from .explain import Explainer, explain_layer
from .graphs import ConfigError, NODE_TASK, make_folds


def _common(parser):
    parser.add_argument("--dataset", required=True, action="append",
                        help="dataset name; repeatable for report")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--folds", type=int, default=None,
                        help="run only the first N of the 10 folds")
    parser.add_argument("--prune", default=prune.COMBINED,
                        choices=sorted(prune.CRITERIA),
                        help="lossless pruning criterion")
    parser.add_argument("--lossy-levels", type=int, default=10)
    parser.add_argument("--data-dir", default=None,
                        help="TUDataset directory for real datasets "
                             "(default: DTGNN_DATA_DIR)")
    parser.add_argument("--out", default=None,
                        help="output directory (stdout when omitted)")
    for flag, key in (("--layers", "layer_count"),
                      ("--states", "state_count"),
                      ("--epochs", "epochs"),
                      ("--patience", "patience"),
                      ("--hidden", "hidden_width"),
                      ("--restarts", "restarts")):
        parser.add_argument(flag, dest=key, type=int, default=None)


def _config(args, dataset_name):
    overrides = {key: getattr(args, key)
                 for key in ("layer_count", "state_count", "epochs",
                             "patience", "hidden_width", "restarts")
                 if getattr(args, key, None) is not None}
    return harness.ExperimentConfig(
        dataset=dataset_name, seed=args.seed, folds=args.folds,
        criterion=args.prune, lossy_levels=args.lossy_levels,
        output_dir=args.out, overrides=overrides, data_dir=args.data_dir)


def _emit(args, relative_path, text):
    if args.out:
        harness.atomic_write(Path(args.out) / relative_path, text)
        print(Path(args.out) / relative_path)
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def cmd_datagen(args):
    for name in args.dataset:
        dataset = harness.resolve_dataset(name, seed=args.seed,
                                          data_dir=args.data_dir)
        if not args.out:
            raise SystemExit("datagen needs --out")
        directory = Path(args.out) / dataset.name
        datagen.write_dataset(dataset, directory)
        print(f"{dataset.name}: {len(dataset.graphs)} graphs -> {directory}")


def _prepared(args, name):
    config = _config(args, name)
    dataset = harness.resolve_dataset(name, seed=config.seed,
                                      data_dir=config.data_dir)
    folds = make_folds(dataset, seed=config.seed)
    if config.folds is not None:
        folds = folds[:config.folds]
    return config, dataset, folds, harness.model_config(dataset, config)


def cmd_train(args):
    for name in args.dataset:
        config, dataset, folds, mconfig = _prepared(args, name)
        results = train(dataset, folds, mconfig,
                        workers=config.resolved_workers())
        records = [{"fold": int(r.fold.fold_index), **r.metrics} for r in results]
        for r in records:
            r.pop("curve", None)
        _emit(args, f"{dataset.name}/train.json",
              harness.dump_json({"dataset": dataset.name, "folds": records}))


def cmd_distill(args):
    for name in args.dataset:
        config, dataset, folds, mconfig = _prepared(args, name)
        results = train(dataset, folds, mconfig,
                        workers=config.resolved_workers())
        batch = GraphBatch(dataset)
        labels = dataset.unit_labels()
        for trained in results:
            model = distill(trained.model, dataset, trained.fit_ids)
            record = {
                "fold": int(trained.fold.fold_index),
                "fidelity": model.fidelity,
                "size": prune.model_size(model),
                "accuracy": harness._stage_accuracies(
                    model, batch, labels,
                    {"fit": trained.fit_ids,
                     "validation": trained.fold.validation_ids,
                     "test": trained.fold.test_ids}),
                "model": model.to_dict(),
            }
            _emit(args,
                  f"{dataset.name}/distill_fold_{trained.fold.fold_index}.json",
                  harness.dump_json(record))


def cmd_prune(args):
    for name in args.dataset:
        config, dataset, folds, mconfig = _prepared(args, name)
        for fold in folds:
            artifact = harness.run_fold(dataset, fold, mconfig,
                                        config.criterion,
                                        config.lossy_levels)
            payload = dict(artifact.record)
            payload["lossless_model"] = \
                artifact.models["lossless"].to_dict()
            _emit(args, f"{dataset.name}/prune_fold_{fold.fold_index}.json",
                  harness.dump_json(payload))


def cmd_explain(args):
    name = args.dataset[0]
    config, dataset, folds, mconfig = _prepared(args, name)
    artifact = harness.run_fold(dataset, folds[0], mconfig,
                                config.criterion, config.lossy_levels)
    model = artifact.models["lossless"]
    batch = GraphBatch(dataset, [args.graph])
    if args.layer is not None:
        e = explain_layer(model, batch, args.layer)
        states = Explainer(model, batch).states
        state = int(states[args.node, args.layer])
        payload = {
            "dataset": dataset.name, "graph": args.graph, "node": args.node,
            "layer": args.layer, "state": state,
            "importance": e[args.node, state, :].tolist(),
        }
    else:
        explainer = Explainer(model, batch)
        row = args.node if dataset.task == NODE_TASK else 0
        importance = explainer.explain(row, args.klass)
        klass = int(explainer.output.predictions[row]) \
            if args.klass is None else args.klass
        payload = {"dataset": dataset.name, "graph": args.graph,
                   "node": args.node, "klass": klass,
                   "importance": importance.tolist()}
    _emit(args, f"{dataset.name}/explanation.json",
          harness.dump_json(payload))


def cmd_report(args):
    runs = []
    for name in args.dataset:
        config = _config(args, name)
        result = harness.run_experiment(config)
        runs.append((result.config, result.dataset, result.model_config,
                     result.artifacts))
    report = harness.build_report(runs)
    _emit(args, "report.json", harness.dump_json(report))
    _emit(args, "report.txt", harness.render_report(report))


def cmd_bundle(args):
    for name in args.dataset:
        config = _config(args, name)
        result = harness.run_experiment(config)
        bundle = harness.export_bundle(result)
        _emit(args, f"{result.dataset.name}/bundle.json",
              harness.dump_json(bundle))


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="dtgnn",
        description="categorical-state GNNs distilled into decision trees")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("datagen", cmd_datagen), ("train", cmd_train),
                     ("distill", cmd_distill), ("prune", cmd_prune),
                     ("explain", cmd_explain), ("report", cmd_report),
                     ("bundle", cmd_bundle)):
        sub = commands.add_parser(name)
        _common(sub)
        if name == "explain":
            sub.add_argument("--graph", type=int, default=0)
            sub.add_argument("--node", type=int, default=0)
            sub.add_argument("--layer", type=int, default=None)
            sub.add_argument("--klass", "--class", dest="klass", type=int,
                             default=None)
        sub.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except (harness.StageError, ConfigError, datagen.TUDatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
