"""Command-line entry point: ``plansel <subcommand> [flags]``.

Results are JSON on stdout (or ``--out``). Failures exit nonzero and print a
JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gbdt
from .data import FormatError, load_manifest, parse_split_file, feature_label_correlation, write_dataset
from .gnn import (
    FeatureCache,
    GnnModel,
    ModelConfig,
    TrainConfig,
    embed_dataset,
    load_model,
    predict,
    save_model,
    train_model,
)
from .graph import FEATURE_BLOCKS, FeatureConfig
from .pipeline import (
    ExperimentSpec,
    embed_and_boost,
    make_synthetic_benchmark,
    report_stats,
    run_experiment,
    select_planner,
    selection_accuracy,
)

FEATURE_PRESETS = ("type", "type+indeg", "type+inoutdeg", "type+neigh")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--repr", choices=("grounded", "lifted"), default=None,
                   help="expected representation (checked against the data)")
    p.add_argument("--model", choices=("gcn", "ggnn", "gat", "gin"), action="append",
                   help="GNN variant; repeat for embed/boost to concatenate embeddings")
    p.add_argument("--task", choices=("time", "binary", "multiclass"), default="time")
    p.add_argument("--features", choices=FEATURE_PRESETS, default="type")
    p.add_argument("--split", choices=("random", "domain"), default="random")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--hidden", type=int, default=100)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", type=Path, help="dataset directory (labels.csv + graphs/)")
    p.add_argument("--splits", type=Path, help="split file: 'fold <i> test <id> ...' per line")
    p.add_argument("--out", type=Path, help="output file (default: stdout)")
    p.add_argument("--metric", choices=("solves", "matches_best"), default="solves")
    p.add_argument("-v", "--verbose", action="store_true")


def _boost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rounds", type=int, default=500)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--boost-lr", type=float, default=0.01)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--embed-task", choices=("time", "binary"), default="time")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plansel", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("stats", "graph sizes, per-type degree and feature/label correlation"),
        ("correlate", "feature/label correlation matrix"),
        ("train", "train one GNN and write a checkpoint"),
        ("eval", "evaluate a checkpoint's planner selection"),
        ("experiment", "GNN-only cross-validated experiment"),
        ("embed", "train GNN(s) and export pooled graph embeddings"),
        ("boost", "cross-validated GNN-embedding + boosted-tree experiment"),
        ("synth", "write a synthetic benchmark dataset"),
    ]:
        p = sub.add_parser(name, help=help_)
        _shared(p)
        if name in ("boost", "embed"):
            _boost_flags(p)
        if name in ("train", "eval"):
            p.add_argument("--fold", type=int, default=None,
                           help="with --splits: train on / evaluate the given fold")
        if name == "train":
            p.add_argument("--history", type=Path, help="write per-epoch loss CSV here")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "embed":
            p.add_argument("--checkpoint", type=Path, action="append",
                           help="use trained checkpoint(s) instead of training")
        if name == "synth":
            p.add_argument("--num-graphs", type=int, default=300)
    return parser


def _manifest(args):
    if args.data is None:
        raise ValueError("--data is required")
    return load_manifest(args.data, args.repr)


def _features(args) -> FeatureConfig:
    return FeatureConfig.from_preset(args.features)


def _folds(args, manifest):
    if args.splits is None:
        return None
    return parse_split_file(args.splits.read_bytes(), manifest.task_ids, source=str(args.splits))


def _fold_ids(args, manifest, side: str) -> list[str]:
    folds = _folds(args, manifest)
    if folds is None or args.fold is None:
        return manifest.task_ids
    match = [f for f in folds if f.fold_index == args.fold]
    if not match:
        raise ValueError(f"fold {args.fold} not in {args.splits}")
    return list(match[0].train_ids if side == "train" else match[0].test_ids)


def _spec(args, manifest, boost: gbdt.BoostConfig | None = None) -> ExperimentSpec:
    return ExperimentSpec(
        representation=manifest.representation,
        models=tuple(args.model or ["gcn"]),
        task=args.task,
        features=_features(args),
        split="domain_preserving" if args.split == "domain" else "random",
        folds=args.folds,
        repeats=args.repeats,
        seed=args.seed,
        train=TrainConfig(args.epochs, args.lr, args.batch_size, args.seed),
        hidden=args.hidden,
        layers=args.layers,
        heads=args.heads,
        boost=boost,
        embed_task=getattr(args, "embed_task", "time"),
        metric=args.metric,
        provided_folds=_folds(args, manifest),
    )


def _emit(args, payload) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    if args.out is not None:
        args.out.write_text(text + ("" if text.endswith("\n") else "\n"), encoding="utf-8")
    else:
        print(text)


def _train_one(args, manifest, variant: str, task: str, ids, seed_offset: int = 0) -> GnnModel:
    features = _features(args)
    model = GnnModel(ModelConfig(variant=variant, in_width=features.width(manifest.vocab),
                                 hidden=args.hidden, layers=args.layers, task=task,
                                 heads=args.heads, seed=args.seed + seed_offset))
    result = train_model(model, manifest, ids, TrainConfig(args.epochs, args.lr, args.batch_size, args.seed),
                         features)
    if getattr(args, "history", None) is not None:
        args.history.write_text(result.history_csv(), encoding="utf-8")
    return model


def cmd_stats(args):
    manifest = _manifest(args)
    _emit(args, report_stats(manifest))


def cmd_correlate(args):
    manifest = _manifest(args)
    config = FeatureConfig(FEATURE_BLOCKS) if args.features == "type" else _features(args)
    _emit(args, feature_label_correlation(manifest, manifest.vocab, config).to_dict())


def cmd_train(args):
    manifest = _manifest(args)
    if args.out is None:
        raise ValueError("train needs --out for the checkpoint")
    model = _train_one(args, manifest, (args.model or ["gcn"])[0], args.task,
                       _fold_ids(args, manifest, "train"))
    save_model(model, args.out)
    info = {"checkpoint": str(args.out), "config": asdict(model.config),
            "features": args.features}
    print(json.dumps(info, indent=2, sort_keys=True))


def cmd_eval(args):
    manifest = _manifest(args)
    model = load_model(args.checkpoint)
    if model.task == "embed":
        raise ValueError("an embedding-only checkpoint cannot select planners")
    features = _features(args)
    ids = _fold_ids(args, manifest, "test")
    preds = predict(model, manifest, ids, features)
    selections = [select_planner(p, model.task) for p in preds]
    acc = selection_accuracy(selections, [manifest.labels(t) for t in ids], args.metric)
    _emit(args, {"metric": args.metric, "accuracy": acc, "tasks": len(ids),
                 "selections": dict(zip(ids, selections))})


def cmd_experiment(args):
    manifest = _manifest(args)
    if args.task == "multiclass":
        raise ValueError("multiclass selection needs the boosted path: use 'plansel boost'")
    _emit(args, run_experiment(_spec(args, manifest), manifest).to_json())


def cmd_embed(args):
    manifest = _manifest(args)
    features = _features(args)
    ids = manifest.task_ids
    if args.checkpoint:
        models = [load_model(c) for c in args.checkpoint]
    else:
        models = [_train_one(args, manifest, v, args.embed_task, ids, 7919 * i)
                  for i, v in enumerate(args.model or ["gcn"])]
    cache = FeatureCache(manifest, features)
    emb = embed_dataset([(m, cache) for m in models], ids)
    _emit(args, {"task_ids": ids, "width": int(emb.shape[1]),
                 "models": [m.config.variant for m in models],
                 "embeddings": np.round(emb, 12).tolist()})


def cmd_boost(args):
    manifest = _manifest(args)
    boost = gbdt.BoostConfig(rounds=args.rounds, max_depth=args.depth, learning_rate=args.boost_lr,
                             patience=args.patience)
    _emit(args, embed_and_boost(_spec(args, manifest, boost), manifest).to_json())


def cmd_synth(args):
    if args.out is None:
        raise ValueError("synth needs --out DIR")
    m = make_synthetic_benchmark(args.num_graphs, args.repr or "grounded", seed=args.seed)
    write_dataset(args.out, [m.graph(t) for t in m.task_ids], [e.labels for e in m.entries])
    print(json.dumps({"written": str(args.out), "graphs": len(m)}))


COMMANDS = {
    "stats": cmd_stats, "correlate": cmd_correlate, "train": cmd_train, "eval": cmd_eval,
    "experiment": cmd_experiment, "embed": cmd_embed, "boost": cmd_boost, "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (FormatError, ValueError, KeyError, OSError, RuntimeError, AssertionError) as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc), "command": args.command}}
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
