"""Command-line entry point: describe, count, gradcheck, train, randnet, analyze.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 budget/constraint failure.
Primary outputs are deterministic; run timestamps go to ``metadata.json``.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .graph import GraphError, ModuleGraph, deserialize_architecture, serialize_architecture
from .zoo import ModelConfig, available, build_model, resolve

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers ----------------------------------------------------------------------------


def _read_json(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read JSON {path}: {exc}") from None


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return out


def _metadata(out: Path, command: str, argv: Sequence[str]) -> None:
    _write_json(out / "metadata.json", {
        "schema": "densecat.meta/1", "command": command, "argv": list(argv),
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
    })


def load_model(spec: str, classes: Optional[int] = None) -> ModuleGraph:
    """A preset name, ``ledger:<step>``, or a JSON file (architecture or ModelConfig)."""
    if spec.endswith(".json") or Path(spec).is_file():
        doc = _read_json(spec)
        if "nodes" in doc:
            graph = deserialize_architecture(doc)
            if classes is not None and graph.channels()[graph.output] != classes:
                raise UsageError(f"{spec} has {graph.channels()[graph.output]} outputs, need {classes}")
            return graph
        cfg, name = ModelConfig.from_json(doc), Path(spec).stem
    else:
        try:
            cfg, name = resolve(spec)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
    if classes is not None:
        cfg = replace(cfg, num_classes=classes)
    return build_model(cfg, name)


def _input_shape(graph: ModuleGraph, size: int, batch: int = 1) -> tuple:
    return (batch, graph.in_channels, size, size)


# -- describe / count ---------------------------------------------------------------------


def stage_rows(graph: ModuleGraph, size: int) -> list[dict]:
    shapes = graph.infer_shapes(_input_shape(graph, size))
    rows = []
    for st in graph.meta.get("stages", []):
        out = shapes[st["output"]]
        rows.append({"stage": st["index"], "resolution": out[2], "channels_in": st["in_channels"],
                     "channels_out": st["out_channels"], "growth_rate": st["growth_rate"],
                     "blocks": st["blocks"], "transitions": st["in_stage_transitions"]
                     + (1 if st["boundary_transition_channels"] else 0)})
    return rows


def cmd_describe(args) -> int:
    graph = load_model(args.model)
    rows = stage_rows(graph, args.input)
    cols = ["stage", "resolution", "channels_in", "channels_out", "growth_rate", "blocks",
            "transitions"]
    print(f"# {args.model}  input {args.input}x{args.input}  nodes {len(graph.nodes)}")
    print("  ".join(f"{c:>12}" for c in cols))
    for r in rows:
        print("  ".join(f"{r[c]:>12}" for c in cols))
    if args.json:
        Path(args.json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json).write_text(serialize_architecture(graph) + "\n")
    return EXIT_OK


def cmd_count(args) -> int:
    from .cost import cost_report

    graph = load_model(args.model)
    report = cost_report(graph, _input_shape(graph, args.input, args.batch))
    print(f"{args.model} @ {args.input}x{args.input}, batch {args.batch}")
    print(f"params      {report.params:,} ({report.params / 1e6:.3f} M)")
    print(f"MACs        {report.macs:,} ({report.macs / 1e9:.3f} G)")
    print(f"peak memory {report.peak_activation_bytes:,} bytes")
    out = _out_dir(args)
    (out / "cost.csv").write_text(report.to_csv())
    summary = report.summary()
    summary["model"] = args.model
    _write_json(out / "cost.json", summary)
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    names = None if args.ops == "all" else [n for n in args.ops.split(",") if n]
    unknown = [n for n in names or [] if n not in gradcheck.OPS]
    if unknown:
        raise UsageError(f"unknown op(s) {unknown}; available: {sorted(gradcheck.OPS)}")
    results = gradcheck.check_all(names, seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# -- train ------------------------------------------------------------------------------


def dataset_handles(args, config: dict):
    from .train.data import DatasetHandle

    doc = dict(config.get("dataset", {}))
    if args.dataset.startswith("cifar10:"):
        doc.update(source="cifar10_binary", path=args.dataset.split(":", 1)[1])
        if args.limit:
            doc["limit"] = args.limit
    elif args.dataset == "blobs":
        doc.setdefault("source", "synthetic_blobs")
        for key in ("classes", "dim", "noise", "max_shift"):
            if getattr(args, key, None) is not None:
                doc[key] = getattr(args, key)
        doc["seed"] = args.data_seed
    else:
        raise UsageError(f"unknown dataset {args.dataset!r}; use 'blobs' or 'cifar10:<path>'")
    n_eval = doc.pop("n_eval", args.n_eval)
    if args.n_train is not None:
        doc["n"] = args.n_train
    try:
        train_h = DatasetHandle(**doc)
        eval_h = DatasetHandle(**{**doc, "split": "test",
                                  **({"n": n_eval} if train_h.source == "synthetic_blobs" else {}),
                                  **({"limit": n_eval} if train_h.source == "cifar10_binary" else {})})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid dataset config: {exc}") from None
    return train_h, eval_h


def _train_config(args, config: dict):
    from .train.loop import TrainConfig, TrainConfigError

    doc = dict(config.get("train", {}))
    try:
        cfg = TrainConfig.desk(**doc) if args.recipe == "desk" else TrainConfig(**doc)
        over = {"seed": args.seed}
        if args.epochs is not None:
            over["epochs"] = args.epochs
            if args.epochs <= cfg.warmup_epochs:
                over["warmup_epochs"] = 0
        if getattr(args, "drop_path", None) is not None:
            over["drop_path_rate"] = args.drop_path
        return cfg.replace(**over)
    except (TypeError, TrainConfigError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def cmd_train(args) -> int:
    from .train.data import DatasetError, load_dataset
    from .train.loop import save_checkpoint, train

    config = _read_json(args.config)
    train_h, eval_h = dataset_handles(args, config)
    cfg = _train_config(args, config)
    try:
        train_set, eval_set = load_dataset(train_h), load_dataset(eval_h)
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    graph = load_model(args.model, classes=train_set.classes)
    graph.initialize(args.seed)
    summary = train(graph, train_set, cfg, eval_set)
    out = _out_dir(args)
    doc = summary.to_json()
    doc.update(model=args.model, dataset={"train": train_h.to_json(), "eval": eval_h.to_json()})
    _write_json(out / "summary.json", doc)
    if cfg.epochs > 0:
        (out / "curves.csv").write_text(summary.curves_csv())
    if args.checkpoint and not summary.failed:
        save_checkpoint(graph, out / "checkpoint.bin")
    _metadata(out, "train", args.argv)
    status = "FAILED: " + summary.failure if summary.failed else "ok"
    print(f"{args.model}: initial acc {summary.initial_acc:.4f}, final acc {summary.final_acc:.4f} ({status})")
    return EXIT_NUMERIC if summary.failed else EXIT_OK


# -- randnet ------------------------------------------------------------------------------


def _space(args):
    from .randnet import Budget, RandSpec, default_space

    try:
        spec, budget = default_space(args.space)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    try:
        if args.spec:
            spec = RandSpec.from_json({**spec.to_json(), **_read_json(args.spec)})
        if args.budget:
            budget = Budget(**{**budget.to_json(), **_read_json(args.budget)})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid spec/budget: {exc}") from None
    return spec, budget


def cmd_randnet(args) -> int:
    from .randnet import BudgetError, costs_of, run_paired_experiment, sample_network
    from .graph import config_hash

    spec, budget = _space(args)
    try:
        if args.action == "sample":
            cfg = sample_network(spec, args.shortcut, budget, args.seed)
            graph = cfg.build()
            doc = {"schema": "densecat.randnet_sample/1", "config": cfg.to_json(),
                   "config_hash": config_hash(graph), "costs": costs_of(cfg, budget),
                   "budget": budget.to_json()}
            print(json.dumps(doc, indent=1, sort_keys=True))
            return EXIT_OK
        from .train.data import load_dataset

        config = _read_json(args.config)
        train_h, eval_h = dataset_handles(args, config)
        tcfg = _train_config(args, config)
        train_set, eval_set = load_dataset(train_h), load_dataset(eval_h)
        spec = replace(spec, num_classes=train_set.classes)
        result = run_paired_experiment(spec, budget, args.pairs, tcfg, train_set, eval_set,
                                       master_seed=args.seed, workers=args.workers)
    except BudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    out = _out_dir(args)
    result.write(out)
    _metadata(out, "randnet run", args.argv)
    k = result.summary["kinds"]
    p = result.summary["paired"]
    for kind in ("concat", "add"):
        mean = k[kind]["mean"]
        print(f"{kind:>6}: mean {mean if mean is None else round(mean, 4)}  std {k[kind]['std']:.4f}  "
              f"n {k[kind]['count']}  failed {k[kind]['failures']}")
    print(f"concat wins {p['concat_wins']}, add wins {p['add_wins']}, ties {p['ties']}, "
          f"sign test p {p['sign_test_p']:.4g}")
    if result.summary["skipped_slots"]:
        print(f"skipped seed slots (no draw fit the budget): {result.summary['skipped_slots']}")
    return EXIT_OK


# -- analyze ------------------------------------------------------------------------------


def _analysis_models(args) -> list[ModuleGraph]:
    from .train.loop import load_checkpoint

    graphs = [load_checkpoint(p) for p in args.checkpoint]
    for m in args.model:
        g = load_model(m)
        g.initialize(args.seed)
        graphs.append(g)
    if not graphs:
        raise UsageError("give at least one --checkpoint or --model")
    return graphs


def cmd_analyze(args) -> int:
    from .analysis import capture_features, cka_grid_csv, rank_report_csv
    from .train.data import load_dataset

    graphs = _analysis_models(args)
    layers = [l for l in args.layers.split(",") if l]
    if not layers:
        raise UsageError("--layers must name at least one layer")
    for i, g in enumerate(graphs):
        missing = [l for l in layers if l not in g.names()]
        if missing:
            print(f"error: model {i} lacks layer(s) {missing}", file=sys.stderr)
            return EXIT_USAGE
    config = _read_json(args.config)
    _, eval_h = dataset_handles(args, config)
    data = load_dataset(eval_h)
    if data.image_shape[0] != graphs[0].in_channels:
        raise UsageError("dataset channels do not match the model input")
    x = data.images[: args.n]
    feats = [capture_features(g, x, layers, model=str(i)) for i, g in enumerate(graphs)]
    out = _out_dir(args)
    if args.action == "cka":
        other = feats[1] if len(feats) > 1 else feats[0]
        (out / "cka.csv").write_text(cka_grid_csv(feats[0], other))
    else:
        (out / "rank.csv").write_text(rank_report_csv(feats[0], args.tol))
    _metadata(out, f"analyze {args.action}", args.argv)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def _add_data_args(p):
    p.add_argument("--dataset", default="blobs", help="'blobs' or 'cifar10:<dir or .bin>'")
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-eval", type=int, default=500)
    p.add_argument("--limit", type=int, default=None, help="CIFAR-10 training subset size")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--noise", type=float, default=None)
    p.add_argument("--max-shift", type=int, default=None)
    p.add_argument("--data-seed", type=int, default=0)


def _add_train_args(p):
    p.add_argument("--recipe", choices=("desk", "full"), default="desk",
                   help="base training recipe before --config overrides")
    p.add_argument("--epochs", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="JSON file overriding module defaults")

    parser = _Parser(prog="densecat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", parents=[common], help="per-stage architecture table")
    p.add_argument("model", help=f"one of {available()} or a JSON file")
    p.add_argument("--input", type=int, default=224)
    p.add_argument("--json", default=None, help="write the architecture JSON here")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("count", parents=[common], help="parameters, MACs and peak memory")
    p.add_argument("model")
    p.add_argument("--input", type=int, default=224)
    p.add_argument("--batch", type=int, default=1)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--ops", default="all", help="'all' or comma-separated op names")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("model")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--drop-path", type=float, default=None)
    p.add_argument("--checkpoint", action="store_true", help="also write checkpoint.bin/.json")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("randnet", parents=[common], help="random add/concat network pilot")
    p.add_argument("action", choices=("sample", "run"))
    p.add_argument("--space", default="C")
    p.add_argument("--spec", default=None, help="JSON overriding the space's fields")
    p.add_argument("--budget", default=None, help="JSON overriding the space's budget")
    p.add_argument("--shortcut", choices=("add", "concat"), default="concat")
    p.add_argument("--pairs", type=int, default=2)
    p.add_argument("--workers", type=int, default=None,
                   help="parallel training processes (default: DENSECAT_THREADS or CPU count)")
    _add_data_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_randnet)

    p = sub.add_parser("analyze", parents=[common], help="CKA grid or effective-rank report")
    p.add_argument("action", choices=("cka", "rank"))
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--model", action="append", default=[],
                   help="preset/JSON model initialized from --seed (instead of a checkpoint)")
    p.add_argument("--layers", required=True)
    p.add_argument("--n", type=int, default=64, help="number of images")
    p.add_argument("--tol", type=float, default=None, help="absolute singular-value threshold")
    _add_data_args(p)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
