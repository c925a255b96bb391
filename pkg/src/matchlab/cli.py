"""Command-line entry point: ``matchlab {dataset,train,eval,grid}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or numeric error.
Settings resolve as CLI flag > ``--config`` JSON file > built-in default.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import graphs
from .autodiff import NumericError, ParameterStore
from .config import (DISTANCES, GRANULARITIES, NONLINEARITIES, STAGES, STRUCTURES, ConfigError,
                     ModelConfig, design_space)
from .trainer import (DatasetError, TrainConfig, evaluate_split, select_seed, train)

log = logging.getLogger("matchlab")

EXIT_USAGE = 2
EXIT_RUNTIME = 3

MODEL_FLAGS = {
    "distance": ("--distance", str, DISTANCES),
    "stage": ("--stage", str, STAGES),
    "structure": ("--structure", str, STRUCTURES),
    "nonlinearity": ("--nonlinearity", str, NONLINEARITIES),
    "granularity": ("--granularity", str, GRANULARITIES),
    "layers": ("--layers", int, None),
    "dim_h": ("--dim-h", int, None),
    "dim_m": ("--dim-m", int, None),
    "tau": ("--tau", float, None),
    "sinkhorn_steps": ("--sinkhorn-steps", int, None),
}
TRAIN_FLAGS = {
    "margin": ("--margin", float),
    "batch_size": ("--batch-size", int),
    "max_epochs": ("--max-epochs", int),
    "patience": ("--patience", int),
    "min_delta": ("--min-delta", float),
    "seed": ("--seed", int),
    "lr": ("--lr", float),
    "weight_decay": ("--weight-decay", float),
    "batches_per_epoch": ("--batches-per-epoch", int),
}

GRID_HEADER = ("# enumeration: set_align x stage{early,late} x structure{injective,non_injective} "
               "x nonlinearity{neural,dot,hinge} x granularity{node,edge} = 24; "
               "agg_{hinge,mlp,ntn} x (early x structure x nonlinearity x granularity = 12 "
               "+ late x granularity = 2) = 42; total 66")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(f"{self.prog}: error: {message}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    for dest, (flag, typ, choices) in MODEL_FLAGS.items():
        g.add_argument(flag, dest=dest, type=typ, choices=choices, default=argparse.SUPPRESS)
    g.add_argument("--gumbel", dest="gumbel", action="store_true", default=argparse.SUPPRESS,
                   help="Gumbel noise on Sinkhorn logits during training")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for dest, (flag, typ) in TRAIN_FLAGS.items():
        g.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS)
    g.add_argument("--config", type=Path, help="JSON file with model/train settings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matchlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("dataset", help="sample a query/corpus retrieval dataset")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--tudataset", type=Path, help="directory with <DS>_A.txt files")
    src.add_argument("--synthetic", help="generator spec, e.g. er:30:0.2")
    d.add_argument("--source-count", type=int, default=50,
                   help="number of synthetic source graphs")
    d.add_argument("--queries", type=int, default=300)
    d.add_argument("--corpus", type=int, default=800)
    d.add_argument("--max-query-nodes", type=int, default=15)
    d.add_argument("--max-corpus-nodes", type=int, default=20)
    d.add_argument("--seed", type=int, default=1704)
    d.add_argument("--induced", action="store_true", help="induced subgraph relevance")
    d.add_argument("--out", type=Path, default=Path("dataset.json"))

    t = sub.add_parser("train", help="train and test one configuration")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--out-dir", type=Path, default=Path("run"))
    t.add_argument("--seed-select", action="store_true",
                   help="probe the fixed seed set for 10 epochs and keep the best")
    _add_model_flags(t)
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", type=Path)

    g = sub.add_parser("grid", help="train every design-space configuration")
    g.add_argument("--dataset", type=Path, required=True)
    g.add_argument("--out", type=Path, default=Path("grid.csv"))
    g.add_argument("--filter", action="append", default=[], metavar="AXIS=VALUE")
    for dest in ("layers", "dim_h", "dim_m", "tau", "sinkhorn_steps"):
        flag, typ, _ = MODEL_FLAGS[dest]
        g.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS)
    _add_train_flags(g)
    return parser


# ---------------------------------------------------------------------------
# config resolution

def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return doc


def resolve(args: argparse.Namespace) -> tuple[dict, dict]:
    """Model and train settings after applying file and flag overrides."""
    file_doc = _load_config_file(getattr(args, "config", None))
    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    flat = dict(file_doc.get("model", {}))
    flat_train = dict(file_doc.get("train", {}))
    for k, v in file_doc.items():
        if k in model_names:
            flat[k] = v
        elif k in train_names:
            flat_train[k] = v
        elif k not in ("model", "train"):
            raise CliError(f"unknown setting {k!r} in config file")
    for k, v in vars(args).items():
        if k in model_names:
            flat[k] = v
        elif k in train_names:
            flat_train[k] = v
    return flat, flat_train


def make_configs(model_doc: dict, train_doc: dict) -> tuple[ModelConfig, TrainConfig]:
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            model = ModelConfig.from_dict(model_doc)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        tc = TrainConfig(**train_doc)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return model, tc


def _print_config(**sections) -> None:
    print("config: " + json.dumps(sections, sort_keys=True, default=str), flush=True)


def _load_dataset(path: Path) -> graphs.RetrievalDataset:
    try:
        return graphs.RetrievalDataset.load(path)
    except (graphs.IngestError, graphs.MalformedDatasetError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(f"cannot load dataset {path}: {exc}") from exc


def _dump(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands

def cmd_dataset(args) -> int:
    _print_config(dataset={k: (str(v) if isinstance(v, Path) else v)
                           for k, v in vars(args).items() if k not in ("func",)})
    try:
        if args.tudataset is not None:
            source = graphs.parse_tudataset(args.tudataset)
        else:
            source = graphs.synthetic_source(args.synthetic, args.source_count, args.seed)
    except (graphs.IngestError, graphs.MalformedDatasetError, ValueError) as exc:
        raise CliError(f"unreadable source: {exc}") from exc
    try:
        data = graphs.sample_query_corpus(source, args.queries, args.corpus,
                                          args.max_query_nodes, args.max_corpus_nodes,
                                          args.seed, induced=args.induced)
    except (graphs.SamplingError, ValueError) as exc:
        raise CliError(f"sampling failed: {exc}", EXIT_RUNTIME) from exc
    data.meta["source"] = str(args.tudataset) if args.tudataset else args.synthetic
    args.out.parent.mkdir(parents=True, exist_ok=True)
    data.save(args.out)
    print(f"wrote {args.out}: {len(data.queries)} queries, {len(data.corpus)} corpus graphs, "
          f"positive-pair fraction {data.positive_fraction:.4f}")
    return 0


def run_training(model: ModelConfig, tc: TrainConfig, data: graphs.RetrievalDataset,
                 seed_select: bool = False) -> tuple[ParameterStore, dict, dict]:
    """Train, test, and return (params, deterministic metrics, timings)."""
    if seed_select:
        tc = TrainConfig(**{**tc.to_dict(), "seed": select_seed(model, data, tc)})
    store, hist = train(model, data, tc)
    val = evaluate_split(store, model, data, "val")
    test = evaluate_split(store, model, data, "test", timed=True)
    metrics = {
        "model": model.to_dict(),
        "train": tc.to_dict(),
        "axes": model.axes(),
        "test_map": test.map,
        "val_map": val.map,
        "test_ap": {str(k): v for k, v in test.ap.items()},
        "val_map_history": hist.val_map,
        "train_loss_history": hist.train_loss,
        "best_epoch": hist.best_epoch,
        "epochs_run": len(hist.train_loss),
        "stopped_early": hist.stopped_early,
    }
    timing = {"train_seconds": hist.seconds, "test_seconds": test.seconds,
              "median_pair_latency": test.median_latency,
              "mean_pair_latency": float(np.mean(test.pair_latencies)) if test.pair_latencies else 0.0}
    return store, metrics, timing


def cmd_train(args) -> int:
    model_doc, train_doc = resolve(args)
    model, tc = make_configs(model_doc, train_doc)
    _print_config(model=model.to_dict(), train=tc.to_dict(), dataset=str(args.dataset),
                  out_dir=str(args.out_dir), seed_select=args.seed_select)
    data = _load_dataset(args.dataset)
    store, metrics, timing = run_training(model, tc, data, args.seed_select)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = store.to_json()
    ckpt["config"] = model.to_dict()
    _dump(args.out_dir / "checkpoint.json", ckpt)
    _dump(args.out_dir / "metrics.json", metrics)
    _dump(args.out_dir / "timing.json", timing)
    print(f"test MAP {metrics['test_map']:.4f}  val MAP {metrics['val_map']:.4f}  "
          f"median pair latency {timing['median_pair_latency'] * 1e3:.2f} ms")
    return 0


def cmd_eval(args) -> int:
    try:
        doc = json.loads(args.checkpoint.read_text(encoding="utf-8"))
        model = ModelConfig.from_dict(doc["config"], warn=False)
        store = ParameterStore.from_json(doc)
    except (OSError, KeyError, json.JSONDecodeError, ConfigError) as exc:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    _print_config(model=model.to_dict(), dataset=str(args.dataset), split=args.split)
    data = _load_dataset(args.dataset)
    report = evaluate_split(store, model, data, args.split, timed=True)
    if args.out:
        _dump(args.out, report.to_json())
    print(f"{args.split} MAP {report.map:.4f} over {len(report.ap)} queries")
    return 0


def parse_filters(items: list[str]) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    axes = ("distance", "stage", "structure", "nonlinearity", "granularity")
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in axes:
            raise CliError(f"bad --filter {item!r}; expected AXIS=VALUE with AXIS in {axes}")
        out.setdefault(key, set()).update(value.split(","))
    return out


def grid_configs(filters: dict[str, set[str]], **model_kw) -> list[ModelConfig]:
    out = []
    for cfg in design_space(**model_kw):
        axes = cfg.axes()
        if all(axes[k] in allowed for k, allowed in filters.items()):
            out.append(cfg)
    return out


def _grid_row(job) -> dict:
    model, tc, dataset_path = job
    row = dict(model.axes())
    try:
        data = graphs.RetrievalDataset.load(dataset_path)
        _, metrics, timing = run_training(model, tc, data)
        row.update(val_map=metrics["val_map"], test_map=metrics["test_map"],
                   train_seconds=timing["train_seconds"],
                   median_pair_latency=timing["median_pair_latency"], status="ok", error="")
    except Exception as exc:  # recorded per row; the sweep carries on
        row.update(val_map="", test_map="", train_seconds="", median_pair_latency="",
                   status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


GRID_COLUMNS = ("distance", "stage", "structure", "nonlinearity", "granularity", "val_map",
                "test_map", "train_seconds", "median_pair_latency", "status", "error")


def write_grid_csv(rows: list[dict], path: Path) -> None:
    buf = io.StringIO()
    buf.write(GRID_HEADER + "\n")
    w = csv.DictWriter(buf, fieldnames=GRID_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def cmd_grid(args) -> int:
    model_doc, train_doc = resolve(args)
    filters = parse_filters(args.filter)
    for axis in ("distance", "stage", "structure", "nonlinearity", "granularity"):
        if axis in model_doc:
            raise CliError(f"grid sweeps {axis}; use --filter to restrict it")
    _, tc = make_configs({}, train_doc)
    try:
        configs = grid_configs(filters, **model_doc)
    except ConfigError as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    _print_config(train=tc.to_dict(), model_overrides=model_doc, filters=
                  {k: sorted(v) for k, v in filters.items()}, rows=len(configs))
    _load_dataset(args.dataset)
    workers = max(1, int(os.environ.get("MATCHLAB_THREADS", "1")))
    jobs = [(cfg, tc, args.dataset) for cfg in configs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_grid_row, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_grid_row(job))
            r = rows[-1]
            print(f"{job[0].label()}: {r['status']} test MAP {r['test_map']}", flush=True)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_grid_csv(rows, args.out)
    ok = sum(r["status"] == "ok" for r in rows)
    print(f"wrote {args.out}: {ok}/{len(rows)} configurations succeeded")
    return 0 if ok else EXIT_RUNTIME


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(str(exc), file=sys.stderr)
        return exc.code
    except (NumericError, DatasetError, graphs.SamplingError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
