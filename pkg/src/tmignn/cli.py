"""Command line entry point: ``tmignn <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, experiments, synth
from .graph import ConfigError, GraphBatch, dump_graph
from .metrics import format_report, rank_items
from .model import (
    ABLATION_LABELS,
    Ablations,
    CheckpointError,
    ModelConfig,
    VocabularyError,
    forward,
    load_checkpoint,
    save_checkpoint,
    session_graphs,
)
from .train import NumericError, TrainConfig, evaluate, read_config_file, train_epochs

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tmignn")


class UsageError(Exception):
    pass


# option name -> (type, default); shared by train and ablate, overridable from --config
MODEL_OPTIONS = {
    "dim": (int, 128),
    "interests": (int, 2),
    "layers": (int, 3),
    "bucket_width": (float, 8.0),
    "max_step": (int, 300),
    "bidirectional": (lambda s: str(s).lower() in ("1", "true", "yes", "on"), True),
}
TRAIN_OPTIONS = {
    "lr": (float, 0.001),
    "lr_decay": (float, 0.1),
    "decay_step": (int, 3),
    "batch_size": (int, 64),
    "epochs": (int, 30),
    "lam": (float, 1.0),
    "seed": (int, 7),
    "patience": (int, None),
}


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; explicit flags override its values")
    for name, (typ, default) in {**MODEL_OPTIONS, **TRAIN_OPTIONS}.items():
        if name == "bidirectional":
            continue
        p.add_argument(
            "--" + name.replace("_", "-"),
            dest=name,
            type=typ,
            default=None,
            help=f"default {default}",
        )
    p.add_argument(
        "--unidirectional",
        dest="bidirectional",
        action="store_const",
        const=False,
        default=None,
        help="keep only forward item transitions",
    )


def _resolve(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    options = {**MODEL_OPTIONS, **TRAIN_OPTIONS}
    values = {k: d for k, (_, d) in options.items()}
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key == "ablations":
                values["ablations"] = [a for a in raw.split(",") if a.strip()]
                continue
            if key not in options:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            typ = options[key][0]
            try:
                values[key] = typ(raw)
            except ValueError:
                raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from None
    for key in options:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "ablation", None):
        values["ablations"] = list(args.ablation)
    values.setdefault("ablations", [])
    return values


def _configs(values: dict, n_items: int):
    model = ModelConfig(
        n_items=n_items,
        dim=values["dim"],
        n_interests=values["interests"],
        n_layers=values["layers"],
        max_step=values["max_step"],
        bucket_width=values["bucket_width"],
        bidirectional=values["bidirectional"],
        ablations=Ablations.from_names(values["ablations"]),
    )
    lam = 0.0 if "-Loss" in values["ablations"] else values["lam"]
    train = TrainConfig(
        learning_rate=values["lr"],
        lr_decay=values["lr_decay"],
        decay_step=values["decay_step"],
        batch_size=values["batch_size"],
        epochs=values["epochs"],
        lam=lam,
        seed=values["seed"],
        patience=values["patience"],
    )
    return model, train


# -------------------------------------------------------------- subcommands


def cmd_preprocess(args) -> int:
    sessions = data.parse_sessions(args.input, args.format)
    split = data.preprocess(sessions, args.min_len, args.min_freq, args.test_frac, args.gap_split)
    data.write_dataset(split, args.output)
    print(
        f"items {split.item_count} train {len(split.train)} test {len(split.test)} -> {args.output}"
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        n_pools=args.pools,
        pool_size=args.pool_size,
        sessions=args.sessions,
        items_per_interest=(args.items_min, args.items_max),
        chunked=not args.interleaved,
        target_rule=args.target_rule,
        skew=args.skew,
        seed=args.seed,
    )
    corpus = synth.generate(cfg)
    split = synth.to_split(corpus, args.test_frac)
    data.write_dataset(split, args.output)
    labels = args.labels or str(Path(args.output).with_suffix(".labels"))
    synth.write_labels(corpus, labels)
    print(f"items {split.item_count} train {len(split.train)} test {len(split.test)} -> {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    split = data.read_dataset(args.dataset)
    values = _resolve(args)
    model_cfg, train_cfg = _configs(values, split.item_count)
    validation = split.test if (args.validate and split.test) else None
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def on_epoch(rec):
        line = json.dumps(rec, sort_keys=True)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        if not args.quiet:
            print(line)

    try:
        result = train_epochs(split.train, model_cfg, train_cfg, validation=validation, on_epoch=on_epoch)
    except NumericError as exc:
        params = getattr(exc, "params", None)
        if params is not None:
            save_checkpoint(args.checkpoint, params, {"diverged": True})
        raise
    finally:
        if log_fh:
            log_fh.close()
    final = {k: v for k, v in result.history[-1].items() if k.startswith(("H@", "N@"))}
    extra = {"vocabulary": split.vocabulary, "final_metrics": final, "seed": train_cfg.seed}
    save_checkpoint(args.checkpoint, result.params, extra)
    return EXIT_OK


def _parse_ks(text: str):
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise UsageError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--ks values must be >= 1")
    return ks


def cmd_eval(args) -> int:
    split = data.read_dataset(args.dataset)
    part = split.test if args.part == "test" else split.train
    if not part:
        raise data.ParseError(f"dataset has no {args.part} examples")
    ks = _parse_ks(args.ks)
    if args.popularity:
        split_view = data.DatasetSplit(split.train, part, split.item_count, split.vocabulary)
        rows = {"popularity": experiments.popularity_metrics(split_view, ks)}
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --popularity")
        params, _ = load_checkpoint(args.checkpoint)
        if params.config.n_items != split.item_count:
            raise VocabularyError(
                f"checkpoint has {params.config.n_items} items, dataset has {split.item_count}"
            )
        rows = {"model": evaluate(params, part, ks)}
    text = format_report(rows, ks)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_session(args):
    if args.session_file:
        sessions = data.parse_sessions(args.session_file)
        if len(sessions) != 1:
            raise data.ParseError(f"{args.session_file} holds {len(sessions)} sessions, expected 1")
        s = sessions[0]
        return [str(i) for i in s.items], list(s.timestamps)
    if not args.items:
        raise UsageError("predict needs --items or --session-file")
    items = args.items.replace(",", " ").split()
    if args.timestamps:
        try:
            stamps = [float(t) for t in args.timestamps.replace(",", " ").split()]
        except ValueError:
            raise data.ParseError("timestamps must be numeric") from None
    else:
        stamps = [0.0] * len(items)
    if len(stamps) != len(items):
        raise data.ParseError(f"{len(items)} items but {len(stamps)} timestamps")
    return items, stamps


def cmd_predict(args) -> int:
    params, extra = load_checkpoint(args.checkpoint)
    cfg = params.config
    vocab = extra.get("vocabulary") or {}
    inverse = {v: k for k, v in vocab.items()}
    raw_items, stamps = _read_session(args)
    dense = []
    for tok in raw_items:
        if vocab and not args.dense:
            if tok not in vocab:
                raise VocabularyError(f"item {tok!r} is not in the checkpoint vocabulary")
            dense.append(vocab[tok])
        else:
            try:
                idx = int(tok)
            except ValueError:
                raise data.ParseError(f"item {tok!r} is not an integer index") from None
            if not 0 <= idx < cfg.n_items:
                raise VocabularyError(f"item {idx} outside [0, {cfg.n_items})")
            dense.append(idx)
    session = data.SessionRecord("query", dense, stamps)
    graphs = session_graphs([session], cfg)
    if args.dump_graph:
        Path(args.dump_graph).write_text(dump_graph(graphs[0]), encoding="utf-8")
    result = forward(GraphBatch.collate(graphs), params)
    scores = result.scores.data[0]
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite scores")

    def name(i):
        return inverse.get(int(i), str(int(i))) if not args.dense else str(int(i))

    for i in rank_items(scores[None, :])[0, : args.topk]:
        print(f"{name(i)}\t{scores[i]:.6f}")
    g = graphs[0]
    H = g.interest_count
    if result.alphas:
        alpha = result.alphas[-1].reshape(g.num_items, H).T
    else:
        alpha = np.full((H, g.num_items), 1.0 / g.num_items)
    print("alpha\t" + "\t".join(name(i) for i in g.item_nodes))
    for h in range(H):
        print(f"u{h}\t" + "\t".join(f"{a:.6f}" for a in alpha[h]))
    return EXIT_OK


def cmd_ablate(args) -> int:
    split = data.read_dataset(args.dataset)
    if not split.test:
        raise data.ParseError("dataset has no test examples")
    values = _resolve(args)
    values["ablations"] = []
    model_cfg, train_cfg = _configs(values, split.item_count)
    rows = args.rows.split(",") if args.rows else list(experiments.ABLATION_ROWS)
    for r in rows:
        if r != "full" and r not in ABLATION_LABELS:
            raise UsageError(f"unknown ablation row {r!r}")

    def progress(row, m):
        if not args.quiet:
            print(f"# {row} done", file=sys.stderr)

    results = experiments.run_ablations(split, model_cfg, train_cfg, rows, progress=progress)
    text = format_report(results)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# -------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tmignn", description="Time-aware multi-interest session recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw click log -> dataset file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=("auto", "tsv", "csv"), default="auto")
    p.add_argument("--min-len", type=int, default=3, help="drop sessions shorter than this")
    p.add_argument("--min-freq", type=int, default=5, help="drop items seen fewer times")
    p.add_argument("--gap-split", type=float, default=None, metavar="SECONDS", help="split sessions at idle gaps")
    p.add_argument("--test-frac", type=float, default=0.1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a planted-interest corpus")
    p.add_argument("output")
    p.add_argument("--labels", help="interest label sidecar (default: OUTPUT with .labels suffix)")
    p.add_argument("--sessions", type=int, default=2000)
    p.add_argument("--pools", type=int, default=5)
    p.add_argument("--pool-size", type=int, default=20)
    p.add_argument("--items-min", type=int, default=3)
    p.add_argument("--items-max", type=int, default=3)
    p.add_argument("--interleaved", action="store_true", help="alternate pools instead of two chunks")
    p.add_argument("--target-rule", choices=synth.TARGET_RULES, default="latest-interest")
    p.add_argument("--skew", type=float, default=2.0)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="dataset -> checkpoint and JSONL log")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", help="line-delimited JSON training log")
    p.add_argument("--validate", action="store_true", help="score the test part after every epoch")
    p.add_argument("--ablation", action="append", choices=sorted(ABLATION_LABELS))
    p.add_argument("-q", "--quiet", action="store_true")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a checkpoint or the popularity baseline")
    p.add_argument("dataset")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--checkpoint")
    g.add_argument("--popularity", action="store_true")
    p.add_argument("--part", choices=("test", "train"), default="test")
    p.add_argument("--ks", default="10,20")
    p.add_argument("--output", help="also write the report here")
    p.add_argument("--json", action="store_true", help="print raw fractions as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top-k items and interest weights for one session")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--items", help="space or comma separated item ids")
    p.add_argument("--timestamps", help="matching timestamps in seconds")
    p.add_argument("--session-file", help="click log holding a single session")
    p.add_argument("--dense", action="store_true", help="item ids are already dense indices")
    p.add_argument("--topk", type=int, default=20)
    p.add_argument("--dump-graph", metavar="PATH", help="write the session graph as edge lists")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train every ablation row and print a comparison table")
    p.add_argument("dataset")
    p.add_argument("--rows", help="comma separated subset of " + ",".join(experiments.ABLATION_ROWS))
    p.add_argument("--output")
    p.add_argument("-q", "--quiet", action="store_true")
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "topk", 1) is not None and getattr(args, "topk", 1) < 1:
        print("tmignn: error: --topk must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tmignn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"tmignn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"tmignn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (data.ParseError, VocabularyError, CheckpointError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"tmignn: data error: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
