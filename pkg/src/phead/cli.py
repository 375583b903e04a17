"""Command-line entry point: ``phead <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object keyed by option
names, e.g. ``{"hidden_dim": 512}``); explicit flags override it.  The
registry root defaults to ``$PH_REGISTRY_ROOT``, then ``./registry``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .base_lm import PretrainConfig, freeze, pretrain_mlm
from .cost import (BERT_BASE_BYTES, BERT_BASE_PARAMS, BYTES_PER_PARAM, PEInput, build_report,
                   count_ph_params)
from .data import convert_clinc, convert_snips, dump_jsonl, load_jsonl, make_binary_pairs, \
    subsample_per_class
from .errors import PHError
from .head import HEAD_FILE_OVERHEAD, PHConfig, init_head
from .registry import Registry
from .toy import make_toy_dataset, toy_corpus
from .trainer import EncodingCache, GridCell, TrainConfig, differential_matrix, evaluate, \
    run_data_epoch_grid, train_head

log = logging.getLogger("phead")

SWEEP_COLUMNS = ["hidden_dim", "heads", "per_class", "epoch", "seed", "acc", "macro_f1", "micro_f1",
                 "params", "head_bytes", "wall_time", "error"]


def _ints(s: str) -> list[int]:
    return [int(x) for x in str(s).split(",") if x.strip()]


def _root(args) -> Path:
    return Path(args.root or os.environ.get("PH_REGISTRY_ROOT") or "registry")


def _resolved(args) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    d["root"] = str(_root(args))
    return d


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, lr=args.lr, epochs=args.epochs,
                       anneal_factor=args.anneal_factor, anneal_patience=args.anneal_patience,
                       min_lr=args.min_lr, seed=getattr(args, "seed", 0), negatives_per_example=args.negatives)


# ----------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    path = Path(args.corpus)
    if not path.exists():
        raise PHError(f"corpus file not found: {path}")
    if path.suffix == ".jsonl":
        ds = load_jsonl(path)
        corpus = [ex.text for ex in ds.train + ds.test]
    else:
        corpus = [l.strip() for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    cfg = PretrainConfig(d_model=args.d_model, n_layers=args.layers, n_heads=args.heads,
                         d_ff_base=args.d_ff, max_seq_len=args.max_seq_len, dropout_p=args.dropout,
                         mask_prob=args.mask_prob, lr=args.lr, epochs=args.epochs,
                         batch_size=args.batch_size, seed=args.seed)
    result = pretrain_mlm(corpus, cfg)
    for i, loss in enumerate(result.loss_history, 1):
        print(f"epoch {i:3d}  mlm loss {loss:.4f}", file=sys.stderr)
    base = freeze(result.model)
    reg = Registry.create(_root(args), base, overwrite=args.force)
    report = {"tool_version": __version__, "config": _resolved(args), "loss_history": result.loss_history,
              "vocab_size": len(base.vocab), "base_params": base.param_count(),
              "base_checksum": f"{base.weights_checksum:016x}", "base_path": str(reg.base_path)}
    _emit(report, args.out)
    return 0


def cmd_train(args) -> int:
    reg = Registry.open(_root(args))
    ds = load_jsonl(args.dataset)
    if args.per_class:
        ds = subsample_per_class(ds, "train", args.per_class, args.seed)
    cfg = _train_config(args)
    pairs = make_binary_pairs(ds, cfg.negatives_per_example, cfg.seed)
    head = init_head(PHConfig(reg.base.d_model, args.hidden_dim, args.heads, args.dropout, args.seed))
    head, report = train_head(reg.base, head, pairs, cfg)
    version = reg.put_head(args.user, head)
    out = {"tool_version": __version__, "config": _resolved(args), "user": args.user, "version": version,
           "n_pairs": len(pairs), "report": report.to_dict()}
    _emit(out, args.out)
    return 0 if report.base_unchanged else 1


def cmd_eval(args) -> int:
    reg = Registry.open(_root(args))
    ds = load_jsonl(args.dataset)
    head = reg.get_head(args.user, args.version)
    m = evaluate(reg.base, head, ds.test, ds.classes)
    _emit({"tool_version": __version__, "config": _resolved(args), "metrics": m.to_dict()}, args.out)
    return 0


def cmd_predict(args) -> int:
    reg = Registry.open(_root(args))
    if args.classes:
        classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif args.dataset:
        classes = load_jsonl(args.dataset).classes
    else:
        raise PHError("predict needs --classes or --dataset")
    p = reg.serve_predict(args.user, args.text, classes, args.version)
    _emit({"tool_version": __version__, "config": _resolved(args), "class": p.class_name,
           "confidence": p.confidence, "ranking": p.ranking}, args.out)
    return 0


def _sweep_task(task: dict) -> list[dict]:
    cache = task.get("cache") or EncodingCache(Registry.open(task["root"]).base)
    ds = load_jsonl(task["dataset"])
    cfg = TrainConfig(**task["train"])
    pc = PHConfig(cache.base.d_model, task["hidden_dim"], task["heads"], task["dropout"], task["seed"])
    try:
        cells = run_data_epoch_grid(cache.base, cfg, ds, task["counts"], task["epochs"], [pc], task["seed"],
                                    cache)
    except Exception as e:  # config-level failure (e.g. heads not dividing d_model)
        return [{"hidden_dim": pc.d_ff, "heads": pc.n_heads, "per_class": c, "epoch": ep, "seed": pc.seed,
                 "params": 0, "head_bytes": 0, "error": repr(e)}
                for c in task["counts"] for ep in task["epochs"]]
    rows = []
    for c in cells:
        row = asdict(c)
        row["acc"] = row.pop("accuracy")
        row["head_bytes"] = 4 * c.params + HEAD_FILE_OVERHEAD if c.params else 0
        rows.append(row)
    return rows


def _write_csv(rows: list[dict], path: str | None, header: dict) -> None:
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SWEEP_COLUMNS})
    if path:
        Path(path).write_text(buf.getvalue(), encoding="utf-8")
    else:
        sys.stdout.write(buf.getvalue())


def _run_tasks(tasks: list[dict], jobs: int) -> list[dict]:
    rows: list[dict] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for part in ex.map(_sweep_task, tasks):
                rows.extend(part)
    else:
        if tasks:
            # one shared encoding cache across in-process cells
            cache = EncodingCache(Registry.open(tasks[0]["root"]).base)
            for t in tasks:
                rows.extend(_sweep_task({**t, "cache": cache}))
    return rows


def cmd_sweep(args) -> int:
    base_task = {"root": str(_root(args)), "dataset": args.dataset, "counts": _ints(args.counts),
                 "epochs": _ints(args.epoch_checkpoints), "dropout": args.dropout,
                 "train": asdict(_train_config(args))}
    tasks = [{**base_task, "hidden_dim": d, "heads": h, "seed": s}
             for d in _ints(args.hidden_dims) for h in _ints(args.heads_list) for s in _ints(args.seeds)]
    rows = _run_tasks(tasks, args.jobs)
    _write_csv(rows, args.out, {"tool_version": __version__, "config": _resolved(args)})
    return 1 if any(r.get("error") for r in rows) else 0


def cmd_grid(args) -> int:
    base_task = {"root": str(_root(args)), "dataset": args.dataset, "counts": _ints(args.counts),
                 "epochs": _ints(args.epoch_checkpoints), "dropout": args.dropout,
                 "train": asdict(_train_config(args)), "seed": args.seed}
    tasks = [{**base_task, "hidden_dim": d, "heads": h}
             for d in _ints(args.hidden_dims) for h in _ints(args.heads_list)]
    rows = _run_tasks(tasks, args.jobs)
    header = {"tool_version": __version__, "config": _resolved(args)}
    _write_csv(rows, args.out, header)
    cells = [GridCell(**{k: r.get(k) for k in ("hidden_dim", "heads", "per_class", "epoch", "seed", "params")},
                      macro_f1=r.get("macro_f1")) for r in rows]
    matrix = differential_matrix(cells)
    if args.matrix_out:
        _emit({**header, "differential": matrix}, args.matrix_out)
    else:
        print(json.dumps(matrix, indent=2), file=sys.stderr)
    return 1 if any(r.get("error") for r in rows) else 0


def cmd_cost_report(args) -> int:
    if args.base_params is None:
        reg = Registry.open(_root(args))
        stats = reg.stats()
        base_params = reg.base.param_count()
        heads = [reg.get_head(u) for u in reg.users()]
        head_params = heads[0].param_count() if heads else 0
        n_users = stats["n_users"]
        d_model = reg.base.d_model
        hidden_dims = sorted({h.config.d_ff for h in heads}, reverse=True) or [args.hidden_dim]
        extra = {"registry_stats": stats}
    else:
        base_params, n_users, d_model = args.base_params, args.n_users, args.d_model
        head_params = args.head_params or count_ph_params(d_model, args.hidden_dim, include_output=True)
        hidden_dims = _ints(args.hidden_dims)
        extra = {}
    pe_entries = None
    if args.ph_f1 is not None:
        ref = PEInput(args.ref_f1, args.ref_params or BERT_BASE_PARAMS, args.ref_bytes or BERT_BASE_BYTES)
        ph = PEInput(args.ph_f1, args.ph_params or head_params,
                     args.ph_bytes or head_params * BYTES_PER_PARAM)
        pe_entries = [("fine-tuned baseline", ref), ("personalization head", ph)]
    report = build_report(base_params, head_params, n_users, d_model, hidden_dims, pe_entries)
    if args.format == "json":
        _emit({"tool_version": __version__, "config": _resolved(args), **report.to_dict(), **extra}, args.out)
    else:
        header = f"<!-- {json.dumps({'tool_version': __version__, 'config': _resolved(args)}, sort_keys=True)} -->\n"
        text = header + report.to_markdown()
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
    return 0


def cmd_convert_snips(args) -> int:
    ds = convert_snips(args.src)
    dump_jsonl(ds, args.dst)
    print(f"{len(ds.classes)} classes, {len(ds.train)} train, {len(ds.test)} test", file=sys.stderr)
    return 0


def cmd_convert_clinc(args) -> int:
    ds = convert_clinc(args.src, args.test_per_class or None, args.seed, args.include_val)
    dump_jsonl(ds, args.dst)
    print(f"{len(ds.classes)} classes, {len(ds.train)} train, {len(ds.test)} test", file=sys.stderr)
    return 0


def cmd_make_toy(args) -> int:
    ds = make_toy_dataset(args.train_per_class, args.test_per_class, args.seed)
    dump_jsonl(ds, args.dst)
    if args.corpus_out:
        Path(args.corpus_out).write_text("\n".join(toy_corpus(args.corpus_size, args.seed + 99)) + "\n",
                                         encoding="utf-8")
    return 0


# ----------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser, epochs: int = 50) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--negatives", type=int, default=0, help="False pairs per example (0 = True-only)")
    p.add_argument("--anneal-factor", type=float, default=0.5)
    p.add_argument("--anneal-patience", type=int, default=3)
    p.add_argument("--min-lr", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phead", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file of option defaults")
        p.add_argument("--root", help="registry root (default $PH_REGISTRY_ROOT or ./registry)")
        p.add_argument("--out", help="write the primary output here instead of stdout")
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "MLM-pretrain a base model and store it frozen")
    p.add_argument("--corpus", required=True, help="text file (one sentence per line) or dataset .jsonl")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--max-seq-len", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--mask-prob", type=float, default=0.15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="replace an existing base (no heads stored)")

    p = add("train", cmd_train, "train a user's head on a dataset's train split")
    p.add_argument("--user", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--hidden-dim", type=int, default=512)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-class", type=int, default=0, help="subsample this many train examples per class")
    _train_flags(p)

    p = add("eval", cmd_eval, "evaluate a user's head on a dataset's test split")
    p.add_argument("--user", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--version", type=int)

    p = add("predict", cmd_predict, "classify one text with a user's head")
    p.add_argument("--user", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--classes", help="comma-separated class names")
    p.add_argument("--dataset", help="take the class list from this dataset")
    p.add_argument("--version", type=int)

    for name, func, help in (("sweep", cmd_sweep, "hidden-dim x heads x data x epochs x seeds sweep to CSV"),
                             ("grid", cmd_grid, "data-vs-epoch grid with a differential matrix")):
        p = add(name, func, help)
        p.add_argument("--dataset", required=True)
        p.add_argument("--hidden-dims", default="128,256,512,1024,2048")
        p.add_argument("--heads", dest="heads_list", default="2,4,8")
        p.add_argument("--counts", default="100,200", help="per-class train counts (ascending)")
        p.add_argument("--epoch-checkpoints", default="50,100")
        p.add_argument("--jobs", type=int, default=1)
        _train_flags(p)
        if name == "sweep":
            p.add_argument("--seeds", default="0")
        else:
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--matrix-out", help="write the differential matrix JSON here")

    p = add("cost-report", cmd_cost_report, "parameter/storage/efficiency report")
    p.add_argument("--base-params", type=int, help="symbolic mode: base parameter count")
    p.add_argument("--head-params", type=int, help="symbolic mode: per-user head parameters")
    p.add_argument("--n-users", type=int, default=1)
    p.add_argument("--d-model", type=int, default=768)
    p.add_argument("--hidden-dim", type=int, default=2048)
    p.add_argument("--hidden-dims", default="2048,1024,512,256,128")
    p.add_argument("--ph-f1", type=float, help="head F-score (percent) for the efficiency section")
    p.add_argument("--ph-params", type=float)
    p.add_argument("--ph-bytes", type=float)
    p.add_argument("--ref-f1", type=float, default=98.61)
    p.add_argument("--ref-params", type=float)
    p.add_argument("--ref-bytes", type=float)
    p.add_argument("--format", choices=("md", "json"), default="md")

    p = add("convert-snips", cmd_convert_snips, "convert SNIPS data to the JSONL format")
    p.add_argument("src")
    p.add_argument("dst")

    p = add("convert-clinc", cmd_convert_clinc, "convert Clinc150 data_full.json to JSONL")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--test-per-class", type=int, default=10, help="0 keeps the full test split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--include-val", action="store_true")

    p = add("make-toy", cmd_make_toy, "write the 7-intent toy dataset (and optional MLM corpus)")
    p.add_argument("dst")
    p.add_argument("--train-per-class", type=int, default=100)
    p.add_argument("--test-per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corpus-out")
    p.add_argument("--corpus-size", type=int, default=2000)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(overrides, dict):
            raise PHError("config file must hold a JSON object")
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        subparser = sub.choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(overrides) - known
        if unknown:
            raise PHError(f"unknown config keys: {sorted(unknown)}")
        subparser.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (PHError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
