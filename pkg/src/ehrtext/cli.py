"""Command-line entry point: ``ehrtext <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
Every run writes ``config.resolved.json`` and ``manifest.json`` into its
output directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Any

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    PairedDataset,
    SplitPlan,
    SynthConfig,
    generate_synthetic,
    ingest,
    make_split_plan,
    reduce_fraction,
    write_dataset,
)
from .evaluation import Report, SeedResults, auroc
from .exceptions import EhrTextError
from .pipeline import (
    STAGE_DEFAULTS,
    RunConfig,
    derive_seed,
    predict,
    run_comparison,
    run_contrastive_pretrain,
    run_finetune,
    run_masked_pretrain,
)

logger = logging.getLogger("ehrtext")

SPLIT_FILE = "split.json"
CHECKPOINT_NAMES = {
    "pretrain-masked": "masked.ckpt",
    "pretrain-cl": "cl.ckpt",
    "finetune": "finetune.ckpt",
}
# flags that map one-to-one onto RunConfig fields
RUN_FLAGS = ("seed", "epochs", "lr", "weight_decay", "batch_size", "data_parallel", "tau",
             "mask_rate", "text_frozen", "holdout")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_help()}")


def _add_common(p: argparse.ArgumentParser, *, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file of config fields (flags take precedence)")
    p.add_argument("--seed", type=int, help="master seed for every random stream")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset directory (tabular.csv + notes.jsonl)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic kernels (default on)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ehrtext", description="Record-note contrastive pretraining toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a seeded synthetic paired dataset and split plan")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=5000)
    p.add_argument("--subsets", type=int, default=5)
    p.add_argument("--trainval-size", dest="trainval_size", type=int, default=600)
    p.add_argument("--test-size", dest="test_size", type=int, default=250)

    p = sub.add_parser("pretrain-masked", help="masked-feature pretraining on the pretraining pool")
    _add_common(p)
    _add_training(p)
    p.add_argument("--mask-rate", dest="mask_rate", type=float)

    p = sub.add_parser("pretrain-cl", help="record-note contrastive pretraining")
    _add_common(p)
    _add_training(p)
    p.add_argument("--init", type=Path, required=True, help="masked checkpoint")
    p.add_argument("--tau", type=float)
    p.add_argument("--text-frozen", dest="text_frozen", type=int)
    p.add_argument("--holdout", type=int)

    p = sub.add_parser("finetune", help="supervised fine-tuning on one subset")
    _add_common(p)
    _add_training(p)
    p.add_argument("--init", type=Path, required=True, help="pretraining checkpoint")
    p.add_argument("--task", required=True)
    p.add_argument("--fraction", type=float, choices=(1.0, 0.5), default=1.0)
    p.add_argument("--subset", type=int, default=0)
    p.add_argument("--data-parallel", dest="data_parallel", type=int)

    p = sub.add_parser("predict", help="probabilities from a fine-tuned checkpoint")
    _add_common(p)
    p.add_argument("--init", type=Path, required=True, help="fine-tuned checkpoint")
    p.add_argument("--data", type=Path, required=True, help="dataset directory or record CSV")

    p = sub.add_parser("evaluate", help="five-subset comparison of pretrained initializations")
    _add_common(p)
    _add_training(p)
    p.add_argument("--init", action="append", required=True, metavar="NAME=PATH",
                   help="variant checkpoint, repeatable (e.g. cl-init=runs/cl.ckpt)")
    p.add_argument("--task", required=True)
    p.add_argument("--fraction", type=float, choices=(1.0, 0.5), action="append",
                   help="training fraction, repeatable (default: 1.0 and 0.5)")
    p.add_argument("--data-parallel", dest="data_parallel", type=int)

    p = sub.add_parser("report", help="CSV, text table and t-tests from evaluate results")
    _add_common(p, out_required=False)
    p.add_argument("--task", required=True)
    p.add_argument("--dir", type=Path, required=True, help="directory holding results_<task>.json")
    p.add_argument("--reference", default="cl-init")
    return parser


# helpers ----------------------------------------------------------------------

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _flag_values(args: argparse.Namespace) -> dict[str, Any]:
    skip = {"command", "config", "force", "_argv"}
    out = {}
    for k, v in vars(args).items():
        if k in skip or v is None:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise EhrTextError(f"{path}: config must be a JSON object")
    return cfg


def resolve_run_config(stage: str, args: argparse.Namespace) -> RunConfig:
    """Built-in defaults < config file < flags."""
    values = dict(STAGE_DEFAULTS[stage])
    values.update(_load_config_file(args.config))
    for name in RUN_FLAGS + ("deterministic",):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values["stage"] = stage
    return RunConfig.from_dict(values)


def _prepare_out(out: Path, targets: list[str], force: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    existing = [t for t in targets if (out / t).exists()]
    if existing and not force:
        raise EhrTextError(f"refusing to overwrite {', '.join(existing)} in {out}; pass --force")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_run_files(out: Path, args, resolved: dict, inputs: list[Path], outputs: list[str],
                     prefix: str = "") -> None:
    _write_json(out / f"{prefix}config.resolved.json",
                {"command": args.command, "flags": _flag_values(args), "config": resolved})
    _write_json(out / f"{prefix}manifest.json", {
        "command": args.command,
        "argv": sys.argv[1:] if args._argv is None else args._argv,
        "seed": resolved.get("seed"),
        "inputs": {str(p): sha256_file(p) for p in inputs if p.is_file()},
        "outputs": {name: sha256_file(out / name) for name in outputs if (out / name).is_file()},
        "versions": {"ehrtext": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": np.__version__},
    })


def _dataset_files(data: Path) -> tuple[Path, Path]:
    return data / "tabular.csv", data / "notes.jsonl"


def _load_dataset(data: Path) -> tuple[PairedDataset, SplitPlan | None]:
    csv_path, notes_path = _dataset_files(data)
    ds = ingest(csv_path, notes_path)
    split = data / SPLIT_FILE
    return ds, SplitPlan.load(split) if split.exists() else None


def _require_plan(plan: SplitPlan | None, data: Path) -> SplitPlan:
    if plan is None:
        raise EhrTextError(f"{data} has no {SPLIT_FILE}; create one with gen-data")
    return plan


def _pool(ds: PairedDataset, plan: SplitPlan | None) -> PairedDataset:
    return ds if plan is None else ds.subset(plan.pretrain_pool)


def _epoch_logger(out: Path):
    fh = open(out / "train_log.jsonl", "w", encoding="utf-8")

    def log(record):
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    return fh, log


# subcommands ----------------------------------------------------------------------

def cmd_gen_data(args) -> list[Path]:
    seed = 0 if args.seed is None else args.seed
    files = ["tabular.csv", "notes.jsonl", SPLIT_FILE]
    _prepare_out(args.out, files, args.force)
    cfg = dict(_load_config_file(args.config))
    cfg.update(n_pairs=args.pairs, seed=seed)
    if "cardinalities" in cfg:
        cfg["cardinalities"] = tuple(cfg["cardinalities"])
    if "tasks" in cfg:
        cfg["tasks"] = tuple(cfg["tasks"])
    synth = SynthConfig(**cfg)
    ds = generate_synthetic(synth)
    write_dataset(ds, args.out)
    plan = make_split_plan(len(ds), args.subsets, args.trainval_size, args.test_size,
                           seed=derive_seed(seed, "split") % (2**32))
    plan.save(args.out / SPLIT_FILE)
    resolved = {**{k: v for k, v in vars(synth).items()}, "subsets": args.subsets,
                "trainval_size": args.trainval_size, "test_size": args.test_size}
    resolved["cardinalities"] = list(synth.cardinalities)
    resolved["tasks"] = list(synth.tasks)
    _write_run_files(args.out, args, resolved, [], files)
    print(f"wrote {len(ds)} pairs to {args.out}")
    return []


def cmd_pretrain_masked(args) -> list[Path]:
    cfg = resolve_run_config("pretrain-masked", args)
    name = CHECKPOINT_NAMES["pretrain-masked"]
    _prepare_out(args.out, [name], args.force)
    ds, plan = _load_dataset(args.data)
    fh, log = _epoch_logger(args.out)
    with fh:
        ckpt = run_masked_pretrain(cfg, _pool(ds, plan).rows, log=log)
    digest = save_checkpoint(ckpt, args.out / name)
    _write_run_files(args.out, args, ckpt.config, list(_dataset_files(args.data)), [name])
    print(f"{name} {digest}")
    return list(_dataset_files(args.data))


def cmd_pretrain_cl(args) -> list[Path]:
    cfg = resolve_run_config("pretrain-cl", args)
    name = CHECKPOINT_NAMES["pretrain-cl"]
    _prepare_out(args.out, [name], args.force)
    ds, plan = _load_dataset(args.data)
    init = load_checkpoint(args.init)
    fh, log = _epoch_logger(args.out)
    with fh:
        ckpt = run_contrastive_pretrain(cfg, _pool(ds, plan), init, log=log)
    digest = save_checkpoint(ckpt, args.out / name)
    _write_run_files(args.out, args, ckpt.config, [*_dataset_files(args.data), args.init], [name])
    print(f"{name} {digest}")
    return []


def cmd_finetune(args) -> list[Path]:
    cfg = resolve_run_config("finetune", args)
    name = CHECKPOINT_NAMES["finetune"]
    _prepare_out(args.out, [name, "metrics.json"], args.force)
    ds, plan = _load_dataset(args.data)
    plan = _require_plan(plan, args.data)
    if not 0 <= args.subset < len(plan.subsets):
        raise EhrTextError(f"--subset must lie in [0, {len(plan.subsets) - 1}]")
    if args.task not in ds.labels:
        raise EhrTextError(f"dataset has no labels for task {args.task!r}; have {ds.tasks}")
    subset = plan.subsets[args.subset]
    seed = derive_seed(cfg.seed, "subset", args.subset)
    train = reduce_fraction(subset["train"], args.fraction, derive_seed(seed, "fraction", args.fraction, "train"))
    val = reduce_fraction(subset["val"], args.fraction, derive_seed(seed, "fraction", args.fraction, "val"))
    y = ds.labels[args.task]
    init = load_checkpoint(args.init)
    fh, log = _epoch_logger(args.out)
    with fh:
        ckpt = run_finetune(cfg, [ds.rows[i] for i in train], [y[i] for i in train], init, args.task,
                            [ds.rows[i] for i in val], [y[i] for i in val], log=log)
    digest = save_checkpoint(ckpt, args.out / name)
    test = subset["test"]
    test_auc = auroc(predict(ckpt, [ds.rows[i] for i in test]), [y[i] for i in test])
    _write_json(args.out / "metrics.json", {
        "task": args.task, "subset": args.subset, "fraction": args.fraction,
        "best_epoch": ckpt.meta["best_epoch"], "best_val_auc": ckpt.meta["best_val_auc"],
        "test_auc": test_auc, "n_train": len(train), "n_val": len(val), "n_test": len(test)})
    _write_run_files(args.out, args, ckpt.config, [*_dataset_files(args.data), args.init],
                     [name, "metrics.json"])
    print(f"{name} {digest} test_auc={test_auc:.4f}")
    return []


def cmd_predict(args) -> list[Path]:
    name = "predictions.csv"
    _prepare_out(args.out, [name], args.force)
    ckpt = load_checkpoint(args.init)
    if args.data.is_dir():
        ds, _ = _load_dataset(args.data)
        ids, rows, inputs = ds.ids, ds.rows, list(_dataset_files(args.data))
    else:
        import csv

        from .data import _parse_cell

        with open(args.data, newline="", encoding="utf-8") as fh:
            records = list(csv.DictReader(fh))
        key = "id" if records and "id" in records[0] else None
        ids = [r[key] for r in records] if key else [str(i) for i in range(len(records))]
        rows = [{k: _parse_cell(v) for k, v in r.items() if k != key} for r in records]
        inputs = [args.data]
    probs = predict(ckpt, rows)
    with open(args.out / name, "w", encoding="utf-8") as fh:
        fh.write("id,probability\n")
        for pid, p in zip(ids, probs):
            fh.write(f"{pid},{p:.8f}\n")
    _write_run_files(args.out, args, {"init": str(args.init)}, [*inputs, args.init], [name])
    print(f"wrote {len(ids)} predictions to {args.out / name}")
    return []


def _parse_variants(specs: list[str]) -> dict[str, Path]:
    variants = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--init expects NAME=PATH, got {spec!r}")
        if name in variants:
            raise UsageError(f"variant {name!r} given twice")
        variants[name] = Path(path)
    return variants


def cmd_evaluate(args) -> list[Path]:
    variants = _parse_variants(args.init)
    cfg = resolve_run_config("finetune", args)
    name = f"results_{args.task}.json"
    _prepare_out(args.out, [name], args.force)
    ds, plan = _load_dataset(args.data)
    plan = _require_plan(plan, args.data)
    ckpts = {k: load_checkpoint(p) for k, p in variants.items()}
    fractions = tuple(args.fraction) if args.fraction else (1.0, 0.5)
    reference = "cl-init" if "cl-init" in ckpts else sorted(ckpts)[0]
    report, results = run_comparison(args.task, ckpts, ds, plan, cfg, fractions, reference)
    _write_json(args.out / name, [r.to_dict() for r in results])
    _write_run_files(args.out, args, {**cfg.to_dict(), "fractions": list(fractions)},
                     [*_dataset_files(args.data), *variants.values()], [name])
    print(report.to_text(), end="")
    return []


def cmd_report(args) -> list[Path]:
    out = args.out or args.dir
    src = args.dir / f"results_{args.task}.json"
    names = [f"report_{args.task}.csv", f"report_{args.task}.txt", f"ttests_{args.task}.json"]
    _prepare_out(out, names, args.force)
    with open(src, encoding="utf-8") as fh:
        results = [SeedResults.from_dict(d) for d in json.load(fh)]
    report = Report.from_results(results, args.reference)
    (out / names[0]).write_text(report.to_csv(), encoding="utf-8")
    (out / names[1]).write_text(report.to_text(), encoding="utf-8")
    (out / names[2]).write_text(report.ttests_json() + "\n", encoding="utf-8")
    _write_run_files(out, args, {"task": args.task, "reference": args.reference}, [src], names,
                     prefix="report_")
    print(report.to_text(), end="")
    return []


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-masked": cmd_pretrain_masked,
    "pretrain-cl": cmd_pretrain_cl,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _configure_logging() -> None:
    level = os.environ.get("EHRTEXT_LOG", "").lower()
    levels = {"info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args._argv = argv
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (EhrTextError, OSError, ValueError, KeyError) as exc:
        print(f"ehrtext: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
