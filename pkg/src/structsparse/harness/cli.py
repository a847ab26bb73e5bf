"""Command-line entry point: ``structsparse <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data or file-format error,
4 a run collapsed and ``--fail-on-collapse`` was given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ..data import DATA_ENV
from ..exceptions import ConfigError, FormatError
from ..metrics import count_flops, evaluate_top1, time_inference
from ..models import build_model
from .config import ExperimentConfig, dump_config, load_config
from .io import checkpoint_load, emit_csv, emit_json, emit_layer_flops
from .sweep import sweep, sweep_configs, table_plan
from .training import ResultRow, load_datasets, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_COLLAPSE = 0, 2, 3, 4


def _floats(text: str) -> List[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _strings(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.data_root:
        overrides.append(f"data_root={args.data_root}")
    for key in ("method", "k", "sparsity", "dataset", "epochs", "seed", "head", "body"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "k", None) is not None:
        overrides = [o for o in overrides if not o.startswith("sparsity=")]
    return load_config(args.config, overrides)


def _print_row(row: ResultRow) -> None:
    print(json.dumps(row.to_dict(), indent=2))


def _collapse_exit(rows, args) -> int:
    if getattr(args, "fail_on_collapse", False) and any(r.collapsed for r in rows):
        print("collapse detected", file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK


def _write_rows(rows, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    emit_csv(rows, out / "results.csv")
    emit_json(rows, out / "results.json")
    emit_layer_flops(rows, out / "layer_flops.csv")
    print(f"wrote {len(rows)} rows to {out}")


def cmd_train(args) -> int:
    cfg = dataclasses.replace(_config(args), method="none", sparsity=1.0)
    _print_row(run_experiment(cfg, checkpoint_path=args.checkpoint))
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    row = run_experiment(cfg, checkpoint_path=args.checkpoint)
    _print_row(row)
    if args.out:
        emit_json([row], args.out)
    return _collapse_exit([row], args)


def _model(args):
    if args.checkpoint:
        model, mask = checkpoint_load(args.checkpoint)
        return model, mask
    cfg = _config(args)
    return build_model(cfg.model_config()), None


def cmd_eval(args) -> int:
    model, _ = checkpoint_load(args.checkpoint)
    _, test = load_datasets(_config(args))
    report = evaluate_top1(model, test)
    print(json.dumps({"accuracy": report.accuracy, "samples": report.samples}))
    return EXIT_OK


def cmd_bench(args) -> int:
    model, _ = _model(args)
    _, test = load_datasets(_config(args))
    timing = time_inference(model, test, args.batch_size, args.reps, args.warmup)
    print(json.dumps(dataclasses.asdict(timing), indent=2))
    return EXIT_OK


def cmd_flops(args) -> int:
    model, mask = _model(args)
    report = count_flops(model, mask)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
        return EXIT_OK
    print(f"{'layer':<16}{'kind':<12}{'dense MACs':>14}{'effective':>16}{'ratio':>10}")
    for layer in report.layers:
        print(f"{layer.name:<16}{layer.kind:<12}{layer.dense_macs:>14d}{layer.effective_macs:>16.1f}"
              f"{layer.flops_sparsity:>10.4f}")
    print(f"{'total':<28}{report.dense_total:>14d}{report.effective_total:>16.1f}{report.flops_sparsity:>10.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _config(args)
    seeds = [int(s) for s in _strings(args.seeds)] if args.seeds else None
    configs = sweep_configs(base, _strings(args.methods), _floats(args.ks), _strings(args.heads), seeds)
    rows = sweep(configs, workers=args.workers)
    _write_rows(rows, args.out_dir)
    return _collapse_exit(rows, args)


def cmd_reproduce(args) -> int:
    plan = table_plan(args.table, args.epochs, args.pretrain_epochs, args.data_root)
    unit = "top-1 %" if args.table == 1 else "seconds"
    if args.dry_run:
        for cfg, ref in plan:
            ref_text = "-" if ref is None else f"{ref}"
            print(f"{cfg.dataset:<8} {cfg.architecture:<6} head={cfg.head:<9} body={cfg.body:<10} "
                  f"method={cfg.method:<9} k={cfg.k:<5.2f} reference ({unit}) = {ref_text}")
        print(f"{len(plan)} runs")
        return EXIT_OK
    rows = sweep([cfg for cfg, _ in plan], workers=args.workers)
    for row, (_, ref) in zip(rows, plan):
        got = 100 * row.accuracy if args.table == 1 else row.inference_seconds
        print(f"{row.dataset:<8} head={row.head:<9} body={row.body:<10} method={row.method:<9} "
              f"k={row.k:<5.2f} measured={got:.2f} reference={ref}")
    _write_rows(rows, args.out_dir)
    return _collapse_exit(rows, args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="structsparse", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, experiment=True):
        p.add_argument("--config", help="INI config file with [experiment], [schedule], [learned_mask]")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. --set schedule.alpha0=0.3")
        p.add_argument("--data-root", help=f"dataset directory (default: ${DATA_ENV})")
        p.add_argument("--dataset")
        if experiment:
            p.add_argument("--seed", type=int)
            p.add_argument("--epochs", type=int)
            p.add_argument("--head", choices=["dense", "butterfly"])
            p.add_argument("--body", choices=["dense", "factorized"])

    p = sub.add_parser("train", help="train without pruning")
    common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="(pre-train,) prune, train and evaluate one config")
    common(p)
    p.add_argument("--method")
    p.add_argument("--k", type=float, help="compression exponent, s = 10**-k")
    p.add_argument("--sparsity", type=float, help="remaining fraction s")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="write the result row as JSON")
    p.add_argument("--fail-on-collapse", action="store_true")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on the test split")
    common(p, experiment=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time inference over the test split")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="per-layer MAC counts")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", help="cross product of methods x k values x heads")
    common(p)
    p.add_argument("--methods", default="random,magnitude,snip,grasp,synflow")
    p.add_argument("--ks", default="0.05,0.1,0.2,0.5,1,2")
    p.add_argument("--heads", default="dense,butterfly")
    p.add_argument("--seeds")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--fail-on-collapse", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="rerun a published table (long-running)")
    p.add_argument("--table", type=int, choices=[1, 2], required=True)
    p.add_argument("--dry-run", action="store_true", help="list runs and reference values only")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--pretrain-epochs", type=int, default=10)
    p.add_argument("--data-root")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out-dir", default="results")
    p.add_argument("--fail-on-collapse", action="store_true")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("show-config", help="print the effective config")
    common(p)
    p.set_defaults(func=lambda a: print(dump_config(_config(a)), end="") or EXIT_OK)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
