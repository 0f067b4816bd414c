"""Command-line entry point: ``finalbn {gen-data,train,grid,report}``.

Exit codes: 0 success, 1 run failure, 2 usage error. ``FN_SEED`` supplies the
default seed when ``--seed`` is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from .config import FLAGS, SCHEDULES, Hyper, TrainConfig
from .data import (
    LESION_AMPLITUDE,
    SkewProtocol,
    generate_synthetic,
    load_external,
    make_splits,
    save_dataset,
    split_pool,
    synthetic_splits,
)
from .experiment import (
    best_worst_table,
    confident_wrongs,
    load_reports,
    load_summary,
    run_grid,
    three_way_table,
    write_table_csv,
)
from .layers import save_checkpoint
from .training import TrainingError, train_model

SPLIT_FILES = ("train.fnd", "val.fnd", "test.fnd")
TABLES = ("three-plants", "best-worst", "confident-wrongs")
MANIFEST_KEYS = {"protocol", "repeats", "base_seed", "hyper", "configs", "data", "data_seed", "dataset", "k"}


def _default_seed() -> int:
    return int(os.environ.get("FN_SEED", "0"))


def _echo(resolved: dict) -> None:
    print(json.dumps(resolved, sort_keys=True), flush=True)


def _load_splits(data_dir: Path):
    return tuple(load_external(data_dir / name) for name in SPLIT_FILES)


def cmd_gen_data(args, parser) -> int:
    out = Path(args.out)
    protocol = SkewProtocol() if args.protocol == "default" else None
    n_maj, n_min = args.majority, args.minority
    if protocol is not None:
        need_maj, need_min = protocol.pool_sizes()
        n_maj = need_maj if n_maj is None else n_maj
        n_min = need_min if n_min is None else n_min
    n_maj, n_min = n_maj or 0, n_min or 0
    if n_maj < 0 or n_min < 0:
        parser.error("--majority and --minority must be non-negative")
    _echo({"command": "gen-data", "out": str(out), "seed": args.seed, "majority": n_maj, "minority": n_min,
           "protocol": protocol.to_dict() if protocol else None, "lesion_amplitude": args.lesion_amplitude})
    pool = generate_synthetic(n_maj, n_min, args.seed, lesion_amplitude=args.lesion_amplitude)
    maj, mino = split_pool(pool)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(maj, out / "pool_majority.fnd")
    save_dataset(mino, out / "pool_minority.fnd")
    if protocol is not None:
        try:
            splits = make_splits(maj, mino, protocol, args.seed + 1)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        ids = {}
        for name, split in zip(SPLIT_FILES, splits):
            save_dataset(split, out / name)
            ids[name.split(".")[0]] = [int(i) for i in split.ids]
        (out / "splits.json").write_text(
            json.dumps({"protocol": protocol.to_dict(), "seed": args.seed, "ids": ids}) + "\n", encoding="utf-8"
        )
    return 0


def _hyper_from_args(args) -> Hyper:
    changes = {
        "base_lr": args.lr,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "schedule": args.schedule,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "mixup_alpha": args.mixup_alpha,
        "hidden_size": args.hidden_size,
    }
    base = Hyper().to_dict()
    base.update({k: v for k, v in changes.items() if v is not None})
    if args.learnable_final_bn:
        base["final_bn_learnable"] = True
    return Hyper.from_dict(base)


def cmd_train(args, parser) -> int:
    data = Path(args.data)
    if not data.is_dir():
        parser.error(f"data directory not found: {data}")
    missing = [n for n in SPLIT_FILES if not (data / n).exists()]
    if missing:
        parser.error(f"data directory {data} lacks {', '.join(missing)}")
    if args.config:
        resolved = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = TrainConfig.from_dict(resolved["config"])
        seed = resolved.get("seed", args.seed)
    else:
        try:
            config = TrainConfig.from_flag_set(args.flags.split(",") if args.flags else [], _hyper_from_args(args))
        except ValueError as exc:
            parser.error(str(exc))
        seed = args.seed
    out = Path(args.out)
    _echo({"command": "train", "data": str(data), "out": str(out), "seed": seed, "config": config.to_dict()})
    try:
        splits = _load_splits(data)
        model, report = train_model(config, *splits, seed=seed)
    except (TrainingError, ValueError, ArithmeticError) as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return 1
    report.save(out)
    save_checkpoint(model, out / "model.fnbn")
    if report.best_epoch is not None:
        print(f"best epoch {report.best_epoch}: minority test F1 {report.metric_at('f11'):.4f}")
    return 0


def _load_manifest(path: Path, parser) -> dict:
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read manifest {path}: {exc}")
    unknown = set(manifest) - MANIFEST_KEYS
    if unknown:
        parser.error(f"unknown manifest keys: {sorted(unknown)}")
    return manifest


def _print_table(rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    fmt = lambda v: "✓" if v is True else "" if v is False else f"{v:.4f}" if isinstance(v, float) else str(v)
    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)))


def cmd_grid(args, parser) -> int:
    manifest = _load_manifest(Path(args.manifest), parser)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: output directory {out} is not empty; pass --force to overwrite", file=sys.stderr)
            return 2
        shutil.rmtree(out)
    try:
        protocol = SkewProtocol.from_dict(manifest.get("protocol", "default"))
        hyper = Hyper.from_dict(manifest.get("hyper"))
        configs = [int(c) for c in manifest.get("configs", range(64))]
        if any(not 0 <= c < 64 for c in configs):
            raise ValueError("config ids must lie in 0..63")
    except (ValueError, KeyError, TypeError) as exc:
        parser.error(f"invalid manifest: {exc}")
    repeats = int(manifest.get("repeats", 1))
    base_seed = int(manifest.get("base_seed", _default_seed()))
    data_seed = int(manifest.get("data_seed", base_seed))
    k = int(manifest.get("k", 3))
    _echo({"command": "grid", "out": str(out), "workers": args.workers, "protocol": protocol.to_dict(),
           "repeats": repeats, "base_seed": base_seed, "data_seed": data_seed, "hyper": hyper.to_dict(),
           "configs": sorted(set(configs)), "data": manifest.get("data"), "k": k})
    if manifest.get("data"):
        splits = _load_splits(Path(manifest["data"]))
    else:
        splits = synthetic_splits(protocol, data_seed)
    result = run_grid(configs, repeats, base_seed, splits, hyper, workers=args.workers,
                      dataset_name=manifest.get("dataset", "synthetic"), protocol=protocol, k=k, out_dir=out)
    for f in result.failures:
        print(f"failed: config {f['config_id']} repeat {f['repeat']}: {f['error']}", file=sys.stderr)
    if result.summary["ranking"]["best"]:
        _print_table(best_worst_table(result.summary, k))
        return 0
    print("error: every grid cell failed", file=sys.stderr)
    return 1


def cmd_report(args, parser) -> int:
    dirs = [Path(d) for d in args.inputs]
    try:
        if args.table == "confident-wrongs":
            a, b = (int(v) for v in args.pair.split(","))
            reports = load_reports(dirs[0])
            if not reports:
                raise FileNotFoundError
            ra, rb = reports.get((a, args.repeat)), reports.get((b, args.repeat))
            if ra is None or rb is None:
                print(f"error: configs {a} and {b} need repeat {args.repeat} in {dirs[0]}", file=sys.stderr)
                return 1
            rows = confident_wrongs(ra.final_test_trace, rb.final_test_trace)
            rows = [{"sample_index": r["sample_index"], f"p_class1_config{a}": r["p_class1_a"],
                     f"p_class1_config{b}": r["p_class1_b"]} for r in rows]
            if args.limit:
                rows = rows[:args.limit]
        else:
            summaries = [load_summary(d) for d in dirs]
            rows = three_way_table(summaries) if args.table == "three-plants" else best_worst_table(summaries, args.k)
    except FileNotFoundError:
        print("error: no runs found", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_table_csv(rows, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finalbn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic pools and, with --protocol, train/val/test splits")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=_default_seed())
    g.add_argument("--majority", type=int)
    g.add_argument("--minority", type=int)
    g.add_argument("--protocol", choices=["default"])
    g.add_argument("--lesion-amplitude", type=float, default=LESION_AMPLITUDE)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--data", required=True, help="directory with train.fnd, val.fnd, test.fnd")
    t.add_argument("--flags", default="", help=f"comma-separated subset of {','.join(FLAGS)}")
    t.add_argument("--seed", type=int, default=_default_seed())
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="resolved-config JSON echoed by a previous run")
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--schedule", choices=SCHEDULES)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--mixup-alpha", type=float)
    t.add_argument("--hidden-size", type=int)
    t.add_argument("--learnable-final-bn", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("grid", help="run a configuration grid from a JSON manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", default="out")
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="print a results table as CSV")
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   help="grid output directory (repeat for several datasets)")
    p.add_argument("--table", required=True, choices=TABLES)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--pair", default="0,32", help="config ids A,B for confident-wrongs")
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--limit", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
