"""The 64-cell ablation grid, repeat aggregation, and best/worst and three-way tables.

Every (config_id, repeat) cell trains with its own seed derived from the base
seed, so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Hyper, TrainConfig
from .data import Dataset, SkewProtocol
from .report import RunReport
from .training import train_run

log = logging.getLogger(__name__)

ALL_CONFIGS = tuple(range(64))
BASELINE, WL_ONLY, BN_ONLY = 0, 16, 32


def run_seed(base_seed: int, config_id: int, repeat: int) -> int:
    return base_seed ^ zlib.crc32(f"{config_id}:{repeat}".encode())


_SPLITS: tuple[Dataset, Dataset, Dataset] | None = None


def _init_worker(splits):
    global _SPLITS
    _SPLITS = splits


def _run_cell(job) -> RunReport:
    config_id, repeat, seed, hyper = job
    config = TrainConfig.from_id(config_id, hyper)
    try:
        return train_run(config, *_SPLITS, seed=seed)
    except Exception as exc:  # recorded, excluded from aggregates, never retried
        log.warning("config %d repeat %d failed: %s", config_id, repeat, exc)
        return RunReport(config=config, seed=seed, error=f"{type(exc).__name__}: {exc}")


@dataclass
class GridResult:
    summary: dict
    reports: dict[tuple[int, int], RunReport] = field(default_factory=dict)

    @property
    def failures(self) -> list[dict]:
        return self.summary["failures"]


def run_grid(
    configs,
    repeats: int,
    base_seed: int,
    splits: tuple[Dataset, Dataset, Dataset],
    hyper: Hyper | None = None,
    *,
    workers: int = 1,
    dataset_name: str = "synthetic",
    protocol: SkewProtocol | None = None,
    k: int = 3,
    out_dir=None,
) -> GridResult:
    """Train every (config, repeat) cell and aggregate minority/majority F1 at each run's best epoch."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    configs = sorted({int(c) for c in configs})
    hyper = hyper or Hyper()
    jobs = [(cid, r, run_seed(base_seed, cid, r), hyper) for cid in configs for r in range(repeats)]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(splits,)) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        _init_worker(splits)
        results = [_run_cell(job) for job in jobs]
    reports = {(job[0], job[1]): rep for job, rep in zip(jobs, results)}
    summary = summarize(
        reports,
        k=k,
        meta={
            "dataset": dataset_name,
            "protocol": (protocol or SkewProtocol()).to_dict(),
            "repeats": repeats,
            "base_seed": base_seed,
            "hyper": hyper.to_dict(),
        },
    )
    result = GridResult(summary, reports)
    if out_dir is not None:
        write_grid(result, out_dir, k=k)
    return result


def _mode(values: list[int]) -> int | None:
    if not values:
        return None
    counts = {v: values.count(v) for v in values}
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def summarize(reports: dict[tuple[int, int], RunReport], k: int = 3, meta: dict | None = None) -> dict:
    by_config: dict[int, list[tuple[int, RunReport]]] = {}
    for (cid, rep), report in sorted(reports.items()):
        by_config.setdefault(cid, []).append((rep, report))
    rows, failures = [], []
    for cid, runs in by_config.items():
        ok = [r for _, r in runs if r.error is None and r.best_epoch is not None]
        for rep, r in runs:
            if r.error is not None:
                failures.append({"config_id": cid, "repeat": rep, "error": r.error})
        minority = [r.metric_at("f11") for r in ok]
        majority = [r.metric_at("f10") for r in ok]
        best_epochs = [r.best_epoch for r in ok]
        flags = TrainConfig.from_id(cid).flags
        rows.append({
            "config_id": cid,
            **flags,
            "n_runs": len(runs),
            "n_failed": len(runs) - len(ok),
            "minority_f1": minority,
            "majority_f1": majority,
            "minority_f1_mean": float(np.mean(minority)) if ok else None,
            "minority_f1_std": float(np.std(minority)) if ok else None,
            "majority_f1_mean": float(np.mean(majority)) if ok else None,
            "majority_f1_std": float(np.std(majority)) if ok else None,
            "best_epochs": best_epochs,
            "best_epoch_mode": _mode(best_epochs),
        })
    summary = dict(meta or {})
    summary["configs"] = rows
    summary["failures"] = failures
    summary["ranking"] = _ranking(rows, k)
    summary["annotations"] = _bn_pattern(rows, summary["ranking"])
    return summary


def _ranked(rows: list[dict]) -> list[dict]:
    scored = [r for r in rows if r["minority_f1_mean"] is not None]
    return sorted(scored, key=lambda r: (-r["minority_f1_mean"], r["config_id"]))


def _ranking(rows: list[dict], k: int) -> dict:
    ranked = _ranked(rows)
    return {"best": [r["config_id"] for r in ranked[:k]], "worst": [r["config_id"] for r in ranked[-k:]]}


def _bn_pattern(rows: list[dict], ranking: dict) -> dict:
    bn = {r["config_id"]: r["bn"] for r in rows}
    return {
        "best_all_final_bn": all(bn[c] for c in ranking["best"]),
        "worst_no_final_bn": not any(bn[c] for c in ranking["worst"]),
    }


def best_worst_table(summaries, k: int = 3) -> list[dict]:
    """Top-k and bottom-k configs by mean minority F1, averaged over one or more dataset summaries.

    Ties go to the lower config id. Rows carry the flags, one F1 column per
    dataset and the average.
    """
    if isinstance(summaries, dict):
        summaries = [summaries]
    if not summaries or not any(s["configs"] for s in summaries):
        raise ValueError("summary is empty")
    names = [s.get("dataset", f"dataset{i}") for i, s in enumerate(summaries)]
    per_ds = [{r["config_id"]: r["minority_f1_mean"] for r in s["configs"]} for s in summaries]
    common = set.intersection(*(set(d) for d in per_ds))
    rows = []
    for cid in sorted(common):
        vals = [d[cid] for d in per_ds]
        if any(v is None for v in vals):
            continue
        row = {"config_id": cid, **TrainConfig.from_id(cid).flags}
        row.update(zip(names, vals))
        row["average"] = float(np.mean(vals))
        rows.append(row)
    rows.sort(key=lambda r: (-r["average"], r["config_id"]))
    best = [{"group": "best", "rank": i + 1, **r} for i, r in enumerate(rows[:k])]
    worst = [{"group": "worst", "rank": len(rows) - len(rows[-k:]) + i + 1, **r} for i, r in enumerate(rows[-k:])]
    return best + worst


def three_way_table(summaries) -> list[dict]:
    """Baseline vs WL-only vs BN-only mean F1 per dataset and class, with BN-minus-WL improvement."""
    if isinstance(summaries, dict):
        summaries = [summaries]
    out = []
    for s in summaries:
        rows = {r["config_id"]: r for r in s["configs"]}
        missing = {BASELINE, WL_ONLY, BN_ONLY} - set(rows)
        if missing:
            raise ValueError(f"summary lacks configs {sorted(missing)}")
        for cls, key in (("unhealthy", "minority_f1_mean"), ("healthy", "majority_f1_mean")):
            base, wl, bn = (rows[c][key] for c in (BASELINE, WL_ONLY, BN_ONLY))
            out.append({
                "dataset": s.get("dataset", ""),
                "class": cls,
                "without_final_bn": base,
                "with_wl_no_bn": wl,
                "with_final_bn_no_wl": bn,
                "bn_total_improvement": None if bn is None or wl is None else bn - wl,
            })
    return out


def averaged_comparison(datasets: dict, repeats: int, base_seed: int = 0, hyper: Hyper | None = None, workers: int = 1):
    """Run configs 0, 16 and 32 on each named dataset; returns ``(table, {name: GridResult})``."""
    results = {
        name: run_grid([BASELINE, WL_ONLY, BN_ONLY], repeats, base_seed, splits, hyper, workers=workers, dataset_name=name)
        for name, splits in datasets.items()
    }
    return three_way_table([r.summary for r in results.values()]), results


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_grid(result: GridResult, out_dir, k: int = 3) -> None:
    """Write ``<config>/<repeat>/`` run folders, ``summary.json`` and ``best_worst.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for (cid, rep), report in sorted(result.reports.items()):
        report.save(out / str(cid) / str(rep))
    (out / "summary.json").write_text(_dump(result.summary), encoding="utf-8")
    rows = best_worst_table(result.summary, k) if result.summary["ranking"]["best"] else []
    write_table_csv(rows, out / "best_worst.csv")


def write_table_csv(rows: list[dict], path_or_file) -> None:
    import csv

    def emit(fh):
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: int(v) if isinstance(v, bool) else v for k, v in row.items()})

    if hasattr(path_or_file, "write"):
        emit(path_or_file)
    else:
        with open(path_or_file, "w", newline="", encoding="utf-8") as fh:
            emit(fh)


def load_summary(out_dir) -> dict:
    path = Path(out_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"no runs found in {out_dir}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_reports(out_dir) -> dict[tuple[int, int], RunReport]:
    out = Path(out_dir)
    reports = {}
    for path in sorted(out.glob("*/*/report.json")):
        cid, rep = int(path.parent.parent.name), int(path.parent.name)
        reports[(cid, rep)] = RunReport.load(path.parent)
    return reports


def confident_wrongs(trace_a, trace_b) -> list[dict]:
    """Minority test samples sorted by ``p_class1`` under the first config, paired with the second."""
    b = {t.sample_index: t.p_class1 for t in trace_b}
    rows = [
        {"sample_index": t.sample_index, "p_class1_a": t.p_class1, "p_class1_b": b.get(t.sample_index)}
        for t in trace_a
        if t.ground_truth == 1
    ]
    return sorted(rows, key=lambda r: (r["p_class1_a"], r["sample_index"]))
