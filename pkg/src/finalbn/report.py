"""Per-run results and their on-disk form (report.json plus three CSVs)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import TrainConfig
from .metrics import (
    CalibrationReport,
    TraceRow,
    write_metrics_csv,
    write_reliability_csv,
    write_trace_csv,
)


@dataclass
class RunReport:
    config: TrainConfig
    seed: int
    epochs: list[dict] = field(default_factory=list)  # one row per (epoch, split); keys = metrics CSV columns
    best_epoch: int | None = None  # 1-based epoch with the highest minority-class test F1
    final_test_trace: list[TraceRow] = field(default_factory=list)
    calibration: CalibrationReport | None = None  # test set, at best_epoch
    class_weights: tuple[float, float] = (1.0, 1.0)
    error: str | None = None

    def rows(self, split: str) -> list[dict]:
        return [r for r in self.epochs if r["split"] == split]

    def metric_at(self, name: str, split: str = "test", epoch: int | None = None) -> float:
        """Metric value at ``epoch`` (default: the best epoch)."""
        epoch = self.best_epoch if epoch is None else epoch
        for r in self.rows(split):
            if r["epoch"] == epoch:
                return r[name]
        raise KeyError(f"no {split} row for epoch {epoch}")

    def final(self, name: str, split: str = "test") -> float:
        return self.rows(split)[-1][name]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "class_weights": list(self.class_weights),
            "best_epoch": self.best_epoch,
            "epochs": self.epochs,
            "calibration": self.calibration.to_dict() if self.calibration else None,
            "final_test_trace": [[t.sample_index, t.ground_truth, t.p_class1] for t in self.final_test_trace],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(
            config=TrainConfig.from_dict(d["config"]),
            seed=d["seed"],
            epochs=d["epochs"],
            best_epoch=d["best_epoch"],
            final_test_trace=[TraceRow(int(i), int(g), float(p)) for i, g, p in d["final_test_trace"]],
            calibration=CalibrationReport.from_dict(d["calibration"]) if d["calibration"] else None,
            class_weights=tuple(d.get("class_weights", (1.0, 1.0))),
            error=d.get("error"),
        )

    def save(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(self.epochs, out / "metrics.csv")
        write_trace_csv(self.final_test_trace, out / "trace.csv")
        write_reliability_csv(self.calibration, out / "reliability.csv")
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "RunReport":
        return cls.from_dict(json.loads((Path(directory) / "report.json").read_text(encoding="utf-8")))
