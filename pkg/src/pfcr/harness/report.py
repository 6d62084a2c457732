"""Run reports (JSON) and loss-curve tables (CSV)."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..pos import StageResult

CURVE_COLUMNS = ("stage", "level", "unit", "iteration", "loss")


@dataclass
class RunReport:
    config: dict
    seed: int
    baseline_accuracy: float | None = None
    quantized_accuracy: float | None = None
    stages: list[StageResult] = field(default_factory=list)
    block_losses: list[float] = field(default_factory=list)
    baseline_digest: str | None = None
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "baseline_accuracy": self.baseline_accuracy,
            "quantized_accuracy": self.quantized_accuracy,
            "stages": [s.to_dict() for s in self.stages],
            "block_losses": list(self.block_losses),
            "baseline_digest": self.baseline_digest,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        d = dict(d)
        d["stages"] = [StageResult.from_dict(s) for s in d.get("stages", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_json(Path(path).read_text())

    def curve_rows(self) -> list[tuple]:
        """Per-iteration losses, then one ``eval`` row per block (level 1)."""
        rows = []
        for st in self.stages:
            for c in st.curves:
                rows += [(st.name, c.level, c.unit, i, v) for i, v in enumerate(c.losses)]
        rows += [("eval", 1, l, 0, v) for l, v in enumerate(self.block_losses)]
        return rows


def write_curves_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVE_COLUMNS)
        for stage, level, unit, it, loss in report.curve_rows():
            w.writerow([stage, level, unit, it, repr(float(loss))])


def read_curves_csv(path) -> list[tuple]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != CURVE_COLUMNS:
            raise ValueError(f"unexpected curves header {header}")
        return [(s, int(g), int(u), int(i), float(v)) for s, g, u, i, v in r]
