"""Ablation driver: every arm on every seed against one shared baseline."""
from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from ..config import ARMS, RunConfig
from ..recon import NumericalError
from ..vit import ModelState
from .checkpoint import model_digest
from .data import Dataset
from .pipeline import arm_pos_config, load_datasets, median, obtain_baseline, quantize_run
from .report import RunReport, write_curves_csv

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("arm", "seed", "top1", "last_block_loss", "status")


@dataclass
class AblationRow:
    arm: str
    seed: int | str
    top1: float | None
    last_block_loss: float | None
    status: str = "ok"
    error: str | None = None

    def csv_row(self) -> list:
        fmt = lambda v: "" if v is None else repr(float(v))
        return [self.arm, self.seed, fmt(self.top1), fmt(self.last_block_loss), self.status]


@dataclass
class AblationResult:
    rows: list[AblationRow]
    summary: list[AblationRow]
    baseline_accuracy: float
    baseline_digest: str
    reports: dict[tuple[str, int], RunReport] = field(default_factory=dict)

    def all_rows(self) -> list[AblationRow]:
        return self.rows + self.summary

    def per_seed(self, arm: str, key: str = "top1") -> list[float]:
        return [getattr(r, key) for r in self.rows if r.arm == arm and r.status == "ok"]

    def median(self, arm: str, key: str = "top1") -> float:
        return median(self.per_seed(arm, key))


def _run_arm(
    cfg: RunConfig,
    arm: str,
    seed: int,
    baseline: ModelState,
    digest: str,
    baseline_accuracy: float,
    data: tuple[Dataset, Dataset] | None,
    out_dir: str | None,
) -> tuple[AblationRow, RunReport | None]:
    if model_digest(baseline) != digest:
        raise RuntimeError(f"baseline digest mismatch in arm {arm} seed {seed}")
    if arm == "fp_baseline":
        return AblationRow(arm, seed, baseline_accuracy, 0.0), None
    train, ev = data if data is not None else load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    pos_cfg = arm_pos_config(cfg, arm, seed)
    try:
        _, report = quantize_run(cfg, pos_cfg, baseline, train, ev, baseline_accuracy)
        row = AblationRow(arm, seed, report.quantized_accuracy, report.block_losses[-1])
    except NumericalError as exc:
        report = exc.report
        row = AblationRow(arm, seed, None, None, f"numerical:{exc.stage}", str(exc))
    except Exception as exc:  # one failing arm must not sink the table
        report = None
        row = AblationRow(arm, seed, None, None, "error", f"{type(exc).__name__}: {exc}")
        log.error("arm %s seed %d failed:\n%s", arm, seed, traceback.format_exc())
    if out_dir is not None and report is not None:
        run_dir = Path(out_dir) / arm / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        report.save(run_dir / "report.json")
        write_curves_csv(report, run_dir / "curves.csv")
    log.info("arm %s seed %d: %s top1=%s", arm, seed, row.status, row.top1)
    return row, report


def run_ablation_suite(
    cfg: RunConfig,
    arms: list[str] | None = None,
    seeds: list[int] | None = None,
    jobs: int = 1,
    out_dir=None,
    baseline: tuple[ModelState, float] | None = None,
) -> AblationResult:
    """Run ``arms`` x ``seeds``; arms within a seed share the calibration split.

    ``baseline`` is an already trained ``(model, eval accuracy)`` pair; without
    it the config's checkpoint is loaded or a baseline is trained once.
    """
    arms = list(arms or cfg.arms)
    seeds = list(cfg.seeds if seeds is None else seeds)
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ValueError(f"unknown arms {bad}")
    if not seeds:
        raise ValueError("need at least one seed")
    train, ev = load_datasets(cfg.data, cfg.model.image_size, cfg.model.in_chans)
    model, acc = baseline if baseline is not None else obtain_baseline(cfg, train, ev)
    digest = model_digest(model)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    tasks = [(arm, seed) for seed in seeds for arm in arms]
    out = None if out_dir is None else str(out_dir)
    if jobs <= 1:
        results = [_run_arm(cfg, a, s, model, digest, acc, (train, ev), out) for a, s in tasks]
    else:
        # workers rebuild the datasets from the config instead of unpickling them
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_arm, cfg, a, s, model, digest, acc, None, out) for a, s in tasks]
            results = [f.result() for f in futures]
    rows = [r for r, _ in results]
    reports = {(r.arm, r.seed): rep for r, rep in results if rep is not None}
    summary = []
    for arm in arms:
        ok = [r for r in rows if r.arm == arm and r.status == "ok"]
        status = "ok" if len(ok) == len(seeds) else f"partial:{len(ok)}/{len(seeds)}"
        summary.append(
            AblationRow(
                arm,
                "median",
                median([r.top1 for r in ok]) if ok else None,
                median([r.last_block_loss for r in ok]) if ok else None,
                status,
            )
        )
    result = AblationResult(rows, summary, acc, digest, reports)
    if out_dir is not None:
        write_ablation_csv(result, Path(out_dir) / "ablation.csv")
    return result


def write_ablation_csv(result: AblationResult, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for row in result.all_rows():
            w.writerow(row.csv_row())


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
