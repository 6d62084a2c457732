"""End-to-end glue: datasets, baseline, one quantization run."""
from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..config import ConfigError, DataConfig, RunConfig
from ..pos import POSConfig, run_pos
from ..recon import NumericalError, block_losses
from ..vit import ModelState
from .checkpoint import load_checkpoint, model_digest
from .data import Dataset, load_idx_images, make_synthetic, sample_calibration
from .report import RunReport
from .train import evaluate_top1, train_baseline

log = logging.getLogger(__name__)

# arm -> (granularity, stage1_enabled)
ARM_SETTINGS = {
    "blockwise": ("blockwise", False),
    "pfcr_only": ("pfcr", False),
    "pos_only": ("blockwise", True),
    "pfcr_pos": ("pfcr", True),
}

METHOD_ARMS = {"pfcr-pos": "pfcr_pos", "pfcr": "pfcr_only", "blockwise": "blockwise"}

# reconstruction inputs for the per-block loss table
BLOCK_LOSS_SAMPLES = 256


def load_datasets(data: DataConfig, image_size: int, in_chans: int) -> tuple[Dataset, Dataset]:
    if data.source == "synthetic":
        kw = dict(channels=in_chans, noise=data.noise, class_sep=data.class_sep, max_shift=data.max_shift)
        train = make_synthetic(data.num_classes, data.n_train, image_size, data.seed, split="train", **kw)
        ev = make_synthetic(data.num_classes, data.n_eval, image_size, data.eval_seed, split="eval", **kw)
        return train, ev
    if data.source == "idx":
        if not data.train_images or not data.eval_images:
            raise ConfigError("idx data source needs train_images and eval_images")
        if in_chans != 1:
            raise ConfigError("IDX images are single-channel; set model.in_chans = 1")
        train = load_idx_images(data.train_images, data.train_labels, image_size, data.num_classes, "train")
        ev = load_idx_images(data.eval_images, data.eval_labels, image_size, data.num_classes, "eval")
        return train, ev
    raise ConfigError(f"unknown data source {data.source!r}")


def obtain_baseline(cfg: RunConfig, train: Dataset, ev: Dataset) -> tuple[ModelState, float]:
    """Load ``cfg.baseline_checkpoint`` when set, otherwise train from scratch."""
    if cfg.baseline_checkpoint:
        path = Path(cfg.baseline_checkpoint)
        if not Path(f"{path}.manifest.json").exists() and not path.exists():
            raise ConfigError(f"baseline checkpoint not found: {path}")
        model = load_checkpoint(path)
        model.quantizers = {}
        model.weight_quant_enabled = model.act_quant_enabled = False
        return model, evaluate_top1(model, ev)
    t = cfg.train
    return train_baseline(cfg.model, train, ev, epochs=t.epochs, lr=t.lr, seed=t.seed, batch_size=t.batch_size)


def arm_pos_config(cfg: RunConfig, arm: str, seed: int) -> POSConfig:
    granularity, stage1 = ARM_SETTINGS[arm]
    return replace(cfg.pos, granularity=granularity, stage1_enabled=stage1, seed=seed)


def quantize_run(
    cfg: RunConfig,
    pos_cfg: POSConfig,
    baseline: ModelState,
    train: Dataset,
    ev: Dataset,
    baseline_accuracy: float | None = None,
) -> tuple[ModelState | None, RunReport]:
    """Sample calibration/reconstruction sets with ``pos_cfg.seed`` and run POS.

    Numerical failures are re-raised with the partial report attached as
    ``exc.report`` (``failed_stage`` set).
    """
    calib, recon = sample_calibration(train, cfg.n_calib, cfg.n_recon, seed=pos_cfg.seed)
    report = RunReport(
        config=cfg.to_dict(),
        seed=pos_cfg.seed,
        baseline_accuracy=baseline_accuracy,
        baseline_digest=model_digest(baseline),
    )
    report.config["pos"] = pos_cfg.to_dict()
    try:
        result = run_pos(baseline, calib.images, recon.images, pos_cfg, cfg.quant)
    except NumericalError as exc:
        report.failed_stage = exc.stage
        report.error = str(exc)
        exc.report = report
        raise
    report.stages = result.stages
    report.quantized_accuracy = evaluate_top1(result.model, ev)
    report.block_losses = block_losses(result.model, baseline, recon.images[:BLOCK_LOSS_SAMPLES])
    return result.model, report


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))
