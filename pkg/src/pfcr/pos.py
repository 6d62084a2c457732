"""Two-stage progressive optimization around fine-to-coarse reconstruction.

Stage 1 quantizes activations only and reconstructs levels 0 and 1 with
full-precision weights. Stage 2 adds weight quantizers, calibrated on the
stage-1 weights, and reconstructs every level up to the coarsest one.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .recon import (
    INPUT_POLICIES,
    InputPolicy,
    NumericalError,
    ReconPlan,
    UnitCurve,
    blockwise_plan,
    build_plan,
    compute_G,
    pfcr_run,
)
from .schedule import ScheduleOverflowError, iter_for, lr_for
from .vit import (
    ATTN_POINTS,
    MLP_POINTS,
    ModelState,
    QuantTable,
    attach_activation_quantizers,
    attach_weight_quantizers,
)

__all__ = [
    "POSConfig",
    "QuantPoints",
    "StageResult",
    "POSResult",
    "ScheduleOverflowError",
    "lr_for",
    "iter_for",
    "default_iter_0",
    "stage_plan",
    "run_stage1",
    "run_stage2",
    "run_pos",
]

log = logging.getLogger(__name__)

Granularity = Literal["pfcr", "blockwise"]


def default_iter_0(bits: int) -> int:
    """800 / 300 / 100 base iterations for 3 / 4 / 6-bit."""
    if bits <= 3:
        return 800
    if bits <= 5:
        return 300
    return 100


@dataclass
class QuantPoints:
    """Which activations get quantizers (weights always do)."""

    attn_points: list[str] = field(default_factory=lambda: list(ATTN_POINTS))
    mlp_points: list[str] = field(default_factory=lambda: list(MLP_POINTS))
    quantize_head_input: bool = True


@dataclass
class POSConfig:
    bits: int = 4
    lr_0: float = 4e-5
    iter_0: int | None = None
    stage1_enabled: bool = True
    input_policy: InputPolicy = "quantized_input"
    seed: int = 0
    granularity: Granularity = "pfcr"
    batch_size: int = 32
    recalibrate_activations: bool = False
    w_bits: int | None = None
    a_bits: int | None = None
    # explicit per-unit iterations for block-wise arms; None matches the PFCR step budget
    blockwise_iters: int | None = None
    # override of the stage-2 coarsest level
    G: int | None = None

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.lr_0 <= 0:
            raise ValueError(f"lr_0 must be positive, got {self.lr_0}")
        if self.iter_0 is not None and self.iter_0 < 1:
            raise ValueError(f"iter_0 must be >= 1, got {self.iter_0}")
        if self.input_policy not in INPUT_POLICIES:
            raise ValueError(f"unknown input policy {self.input_policy!r}")
        if self.granularity not in ("pfcr", "blockwise"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def base_iters(self) -> int:
        return self.iter_0 if self.iter_0 is not None else default_iter_0(self.bits)

    def table(self, points: QuantPoints | None = None) -> QuantTable:
        points = points or QuantPoints()
        return QuantTable(
            w_bits=self.w_bits or self.bits,
            a_bits=self.a_bits or self.bits,
            attn_points=tuple(points.attn_points),
            mlp_points=tuple(points.mlp_points),
            quantize_head_input=points.quantize_head_input,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    name: str
    G: int
    plan: list[dict]
    curves: list[UnitCurve]
    seconds: float
    weight_quant: bool
    act_quant: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "G": self.G,
            "plan": self.plan,
            "curves": [c.to_dict() for c in self.curves],
            "seconds": self.seconds,
            "weight_quant": self.weight_quant,
            "act_quant": self.act_quant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageResult":
        d = dict(d)
        d["curves"] = [UnitCurve.from_dict(c) for c in d["curves"]]
        return cls(**d)


@dataclass
class POSResult:
    model: ModelState
    stages: list[StageResult]


def stage_plan(L: int, G: int, cfg: POSConfig) -> ReconPlan:
    """Fine-to-coarse plan up to G, or the block-wise arm with a matched step budget."""
    pfcr = build_plan(L, G, cfg.lr_0, cfg.base_iters, cfg.input_policy)
    if cfg.granularity == "pfcr":
        return pfcr
    iters = cfg.blockwise_iters or max(1, int(round(pfcr.total_steps() / L)))
    return blockwise_plan(L, cfg.lr_0, iters, cfg.input_policy)


def _run_stage(name, model_q, model_fp, recon, plan, cfg) -> StageResult:
    t0 = time.perf_counter()
    log.info("%s: G=%d plan=%s", name, plan.G, plan.summary())
    try:
        curves = pfcr_run(model_q, model_fp, recon, plan, batch_size=cfg.batch_size, seed=cfg.seed)
    except NumericalError as exc:
        exc.stage = name
        raise
    return StageResult(
        name=name,
        G=plan.G,
        plan=plan.summary(),
        curves=curves,
        seconds=time.perf_counter() - t0,
        weight_quant=model_q.weight_quant_enabled,
        act_quant=model_q.act_quant_enabled,
    )


def run_stage1(
    model_fp: ModelState,
    calib: np.ndarray,
    recon: np.ndarray,
    cfg: POSConfig,
    points: QuantPoints | None = None,
) -> tuple[ModelState, StageResult]:
    """Activation-only quantization, levels 0..1, full-precision weights."""
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    model_q = model_fp.clone()
    model_q.quantizers = {}
    attach_activation_quantizers(model_q, cfg.table(points), calib)
    model_q.weight_quant_enabled = False
    model_q.act_quant_enabled = True
    plan = stage_plan(model_q.config.depth, 1, cfg)
    return model_q, _run_stage("stage1", model_q, model_fp, recon, plan, cfg)


def run_stage2(
    model: ModelState,
    model_fp: ModelState,
    calib: np.ndarray,
    recon: np.ndarray,
    cfg: POSConfig,
    points: QuantPoints | None = None,
) -> tuple[ModelState, StageResult]:
    """Weights and activations quantized, levels 0..G.

    ``model`` is the stage-1 output, or the full-precision model for the
    one-stage pipeline. Stage-1 activation scales are inherited unless
    ``cfg.recalibrate_activations`` is set.
    """
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    table = cfg.table(points)
    model_q = model.clone()
    if not model_q.act_quantizers() or cfg.recalibrate_activations:
        attach_activation_quantizers(model_q, table, calib)
    attach_weight_quantizers(model_q, table)
    model_q.weight_quant_enabled = True
    model_q.act_quant_enabled = True
    L = model_q.config.depth
    G = compute_G(L) if cfg.G is None else cfg.G
    plan = stage_plan(L, G, cfg)
    return model_q, _run_stage("stage2", model_q, model_fp, recon, plan, cfg)


def run_pos(
    model_fp: ModelState,
    calib: np.ndarray,
    recon: np.ndarray,
    cfg: POSConfig,
    points: QuantPoints | None = None,
) -> POSResult:
    stages = []
    model = model_fp
    if cfg.stage1_enabled:
        model, s1 = run_stage1(model_fp, calib, recon, cfg, points)
        stages.append(s1)
    model_q, s2 = run_stage2(model, model_fp, calib, recon, cfg, points)
    stages.append(s2)
    return POSResult(model_q, stages)
