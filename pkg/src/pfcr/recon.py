"""Fine-to-coarse reconstruction units, plans, and the MSE reconstruction loop.

The 2L finest units of an L-block model alternate attention (even index)
and MLP (odd index). A level-g unit covers 2**g consecutive finest units
starting at a multiple of 2**g.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamState, adam_step, cosine_lr
from .schedule import iter_for, lr_for
from .vit import ModelState, finest_forward, patch_embed, unit_inputs

log = logging.getLogger(__name__)

InputPolicy = Literal["quantized_input", "fp_input"]
INPUT_POLICIES = ("quantized_input", "fp_input")


class NumericalError(RuntimeError):
    """Non-finite loss during reconstruction."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class ReconUnit:
    level: int
    start: int

    def __post_init__(self):
        if self.level < 0 or self.start < 0:
            raise ValueError("level and start must be non-negative")
        if self.start % self.span:
            raise ValueError(f"start {self.start} is not aligned to span {self.span}")

    @property
    def span(self) -> int:
        return 2**self.level

    @property
    def stop(self) -> int:
        return self.start + self.span

    @property
    def finest(self) -> range:
        return range(self.start, self.stop)

    @property
    def index(self) -> int:
        """Position of the unit within its level."""
        return self.start // self.span

    @property
    def kind(self) -> str:
        if self.level == 0:
            return "attn" if self.start % 2 == 0 else "mlp"
        return "group"

    def children(self) -> tuple["ReconUnit", "ReconUnit"]:
        if self.level == 0:
            raise ValueError("finest units have no children")
        half = self.span // 2
        return ReconUnit(self.level - 1, self.start), ReconUnit(self.level - 1, self.start + half)

    def prefixes(self) -> list[str]:
        """Parameter / quantizer name prefixes owned by the covered finest units."""
        out = []
        for i in self.finest:
            block, kind = divmod(i, 2)
            names = ("ln2.", "mlp.") if kind else ("ln1.", "attn.")
            out += [f"blocks.{block}.{n}" for n in names]
        return out

    def label(self) -> str:
        return f"level {self.level} unit {self.index} (finest {self.start}..{self.stop - 1})"


@dataclass
class PlanLevel:
    g: int
    units: list[ReconUnit]
    lr: float
    iters: int


@dataclass
class ReconPlan:
    G: int
    levels: list[PlanLevel]
    input_policy: InputPolicy = "quantized_input"

    def level(self, g: int) -> PlanLevel:
        for lv in self.levels:
            if lv.g == g:
                return lv
        raise KeyError(g)

    def total_steps(self) -> int:
        return sum(len(lv.units) * lv.iters for lv in self.levels)

    def summary(self) -> list[dict]:
        return [{"g": lv.g, "units": len(lv.units), "lr": lv.lr, "iters": lv.iters} for lv in self.levels]


def compute_G(L: int) -> int:
    """Coarsest granularity level for an L-block model.

    ``log2(2L)`` when 2L is a power of two, else ``floor(log2(2L)) - 1``.
    """
    if L < 1:
        raise ValueError(f"need at least one block, got L={L}")
    n = 2 * L
    if n & (n - 1) == 0:
        return n.bit_length() - 1
    return n.bit_length() - 2


def finest_units(L: int) -> list[ReconUnit]:
    if L < 1:
        raise ValueError(f"need at least one block, got L={L}")
    return [ReconUnit(0, i) for i in range(2 * L)]


def level_units(L: int, g: int) -> list[ReconUnit]:
    """Complete level-g groups in network order; a trailing partial group is skipped."""
    span = 2**g
    return [ReconUnit(g, k * span) for k in range((2 * L) // span)]


def build_plan(
    L: int,
    G: int,
    lr_0: float,
    iter_0: int,
    input_policy: InputPolicy = "quantized_input",
    levels: list[int] | None = None,
) -> ReconPlan:
    """Levels ``0..G`` (or the explicit ``levels`` subset) with scheduled lr/iters."""
    if G > compute_G(L):
        raise ValueError(f"G={G} exceeds the coarsest admissible level {compute_G(L)} for L={L}")
    if input_policy not in INPUT_POLICIES:
        raise ValueError(f"unknown input policy {input_policy!r}")
    gs = list(range(G + 1)) if levels is None else sorted(levels)
    if any(g < 0 or g > G for g in gs):
        raise ValueError(f"levels {gs} outside 0..{G}")
    plan_levels = [PlanLevel(g, level_units(L, g), lr_for(g, lr_0), iter_for(g, iter_0)) for g in gs]
    return ReconPlan(G, plan_levels, input_policy)


def blockwise_plan(L: int, lr: float, iters: int, input_policy: InputPolicy = "quantized_input") -> ReconPlan:
    """Conventional single-granularity block-wise reconstruction."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    return ReconPlan(1, [PlanLevel(1, level_units(L, 1), lr, iters)], input_policy)


# forward / loss --------------------------------------------------------------


def unit_forward(unit: ReconUnit, x, model: ModelState) -> Tensor:
    """Apply the covered finest units in order."""
    if unit.stop > 2 * model.config.depth:
        raise ValueError(f"{unit.label()} exceeds a {model.config.depth}-block model")
    x = x if isinstance(x, Tensor) else Tensor(x)
    for i in unit.finest:
        x = finest_forward(i, x, model)
    return x


def recon_loss(unit: ReconUnit, x_q, x_fp, model_q: ModelState, model_fp: ModelState) -> Tensor:
    """MSE between the quantized unit on ``x_q`` and the frozen FP unit on ``x_fp``."""
    with ad.no_grad():
        target = unit_forward(unit, x_fp, model_fp).data
    return ad.mse_loss(unit_forward(unit, x_q, model_q), target)


def trainable_set(unit: ReconUnit, model: ModelState) -> dict[str, Tensor]:
    """Weights and enabled quantizer scales inside the unit."""
    prefixes = tuple(unit.prefixes())
    out = {k: v for k, v in model.params.items() if k.startswith(prefixes)}
    for k, q in model.quantizers.items():
        if not k.startswith(prefixes):
            continue
        enabled = model.weight_quant_enabled if q.spec.role == "weight" else model.act_quant_enabled
        if enabled:
            out[f"{k}@scale"] = q.scale
    return out


def _set_requires_grad(model: ModelState, names: set[str] | None) -> None:
    for k, t in model.all_leaves().items():
        t.requires_grad = names is not None and k in names
        t.grad = None


def reconstruct_unit(
    unit: ReconUnit,
    x_q: np.ndarray,
    x_fp: np.ndarray,
    iters: int,
    lr: float,
    model_q: ModelState,
    model_fp: ModelState,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Adam + cosine annealing on the unit's trainable set; returns per-step losses.

    Minibatches are a fixed seeded partition of the inputs, cycled in order.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = len(x_q)
    if n == 0 or len(x_fp) != n:
        raise ValueError("reconstruction inputs must be non-empty and paired")
    with ad.no_grad():
        target = np.concatenate(
            [unit_forward(unit, x_fp[i : i + 256], model_fp).data for i in range(0, n, 256)], axis=0
        )
    perm = np.random.default_rng(seed).permutation(n)
    bs = min(batch_size, n)
    batches = [perm[i : i + bs] for i in range(0, n - bs + 1, bs)]

    named = trainable_set(unit, model_q)
    names = sorted(named)
    params = [named[k] for k in names]
    scale_quantizers = [model_q.quantizers[k.split("@")[0]] for k in names if k.endswith("@scale")]
    state = AdamState.for_params(params)
    _set_requires_grad(model_q, set(names))
    losses: list[float] = []
    try:
        for t in range(iters):
            idx = batches[t % len(batches)]
            with ad.Tape() as tape:
                loss = ad.mse_loss(unit_forward(unit, x_q[idx], model_q), target[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite reconstruction loss at step {t} of {unit.label()}")
            losses.append(value)
            ad.backward(loss, tape)
            adam_step(params, [p.grad for p in params], state, cosine_lr(t, iters, lr))
            for p in params:
                p.grad = None
            for q in scale_quantizers:
                q.project()
    finally:
        _set_requires_grad(model_q, None)
    return losses


@dataclass
class UnitCurve:
    level: int
    unit: int
    start: int
    span: int
    lr: float
    iters: int
    losses: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "unit": self.unit,
            "start": self.start,
            "span": self.span,
            "lr": self.lr,
            "iters": self.iters,
            "losses": list(self.losses),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnitCurve":
        return cls(**d)


def pfcr_run(
    model_q: ModelState,
    model_fp: ModelState,
    recon_images: np.ndarray,
    plan: ReconPlan,
    batch_size: int = 32,
    seed: int = 0,
    on_level_done: Callable[[int, ModelState], None] | None = None,
) -> list[UnitCurve]:
    """Reconstruct every unit of ``plan``, levels fine to coarse.

    Quantized-side inputs are recomputed at the start of each unit so later
    units see the already-updated upstream network. Coarser levels start
    from whatever finer levels left behind.
    """
    L = model_q.config.depth
    fp_inputs = _fp_unit_inputs(recon_images, model_fp, L)
    curves: list[UnitCurve] = []
    for lv in plan.levels:
        for unit in lv.units:
            x_fp = fp_inputs[unit.start]
            if plan.input_policy == "fp_input":
                x_q = x_fp
            else:
                x_q = unit_inputs(recon_images, model_q, unit.start)
            unit_seed = int(np.random.SeedSequence([seed, unit.level, unit.start]).generate_state(1)[0])
            losses = reconstruct_unit(
                unit, x_q, x_fp, lv.iters, lv.lr, model_q, model_fp, batch_size=batch_size, seed=unit_seed
            )
            log.debug("%s: loss %.3e -> %.3e", unit.label(), losses[0], losses[-1])
            curves.append(UnitCurve(lv.g, unit.index, unit.start, unit.span, lv.lr, lv.iters, losses))
        if on_level_done is not None:
            on_level_done(lv.g, model_q)
    return curves


def _fp_unit_inputs(images: np.ndarray, model_fp: ModelState, L: int, batch_size: int = 256) -> list[np.ndarray]:
    chunks: list[list[np.ndarray]] = [[] for _ in range(2 * L)]
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            x = patch_embed(images[i : i + batch_size], model_fp)
            for j in range(2 * L):
                chunks[j].append(x.data)
                x = finest_forward(j, x, model_fp)
    return [np.concatenate(c, axis=0) for c in chunks]


def block_losses(model_q: ModelState, model_fp: ModelState, images: np.ndarray) -> list[float]:
    """Per-block output MSE: quantized chain on its own inputs vs the FP chain."""
    L = model_q.config.depth
    fp_inputs = _fp_unit_inputs(images, model_fp, L)
    out = []
    for l in range(L):
        unit = ReconUnit(1, 2 * l)
        x_q = unit_inputs(images, model_q, unit.start)
        with ad.no_grad():
            q = np.concatenate([unit_forward(unit, x_q[i : i + 256], model_q).data for i in range(0, len(images), 256)])
            f = np.concatenate(
                [unit_forward(unit, fp_inputs[unit.start][i : i + 256], model_fp).data for i in range(0, len(images), 256)]
            )
        out.append(float(np.mean((q.astype(np.float64) - f) ** 2)))
    return out
