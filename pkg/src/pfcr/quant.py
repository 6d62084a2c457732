"""Uniform and log2 fake quantizers with min/max calibration."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .autodiff import Tensor, _record, _unbroadcast

Scheme = Literal["uniform", "log2"]
Granularity = Literal["per_channel", "per_layer"]
Role = Literal["weight", "activation", "post_softmax"]

DEGENERATE_SCALE = 1e-8
MIN_SCALE = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scheme: Scheme = "uniform"
    granularity: Granularity = "per_layer"
    role: Role = "activation"
    axis: int = -1

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.scheme not in ("uniform", "log2"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in ("per_channel", "per_layer"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.role == "post_softmax" and self.scheme != "log2":
            raise ValueError("post_softmax quantizers must use the log2 scheme")
        if self.role == "weight" and self.granularity != "per_channel":
            raise ValueError("weight quantizers are per-channel")
        if self.role in ("activation", "post_softmax") and self.granularity != "per_layer":
            raise ValueError("activation quantizers are per-layer")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    @classmethod
    def weight(cls, bits: int, axis: int = -1) -> "QuantSpec":
        return cls(bits, "uniform", "per_channel", "weight", axis)

    @classmethod
    def activation(cls, bits: int) -> "QuantSpec":
        return cls(bits, "uniform", "per_layer", "activation")

    @classmethod
    def post_softmax(cls, bits: int) -> "QuantSpec":
        return cls(bits, "log2", "per_layer", "post_softmax")


@dataclass
class QuantParams:
    """Calibrated state. ``scale`` is a trainable leaf shaped to broadcast
    against the quantized tensor; ``zero_point`` is fixed (None for log2)."""

    scale: Tensor
    zero_point: np.ndarray | None
    bits: int

    def __post_init__(self):
        if np.any(self.scale.data <= 0):
            raise ValueError("quantizer scale must be positive")
        if self.zero_point is not None:
            zp = self.zero_point
            if np.any(zp < 0) or np.any(zp > 2**self.bits - 1) or np.any(zp != np.round(zp)):
                raise ValueError("zero point must be an integer in [0, 2^b - 1]")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1


def _reduce_axes(ndim: int, spec: QuantSpec) -> tuple[int, ...] | None:
    if spec.granularity == "per_layer":
        return None
    axis = spec.axis % ndim
    return tuple(i for i in range(ndim) if i != axis)


def calibrate_minmax(x, spec: QuantSpec) -> QuantParams:
    """Min/max calibration per tensor or per channel.

    Uniform ranges are widened to include zero so the zero point lands in
    ``[0, 2^b - 1]``; a constant input gets the degenerate scale. Log2
    quantizers take ``s = max(x)``.
    """
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xd.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    dtype = xd.dtype if np.issubdtype(xd.dtype, np.floating) else np.float32
    axes = _reduce_axes(xd.ndim, spec)
    keep = axes is not None
    lo = np.asarray(xd.min(axis=axes, keepdims=keep), dtype=np.float64)
    hi = np.asarray(xd.max(axis=axes, keepdims=keep), dtype=np.float64)
    degenerate = hi == lo
    if spec.scheme == "log2":
        s = np.where(hi > 0, hi, DEGENERATE_SCALE)
        return QuantParams(Tensor(s.astype(dtype)), None, spec.bits)
    lo0 = np.minimum(lo, 0.0)
    hi0 = np.maximum(hi, 0.0)
    # tiny ranges would underflow the scale; floor it like the projection does
    s = np.where(degenerate, DEGENERATE_SCALE, np.maximum((hi0 - lo0) / spec.qmax, MIN_SCALE))
    z = np.where(degenerate, 0.0, np.clip(np.round(-lo0 / s), 0, spec.qmax))
    return QuantParams(Tensor(s.astype(dtype)), z.astype(dtype), spec.bits)


# integer-code paths ----------------------------------------------------------


def quantize_uniform(x, p: QuantParams) -> np.ndarray:
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.clip(np.round(xd / p.scale.data) + p.zero_point, 0, p.qmax).astype(np.int64)


def dequantize_uniform(codes, p: QuantParams) -> np.ndarray:
    s = p.scale.data
    return (s * (np.asarray(codes, dtype=s.dtype) - p.zero_point)).astype(s.dtype, copy=False)


def _log2_codes_float(xd: np.ndarray, s: np.ndarray, qmax: int) -> np.ndarray:
    with np.errstate(divide="ignore"):
        v = -np.log2(xd / s)
    return np.clip(np.round(v), 0, qmax)


def quantize_log2(x, p: QuantParams) -> np.ndarray:
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    if np.any(xd < 0):
        raise ValueError("log2 quantizer expects non-negative inputs")
    return _log2_codes_float(xd, p.scale.data, p.qmax).astype(np.int64)


def dequantize_log2(codes, p: QuantParams) -> np.ndarray:
    s = p.scale.data
    return (s * np.exp2(-np.asarray(codes, dtype=s.dtype))).astype(s.dtype, copy=False)


# differentiable fake quantization --------------------------------------------


def fake_quant_uniform(x: Tensor, p: QuantParams) -> Tensor:
    """Quantize-dequantize with straight-through rounding.

    Inside the representable range d/dx = 1 and d/ds = round(x/s) - x/s;
    outside it d/dx = 0 and d/ds = clamped code minus zero point.
    """
    st = p.scale
    xd, sd, z = x.data, st.data, p.zero_point
    u = xd / sd
    r = np.round(u)
    q = r + z
    c = np.clip(q, 0, p.qmax)
    out = (sd * (c - z)).astype(xd.dtype, copy=False)
    inside = (q >= 0) & (q <= p.qmax)

    def vjp(g):
        gx = g * inside if x.requires_grad else None
        gs = None
        if st.requires_grad:
            gs = _unbroadcast(g * np.where(inside, r - u, c - z), sd.shape)
        return gx, gs

    return _record(out, (x, st), vjp)


def fake_quant_log2(x: Tensor, p: QuantParams) -> Tensor:
    """Log2 quantize-dequantize; codes map back through ``s * 2**(-code)``.

    Inside the range d/dx = out/x and d/ds = 0; clamped entries pass
    d/ds = 2**(-code) and no gradient to x.
    """
    st = p.scale
    xd, sd = x.data, st.data
    with np.errstate(divide="ignore"):
        v = -np.log2(xd / sd)
    q = np.round(v)
    c = np.clip(q, 0, p.qmax)
    pw = np.exp2(-c).astype(xd.dtype, copy=False)
    out = (sd * pw).astype(xd.dtype, copy=False)
    inside = np.isfinite(q) & (q >= 0) & (q <= p.qmax)

    def vjp(g):
        gx = gs = None
        if x.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                gx = np.where(inside, g * out / np.where(inside, xd, 1), 0).astype(xd.dtype, copy=False)
        if st.requires_grad:
            gs = _unbroadcast(np.where(inside, 0, g * pw), sd.shape)
        return gx, gs

    return _record(out, (x, st), vjp)


def fake_quant(x: Tensor, p: QuantParams, spec: QuantSpec) -> Tensor:
    if spec.scheme == "log2":
        return fake_quant_log2(x, p)
    return fake_quant_uniform(x, p)


class Quantizer:
    """A spec bound to its calibrated parameters."""

    def __init__(self, spec: QuantSpec, params: QuantParams):
        self.spec = spec
        self.params = params

    @classmethod
    def calibrate(cls, x, spec: QuantSpec) -> "Quantizer":
        return cls(spec, calibrate_minmax(x, spec))

    def __call__(self, x: Tensor) -> Tensor:
        return fake_quant(x, self.params, self.spec)

    @property
    def scale(self) -> Tensor:
        return self.params.scale

    def project(self) -> None:
        """Keep the scale strictly positive after an optimizer step."""
        s = self.params.scale
        s.data = np.maximum(s.data, s.dtype.type(MIN_SCALE))

    def copy(self) -> "Quantizer":
        p = self.params
        zp = None if p.zero_point is None else p.zero_point.copy()
        return Quantizer(self.spec, QuantParams(Tensor(p.scale.data.copy()), zp, p.bits))

    def __repr__(self) -> str:
        return f"Quantizer({self.spec.scheme}, {self.spec.bits}-bit, {self.spec.role})"
