"""Toy Vision Transformer with attachable fake quantizers.

Blocks are pre-LN: ``Y = X + MHSA(LN(X))`` then ``X' = Y + MLP(LN(Y))``.
Linear weights are stored ``[in, out]`` and quantized per output channel.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .quant import QuantSpec, Quantizer, calibrate_minmax


@dataclass
class ViTConfig:
    depth: int = 6
    embed_dim: int = 64
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    mlp_ratio: float = 4.0
    num_classes: int = 10
    in_chans: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


# activation quantization points inside one block, in forward order
ATTN_POINTS = ("qkv_in", "q_out", "k_out", "v_out", "probs", "proj_in")
MLP_POINTS = ("fc1_in", "fc2_in")
HEAD_POINT = "head_in"


@dataclass
class QuantTable:
    """Bit widths and the activation points that receive quantizers."""

    w_bits: int = 4
    a_bits: int = 4
    attn_points: tuple[str, ...] = ATTN_POINTS
    mlp_points: tuple[str, ...] = MLP_POINTS
    quantize_head_input: bool = True

    def point_names(self, depth: int) -> list[str]:
        names = []
        for l in range(depth):
            names += [f"blocks.{l}.attn.{p}" for p in self.attn_points]
            names += [f"blocks.{l}.mlp.{p}" for p in self.mlp_points]
        if self.quantize_head_input:
            names.append(HEAD_POINT)
        return names

    def spec_for_point(self, name: str) -> QuantSpec:
        if name.endswith(".probs"):
            return QuantSpec.post_softmax(self.a_bits)
        return QuantSpec.activation(self.a_bits)


@dataclass
class ModelState:
    config: ViTConfig
    params: dict[str, Tensor]
    quantizers: dict[str, Quantizer] = field(default_factory=dict)
    weight_quant_enabled: bool = False
    act_quant_enabled: bool = False
    observer: Callable[[str, np.ndarray], None] | None = field(default=None, repr=False)

    def weight_names(self) -> list[str]:
        return [n for n in self.params if n.endswith(".w")]

    def clone(self) -> "ModelState":
        return ModelState(
            config=copy.deepcopy(self.config),
            params={k: Tensor(v.data.copy()) for k, v in self.params.items()},
            quantizers={k: q.copy() for k, q in self.quantizers.items()},
            weight_quant_enabled=self.weight_quant_enabled,
            act_quant_enabled=self.act_quant_enabled,
        )

    def weight_quantizers(self) -> dict[str, Quantizer]:
        return {k: q for k, q in self.quantizers.items() if q.spec.role == "weight"}

    def act_quantizers(self) -> dict[str, Quantizer]:
        return {k: q for k, q in self.quantizers.items() if q.spec.role != "weight"}

    def all_leaves(self) -> dict[str, Tensor]:
        leaves = dict(self.params)
        leaves.update({f"{k}@scale": q.scale for k, q in self.quantizers.items()})
        return leaves

    def astype(self, dtype) -> "ModelState":
        out = self.clone()
        for t in out.params.values():
            t.data = t.data.astype(dtype)
        for q in out.quantizers.values():
            q.params.scale.data = q.params.scale.data.astype(dtype)
            if q.params.zero_point is not None:
                q.params.zero_point = q.params.zero_point.astype(dtype)
        return out


def init_model(config: ViTConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Truncated-normal (std 0.02) projections, zero biases, unit LN."""
    rng = np.random.default_rng(seed)
    D, Hd, C, p = config.embed_dim, config.hidden_dim, config.in_chans, config.patch_size

    def tn(*shape):
        return Tensor(truncnorm.rvs(-2, 2, scale=0.02, size=shape, random_state=rng).astype(dtype))

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype))

    params = {
        "patch_embed.w": tn(C * p * p, D),
        "patch_embed.b": zeros(D),
        "pos_embed": tn(config.num_tokens, D),
    }
    for l in range(config.depth):
        b = f"blocks.{l}"
        params[f"{b}.ln1.gamma"] = ones(D)
        params[f"{b}.ln1.beta"] = zeros(D)
        for m in ("q", "k", "v", "o"):
            params[f"{b}.attn.{m}.w"] = tn(D, D)
            params[f"{b}.attn.{m}.b"] = zeros(D)
        params[f"{b}.ln2.gamma"] = ones(D)
        params[f"{b}.ln2.beta"] = zeros(D)
        params[f"{b}.mlp.fc1.w"] = tn(D, Hd)
        params[f"{b}.mlp.fc1.b"] = zeros(Hd)
        params[f"{b}.mlp.fc2.w"] = tn(Hd, D)
        params[f"{b}.mlp.fc2.b"] = zeros(D)
    params["norm.gamma"] = ones(D)
    params["norm.beta"] = zeros(D)
    params["head.w"] = tn(D, config.num_classes)
    params["head.b"] = zeros(config.num_classes)
    return ModelState(config, params)


# quantization hooks ----------------------------------------------------------


def _w(state: ModelState, name: str) -> Tensor:
    t = state.params[name]
    q = state.quantizers.get(name)
    if state.weight_quant_enabled and q is not None:
        return q(t)
    return t


def _act(state: ModelState, point: str, x: Tensor) -> Tensor:
    if state.observer is not None:
        state.observer(point, x.data)
    q = state.quantizers.get(point)
    if state.act_quant_enabled and q is not None:
        return q(x)
    return x


def _linear(state: ModelState, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, _w(state, f"{prefix}.w"), state.params[f"{prefix}.b"])


# forward ---------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, C*p*p], patches in row-major order."""
    B, C, H, W = images.shape
    p = patch_size
    x = images.reshape(B, C, H // p, p, W // p, p)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), C * p * p)


def patch_embed(images, state: ModelState) -> Tensor:
    cfg = state.config
    data = images.data if isinstance(images, Tensor) else np.asarray(images)
    if data.ndim != 4 or data.shape[1:] != (cfg.in_chans, cfg.image_size, cfg.image_size):
        raise ValueError(
            f"expected images [B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}], got {data.shape}"
        )
    dtype = state.params["patch_embed.w"].dtype
    patches = Tensor(patchify(data.astype(dtype, copy=False), cfg.patch_size))
    return ad.add(_linear(state, "patch_embed", patches), state.params["pos_embed"])


def mhsa_forward(x: Tensor, state: ModelState, block: int) -> Tensor:
    """``X + MHSA(LN(X))`` for block ``block``."""
    cfg = state.config
    b = f"blocks.{block}"
    B, N, D = x.shape
    H, dh = cfg.heads, cfg.head_dim
    pr = state.params
    h = ad.layernorm(x, pr[f"{b}.ln1.gamma"], pr[f"{b}.ln1.beta"], cfg.ln_eps)
    h = _act(state, f"{b}.attn.qkv_in", h)

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

    q = heads(_act(state, f"{b}.attn.q_out", _linear(state, f"{b}.attn.q", h)))
    k = heads(_act(state, f"{b}.attn.k_out", _linear(state, f"{b}.attn.k", h)))
    v = heads(_act(state, f"{b}.attn.v_out", _linear(state, f"{b}.attn.v", h)))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    probs = _act(state, f"{b}.attn.probs", ad.softmax(scores, axis=-1))
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, N, D))
    ctx = _act(state, f"{b}.attn.proj_in", ctx)
    return ad.add(x, _linear(state, f"{b}.attn.o", ctx))


def mlp_forward(y: Tensor, state: ModelState, block: int) -> Tensor:
    """``Y + MLP(LN(Y))`` for block ``block``."""
    b = f"blocks.{block}"
    pr = state.params
    h = ad.layernorm(y, pr[f"{b}.ln2.gamma"], pr[f"{b}.ln2.beta"], state.config.ln_eps)
    h = _act(state, f"{b}.mlp.fc1_in", h)
    h = ad.gelu(_linear(state, f"{b}.mlp.fc1", h))
    h = _act(state, f"{b}.mlp.fc2_in", h)
    return ad.add(y, _linear(state, f"{b}.mlp.fc2", h))


def finest_forward(index: int, x: Tensor, state: ModelState) -> Tensor:
    """Finest unit ``index`` over the 2L units: even -> MHSA, odd -> MLP."""
    block, kind = divmod(index, 2)
    return mlp_forward(x, state, block) if kind else mhsa_forward(x, state, block)


def head_forward(x: Tensor, state: ModelState) -> Tensor:
    pr = state.params
    h = ad.layernorm(x, pr["norm.gamma"], pr["norm.beta"], state.config.ln_eps)
    h = _act(state, HEAD_POINT, h)
    return _linear(state, "head", ad.mean(h, axis=1))


def model_forward(images, state: ModelState) -> Tensor:
    x = patch_embed(images, state)
    for l in range(state.config.depth):
        x = mlp_forward(mhsa_forward(x, state, l), state, l)
    return head_forward(x, state)


def predict_logits(images: np.ndarray, state: ModelState, batch_size: int = 256) -> np.ndarray:
    with ad.no_grad():
        outs = [model_forward(images[i : i + batch_size], state).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def capture_intermediates(images, state: ModelState) -> list[np.ndarray]:
    """Inputs of all 2L finest units: ``[X_0, Y_0, X_1, Y_1, ...]``, detached."""
    out = []
    with ad.no_grad():
        x = patch_embed(images, state)
        for i in range(2 * state.config.depth):
            out.append(x.data.copy())
            x = finest_forward(i, x, state)
    return out


def unit_inputs(images: np.ndarray, state: ModelState, index: int, batch_size: int = 256) -> np.ndarray:
    """Input of finest unit ``index`` (``index == 2L`` gives the final tokens)."""
    chunks = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            x = patch_embed(images[i : i + batch_size], state)
            for j in range(index):
                x = finest_forward(j, x, state)
            chunks.append(x.data)
    return np.concatenate(chunks, axis=0)


# quantizer attachment --------------------------------------------------------


def collect_activations(images, state: ModelState, points: list[str]) -> dict[str, np.ndarray]:
    """Full-precision forward recording the tensors at ``points``."""
    wanted = set(points)
    seen: dict[str, list[np.ndarray]] = {p: [] for p in points}

    def observe(point, data):
        if point in wanted:
            seen[point].append(data.copy())

    flags = (state.weight_quant_enabled, state.act_quant_enabled)
    state.weight_quant_enabled = state.act_quant_enabled = False
    state.observer = observe
    try:
        predict_logits(np.asarray(images), state)
    finally:
        state.observer = None
        state.weight_quant_enabled, state.act_quant_enabled = flags
    return {p: np.concatenate(v, axis=0) for p, v in seen.items()}


def attach_weight_quantizers(state: ModelState, table: QuantTable) -> ModelState:
    """Per-output-channel uniform quantizers on every weight matrix."""
    spec = QuantSpec.weight(table.w_bits, axis=-1)
    for name in state.weight_names():
        state.quantizers[name] = Quantizer.calibrate(state.params[name], spec)
    return state


def attach_activation_quantizers(state: ModelState, table: QuantTable, calib_images) -> ModelState:
    if len(calib_images) == 0:
        raise ValueError("calibration batch is empty")
    points = table.point_names(state.config.depth)
    acts = collect_activations(calib_images, state, points)
    for name in points:
        state.quantizers[name] = Quantizer.calibrate(acts[name], table.spec_for_point(name))
    return state


def attach_quantizers(
    state: ModelState,
    table: QuantTable,
    calib_images,
    weights: bool = True,
    activations: bool = True,
) -> ModelState:
    """Calibrate and attach quantizers in place. Mode flags are untouched."""
    if len(calib_images) == 0:
        raise ValueError("calibration batch is empty")
    if activations:
        attach_activation_quantizers(state, table, calib_images)
    if weights:
        attach_weight_quantizers(state, table)
    return state
