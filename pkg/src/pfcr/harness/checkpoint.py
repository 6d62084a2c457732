"""Checkpoint I/O: JSON manifest plus a raw little-endian float32 blob.

``<name>.manifest.json`` lists every tensor (name, shape, dtype, byte
offset) and every quantizer (spec, scale, zero point, bits), and carries a
CRC32 of the whole blob. ``<name>.weights.bin`` holds the tensor bytes.
"""
from __future__ import annotations

import hashlib
import json
import zlib
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..quant import QuantParams, QuantSpec, Quantizer
from ..vit import ModelState, ViTConfig

MAGIC = "PFCR-CKPT"
VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".manifest.json", ".weights.bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(f"{name}.manifest.json"), p.with_name(f"{name}.weights.bin")


def save_checkpoint(model: ModelState, path) -> Path:
    """Write ``model``; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    chunks, tensors, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    quantizers = []
    for name, q in model.quantizers.items():
        p = q.params
        scale = np.asarray(p.scale.data, dtype=np.float32)
        quantizers.append(
            {
                "name": name,
                "scheme": q.spec.scheme,
                "granularity": q.spec.granularity,
                "role": q.spec.role,
                "axis": q.spec.axis,
                "bits": p.bits,
                "scale_shape": list(scale.shape),
                "scale": [float(v) for v in scale.ravel()],
                "zero_point": None if p.zero_point is None else [int(v) for v in np.ravel(p.zero_point)],
            }
        )
    manifest = {
        "magic": MAGIC,
        "version": VERSION,
        "config": model.config.to_dict(),
        "flags": {
            "weight_quant_enabled": model.weight_quant_enabled,
            "act_quant_enabled": model.act_quant_enabled,
        },
        "blob": blob_path.name,
        "blob_bytes": len(blob),
        "crc32": zlib.crc32(blob),
        "tensors": tensors,
        "quantizers": quantizers,
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path


def load_checkpoint(path) -> ModelState:
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("magic") != MAGIC:
        raise CheckpointError(f"{manifest_path}: bad magic {manifest.get('magic')!r}")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{manifest_path}: unsupported version {manifest.get('version')!r}")
    try:
        blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read weights blob for {manifest_path}: {exc}") from exc
    if len(blob) != manifest["blob_bytes"] or zlib.crc32(blob) != manifest["crc32"]:
        raise CheckpointError(f"{blob_path}: checksum mismatch")
    params = {}
    for entry in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype=_DTYPE, count=entry["nbytes"] // 4, offset=entry["offset"])
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]).astype(np.float32))
    quantizers = {}
    for q in manifest["quantizers"]:
        spec = QuantSpec(q["bits"], q["scheme"], q["granularity"], q["role"], q["axis"])
        scale = np.asarray(q["scale"], dtype=np.float32).reshape(q["scale_shape"])
        zp = None
        if q["zero_point"] is not None:
            zp = np.asarray(q["zero_point"], dtype=np.float32).reshape(q["scale_shape"])
        quantizers[q["name"]] = Quantizer(spec, QuantParams(Tensor(scale), zp, q["bits"]))
    flags = manifest["flags"]
    return ModelState(
        config=ViTConfig(**manifest["config"]),
        params=params,
        quantizers=quantizers,
        weight_quant_enabled=flags["weight_quant_enabled"],
        act_quant_enabled=flags["act_quant_enabled"],
    )


def model_digest(model: ModelState) -> str:
    """SHA-256 over parameter names and bytes, for pairing ablation arms."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data, dtype=_DTYPE).tobytes())
    return h.hexdigest()
