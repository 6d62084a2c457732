"""Desk-scale experiment settings shared by the acceptance suite and scripts."""
from __future__ import annotations

from ..config import DataConfig, RunConfig, TrainConfig
from ..pos import POSConfig
from ..vit import ViTConfig

DESK_BITS = 3
DESK_LR_0 = 4e-5
# 1/8 of the 3-bit default so five seeds of three arms fit a desk CPU budget
DESK_ITER_0 = 100
DESK_SEEDS = [0, 1, 2, 3, 4]
DESK_ARMS = ["blockwise", "pfcr_only", "pfcr_pos"]


def desk_run_config(**overrides) -> RunConfig:
    """Toy ViT (L=6, D=64, H=4, patch 8, 32x32, 10 classes) at 3-bit W/A."""
    cfg = RunConfig(
        model=ViTConfig(depth=6, embed_dim=64, heads=4, patch_size=8, image_size=32, num_classes=10),
        data=DataConfig(num_classes=10, n_train=4000, n_eval=1000),
        train=TrainConfig(epochs=4, lr=1e-3, batch_size=64, seed=0),
        pos=POSConfig(bits=DESK_BITS, lr_0=DESK_LR_0, iter_0=DESK_ITER_0, batch_size=32),
        n_calib=64,
        n_recon=None,  # min(1024, n/4) = 1000
        seeds=list(DESK_SEEDS),
        arms=list(DESK_ARMS),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
