"""Full-precision baseline training and top-1 evaluation."""
from __future__ import annotations

import logging
import math

import numpy as np

from .. import autodiff as ad
from ..optim import AdamState, adam_step, cosine_lr
from ..recon import NumericalError
from ..vit import ModelState, ViTConfig, init_model, model_forward, predict_logits
from .data import Dataset

log = logging.getLogger(__name__)


def evaluate_top1(model: ModelState, data: Dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) is the label."""
    if len(data) == 0:
        raise ValueError("evaluation set is empty")
    logits = predict_logits(data.images, model, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def train_baseline(
    config: ViTConfig,
    train_data: Dataset,
    eval_data: Dataset,
    epochs: int = 10,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[ModelState, float]:
    """Cross-entropy training with Adam and a cosine schedule over all steps."""
    model = init_model(config, seed)
    params = list(model.params.values())
    for p in params:
        p.requires_grad = True
    state = AdamState.for_params(params)
    rng = np.random.default_rng(seed + 1)
    n = len(train_data)
    steps_per_epoch = max(1, n // batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        running = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * batch_size : (b + 1) * batch_size]
            with ad.Tape() as tape:
                loss = ad.cross_entropy(model_forward(train_data.images[idx], model), train_data.labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"baseline training diverged at epoch {epoch} step {b}")
            running += value
            ad.backward(loss, tape)
            adam_step(params, [p.grad for p in params], state, cosine_lr(step, total, lr))
            for p in params:
                p.grad = None
            step += 1
        log.info("epoch %d: train loss %.4f", epoch, running / steps_per_epoch)
    for p in params:
        p.requires_grad = False
    return model, evaluate_top1(model, eval_data)
