"""Per-level learning-rate and iteration schedules."""
from __future__ import annotations


class ScheduleOverflowError(ValueError):
    """The per-level learning rate would be non-positive."""


def lr_for(g: int, lr_0: float) -> float:
    """``lr_0 * (1 - 0.2 g)``; levels g >= 5 are rejected."""
    if g < 0:
        raise ValueError(f"level must be >= 0, got {g}")
    if lr_0 <= 0:
        raise ValueError(f"lr_0 must be positive, got {lr_0}")
    if g >= 5:
        raise ScheduleOverflowError(f"level {g} gives a non-positive learning rate")
    return lr_0 * (1 - 0.2 * g)


def iter_for(g: int, iter_0: int) -> int:
    """``round(iter_0 * (1 + 0.2 g))``."""
    if g < 0:
        raise ValueError(f"level must be >= 0, got {g}")
    if iter_0 < 1:
        raise ValueError(f"iter_0 must be >= 1, got {iter_0}")
    return int(round(iter_0 * (1 + 0.2 * g)))
