"""Learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

SHAPES = ("cosine", "linear-warmup-cosine")


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    final_lr: float
    warmup_steps: int
    total_steps: int
    shape: str = "linear-warmup-cosine"

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        if not 0 <= self.final_lr <= self.peak_lr:
            raise ValueError("final_lr must lie in [0, peak_lr]")
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.shape == "cosine" and self.warmup_steps:
            raise ValueError("plain cosine schedule takes no warmup; use linear-warmup-cosine")


# Paper-scale pretraining schedule; toy runs override it.
PAPER_PRETRAIN = ScheduleConfig(peak_lr=5e-5, final_lr=5e-6, warmup_steps=2000, total_steps=180_000)


def lr_at_step(step: int, cfg: ScheduleConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        # step / warmup is exactly 1.0 at the boundary, so the peak is hit without rounding
        return cfg.peak_lr * (step / cfg.warmup_steps)
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def warmup_from_epoch_fraction(fraction: float, steps_per_epoch: int) -> int:
    """Warmup length when it is quoted as a fraction of an epoch."""
    return math.ceil(fraction * steps_per_epoch)
