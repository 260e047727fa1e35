import math


def cosine_lr(t: int, total: int, warmup: int, lr_max: float, lr_min: float = 0.0) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay reaching ``lr_min`` at ``total``."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if warmup >= total:
        raise ValueError(f"warmup {warmup} must be shorter than total {total}")
    if t < warmup:
        return lr_max * (t + 1) / warmup
    progress = (t - warmup) / (total - warmup)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
