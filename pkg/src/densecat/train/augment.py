"""Batch augmentations on (N, C, H, W) float images with soft (N, K) labels."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(x: np.ndarray, y: np.ndarray, alpha: float, rng: np.random.Generator,
          lam: Optional[float] = None, perm: Optional[np.ndarray] = None):
    """Blend each example with a partner from a random permutation of the batch.

    ``lam`` and ``perm`` may be fixed by the caller; otherwise
    lam ~ Beta(alpha, alpha).
    """
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be positive, got {alpha}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(len(x))
    x2 = (lam * x + (1.0 - lam) * x[perm]).astype(x.dtype, copy=False)
    y2 = lam * y + (1.0 - lam) * y[perm]
    return x2, y2


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator):
    """Box with area about (1 - lam) * h * w and the image aspect ratio, clipped to bounds."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch // 2, h)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw // 2, w)
    return y0, y1, x0, x1


def cutmix(x: np.ndarray, y: np.ndarray, alpha: float, rng: np.random.Generator,
           lam: Optional[float] = None, box=None, perm: Optional[np.ndarray] = None):
    """Paste a box from permuted partners; labels mix by the pasted area fraction.

    Returns ``(x', y', lam_effective)``.
    """
    if alpha <= 0:
        raise ValueError(f"cutmix alpha must be positive, got {alpha}")
    n, _, h, w = x.shape
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(n)
    if box is None:
        box = cutmix_box(h, w, lam, rng)
    y0, y1, x0, x1 = box
    out = x.copy()
    out[:, :, y0:y1, x0:x1] = x[perm][:, :, y0:y1, x0:x1]
    frac = (y1 - y0) * (x1 - x0) / (h * w)
    y2 = (1.0 - frac) * y + frac * y[perm]
    return out, y2, 1.0 - frac


def erase_box(h: int, w: int, rng: np.random.Generator, area_range=(0.02, 0.33),
              log_aspect=(math.log(0.3), math.log(1 / 0.3))):
    """Rectangle whose area fraction is uniform in ``area_range``.

    The aspect ratio is log-uniform, restricted so the rectangle always fits.
    """
    frac = rng.uniform(*area_range)
    lo = max(log_aspect[0], math.log(frac))
    hi = min(log_aspect[1], -math.log(frac))
    aspect = math.exp(rng.uniform(lo, hi))
    eh = min(h, max(1, int(round(h * math.sqrt(frac * aspect)))))
    ew = min(w, max(1, int(round(w * math.sqrt(frac / aspect)))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    return top, top + eh, left, left + ew


def random_erase(x: np.ndarray, prob: float, rng: np.random.Generator, return_boxes: bool = False):
    """Per image, with probability ``prob``, overwrite one rectangle with N(0, 1) noise."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"erase probability must be in [0, 1], got {prob}")
    if prob == 0.0:
        return (x, [None] * len(x)) if return_boxes else x
    out = x.copy()
    n, c, h, w = x.shape
    boxes = []
    for i in range(n):
        if rng.random() >= prob:
            boxes.append(None)
            continue
        y0, y1, x0, x1 = erase_box(h, w, rng)
        out[i, :, y0:y1, x0:x1] = rng.standard_normal((c, y1 - y0, x1 - x0))
        boxes.append((y0, y1, x0, x1))
    return (out, boxes) if return_boxes else out


def color_jitter(x: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Reduced photometric stand-in for RandAugment (NOT the 14-op policy).

    Applies per-image brightness shift, contrast scale, per-channel gain and
    saturation blend, with strengths proportional to ``magnitude / 10``.
    """
    if magnitude <= 0:
        return x
    s = magnitude / 10.0
    n, c = x.shape[:2]
    out = x.astype(np.float64)
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = mean + (out - mean) * (1.0 + s * rng.uniform(-0.5, 0.5, (n, 1, 1, 1)))
    out = out + s * rng.uniform(-0.5, 0.5, (n, 1, 1, 1))
    out = out * (1.0 + s * rng.uniform(-0.3, 0.3, (n, c, 1, 1)))
    gray = out.mean(axis=1, keepdims=True)
    sat = 1.0 + s * rng.uniform(-0.5, 0.5, (n, 1, 1, 1))
    out = gray + (out - gray) * sat
    return out.astype(x.dtype)
