"""Representation analysis: linear CKA between layers and effective rank of features."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graph import ModuleGraph
from .tensor import Tensor


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows are examples (or spatial positions), columns are channels."""

    values: np.ndarray
    model: str = ""
    layer: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"feature matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"feature matrix {self.model}:{self.layer} has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple:
        return self.values.shape


def _matrix(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else FeatureMatrix(x).values


def linear_cka(x, y) -> float:
    """||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F) on column-centred features."""
    a, b = _matrix(x), _matrix(y)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("CKA needs at least 2 rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    den = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(b.T @ a) ** 2 / den)


def default_tol(rows: int) -> float:
    return 1e-6 * np.sqrt(rows)


def effective_rank(x, abs_tol: Optional[float] = None) -> int:
    """Count of singular values strictly above an absolute threshold."""
    a = _matrix(x)
    tol = default_tol(a.shape[0]) if abs_tol is None else abs_tol
    if tol <= 0:
        raise ValueError(f"abs_tol must be positive, got {tol}")
    try:
        s = np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"SVD did not converge: {exc}") from exc
    return int((s > tol).sum())


def to_feature_matrix(activation: np.ndarray, model: str = "", layer: str = "") -> FeatureMatrix:
    """(N, C, H, W) -> (N*H*W, C); (N, C) stays as is."""
    a = np.asarray(activation)
    if a.ndim == 4:
        a = a.transpose(0, 2, 3, 1).reshape(-1, a.shape[1])
    elif a.ndim != 2:
        raise ValueError(f"cannot flatten activation of shape {a.shape}")
    return FeatureMatrix(a, model, layer)


def capture_features(graph: ModuleGraph, x: np.ndarray, layers: Sequence[str],
                     model: str = "") -> list[FeatureMatrix]:
    """Eval-mode activations of ``layers`` as feature matrices (unknown names raise)."""
    _, captured = graph.forward(Tensor(np.asarray(x, dtype=np.float32)), training=False,
                                capture=list(layers))
    return [to_feature_matrix(captured[name].data, model, name) for name in layers]


def cka_grid(xs: Sequence[FeatureMatrix], ys: Sequence[FeatureMatrix]) -> np.ndarray:
    return np.array([[linear_cka(a, b) for b in ys] for a in xs])


def cka_grid_csv(xs: Sequence[FeatureMatrix], ys: Sequence[FeatureMatrix]) -> str:
    grid = cka_grid(xs, ys)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_i", "layer_j", "cka"])
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            w.writerow([a.layer, b.layer, repr(float(grid[i, j]))])
    return buf.getvalue()


def rank_report_csv(feats: Sequence[FeatureMatrix], abs_tol: Optional[float] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "rows", "channels", "abs_tol", "effective_rank"])
    for f in feats:
        tol = default_tol(f.shape[0]) if abs_tol is None else abs_tol
        w.writerow([f.layer, f.shape[0], f.shape[1], repr(float(tol)), effective_rank(f, tol)])
    return buf.getvalue()
