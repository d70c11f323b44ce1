"""Occupancy (BCE) and log-transformed l1 SDF losses with their gradients."""
from __future__ import annotations

import numpy as np

PROB_EPS = 1e-7


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"voxel set mismatch: {a.shape} vs {b.shape}")
    return a, b


def log_transform(x):
    """Odd-symmetric log compression ``sign(x) * ln(1 + |x|)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def occupancy_loss(pred_o, gt_occ) -> float:
    """Mean binary cross-entropy; probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p, y = _check_same(pred_o, gt_occ)
    if p.size == 0:
        return 0.0
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def occupancy_loss_grad(pred_o, gt_occ) -> np.ndarray:
    p, y = _check_same(pred_o, gt_occ)
    if p.size == 0:
        return np.zeros_like(p)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    g = (-y / pc + (1.0 - y) / (1.0 - pc)) / p.size
    return np.where(inside, g, 0.0)


def occupancy_logit_grad(pred_o, gt_occ) -> np.ndarray:
    """Gradient w.r.t. the pre-sigmoid logit, stable near saturation."""
    p, y = _check_same(pred_o, gt_occ)
    if p.size == 0:
        return np.zeros_like(p)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    return np.where(inside, (p - y) / p.size, 0.0)


def sdf_loss(pred_x, gt_x, mask=None) -> float:
    """Mean ``|T(pred) - T(gt)|`` over the masked voxels (all voxels when ``mask`` is None)."""
    p, g = _check_same(pred_x, gt_x)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != p.shape:
            raise ValueError(f"voxel set mismatch: mask {m.shape} vs {p.shape}")
        p, g = p[m], g[m]
    if p.size == 0:
        return 0.0
    return float(np.mean(np.abs(log_transform(p) - log_transform(g))))


def sdf_loss_grad(pred_x, gt_x, mask=None) -> np.ndarray:
    p, g = _check_same(pred_x, gt_x)
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return np.zeros_like(p)
    d = np.sign(log_transform(p) - log_transform(g)) / (1.0 + np.abs(p))
    return np.where(m, d / n, 0.0)
