"""3-D mesh metrics (acc/comp/prec/recall/F-score) and 2-D depth metrics, with report helpers."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .meshing import TriangleMesh, render_depth


class EmptyMeshError(ValueError):
    def __init__(self, side: str):
        super().__init__(f"{side} mesh is empty")
        self.side = side


@dataclass
class Metrics3D:
    acc: float
    comp: float
    prec: float
    recall: float
    fscore: float
    threshold: float


@dataclass
class Metrics2D:
    abs_rel: float
    abs_diff: float
    sq_rel: float
    rmse: float
    rmse_log: float
    sc_inv: float
    delta_125: float
    comp: float


def fscore(prec: float, recall: float) -> float:
    return 2.0 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points distributed uniformly by area over the mesh."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices.astype(np.float64)[mesh.triangles]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    total = area.sum()
    if total <= 0:
        # degenerate mesh: fall back to its vertices
        return mesh.vertices.astype(np.float64)[rng.integers(len(mesh.vertices), size=n)]
    tri = rng.choice(len(area), size=n, p=area / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = v[tri, 0], v[tri, 1], v[tri, 2]
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def eval_3d(pred: TriangleMesh, gt: TriangleMesh, threshold: float = 0.05, n_samples: int = 200_000,
            seed: int = 0, region=None) -> Metrics3D:
    """Sampled two-sided mesh distances.  ``region=(lo, hi)`` first crops the prediction to the box
    the ground truth was built in, so geometry outside the annotated volume is not counted."""
    if region is not None:
        pred = pred.cropped(*region)
    if pred.is_empty:
        raise EmptyMeshError("pred")
    if gt.is_empty:
        raise EmptyMeshError("gt")
    sp = sample_surface(pred, n_samples, seed)
    sg = sample_surface(gt, n_samples, seed)
    d_pred = cKDTree(sg).query(sp)[0]   # pred -> gt (accuracy)
    d_gt = cKDTree(sp).query(sg)[0]     # gt -> pred (completeness)
    prec = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    return Metrics3D(float(d_pred.mean()), float(d_gt.mean()), prec, recall, fscore(prec, recall), threshold)


def eval_2d(pred_depth: np.ndarray, gt_depth: np.ndarray, min_depth: float = 1e-3) -> Metrics2D:
    pred = np.asarray(pred_depth, dtype=np.float64)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    gt_valid = gt > min_depth
    valid = gt_valid & (pred > 0)
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = pred[valid], gt[valid]
    diff = p - g
    d = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    return Metrics2D(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        abs_diff=float(np.mean(np.abs(diff))),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean(d ** 2))),
        sc_inv=float(np.sqrt(max(np.mean(d ** 2) - np.mean(d) ** 2, 0.0))),
        delta_125=float(np.mean(ratio < 1.25)),
        comp=float(valid.sum() / gt_valid.sum()),
    )


def mean_metrics2d(items: Sequence[Metrics2D]) -> Metrics2D:
    keys = Metrics2D.__dataclass_fields__.keys()
    return Metrics2D(**{k: float(np.mean([getattr(m, k) for m in items])) for k in keys})


def eval_sequence(recon: TriangleMesh, gt: TriangleMesh, frames: Sequence, interval: int = 10,
                  threshold: float = 0.05, n_samples: int = 200_000, seed: int = 0,
                  min_depth: float = 1e-3, region=None) -> dict:
    """Render ``recon`` at every ``interval``-th frame and score it against that frame's depth.

    At least one frame (the first) is always evaluated.  Frames whose rendering has no
    valid pixel overlap are reported but excluded from the means.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    picked = list(frames)[::interval] or list(frames)[:1]
    per_frame, skipped = [], []
    for f in picked:
        gt_depth = f.depth if f.depth is not None else f.image
        pred_depth = render_depth(recon, f.pose, f.intrinsics)
        try:
            m = eval_2d(pred_depth, gt_depth, min_depth)
        except ValueError:
            skipped.append(f.index)
            continue
        per_frame.append({"index": f.index, **asdict(m)})
    m3 = eval_3d(recon, gt, threshold, n_samples, seed, region)
    mean2d = mean_metrics2d([Metrics2D(**{k: v for k, v in r.items() if k != "index"}) for r in per_frame]) \
        if per_frame else None
    return {
        "metrics_3d": asdict(m3),
        "metrics_2d": asdict(mean2d) if mean2d else None,
        "n_frames_evaluated": len(picked),
        "frames_without_overlap": skipped,
        "interval": interval,
        "per_frame": per_frame,
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(rows: Sequence[dict], path, fieldnames: Optional[Sequence[str]] = None) -> None:
    rows = list(rows)
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
