"""Per-stage timing of the fragment pipeline and a sparse-convolution scaling sweep."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import assemble_fragments
from .nnops import SparseConvWeights, conv_forward
from .pipeline import FusionConfig, NetworkWeights, ReconState, extract_mesh, reconstruct_fragment
from .voxgrid import N_LEVELS, SparseVoxelGrid

STAGES = ["image_encode"] + [f"level{l}.{s}" for l in range(1, N_LEVELS + 1)
                             for s in ("unproj", "sparse_conv", "gru")] + ["meshing"]

_LABELS = {"image_encode": "Image encode", "meshing": "Meshing",
           "unproj": "unprojection", "sparse_conv": "sparse conv", "gru": "GRU fusion"}


def stage_label(stage: str) -> str:
    if "." in stage:
        lvl, s = stage.split(".")
        return f"Level {lvl[-1]} {_LABELS[s]}"
    return _LABELS[stage]


@dataclass
class StageTiming:
    """Milliseconds spent in each stage for one pass over a sequence."""

    stages: dict = field(default_factory=dict)
    total_ms: float = 0.0
    key_frames: int = 0

    @property
    def ms_per_keyframe(self) -> float:
        return self.total_ms / self.key_frames if self.key_frames else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ms_per_keyframe"] = self.ms_per_keyframe
        return d


def time_sequence(frames: Sequence, weights: NetworkWeights, cfg: FusionConfig, mesh_every: bool = True) -> StageTiming:
    timer: dict = {}
    start = time.perf_counter()
    state = ReconState.empty(cfg)
    key_frames = 0
    for frag in assemble_fragments(frames, cfg.n_views, cfg.t_max, cfg.r_max_deg, cfg.d_max,
                                   cfg.level_voxel_size(1), cfg.keyframe_mode):
        key_frames += len(frag.frames)
        reconstruct_fragment(frag, state, weights, cfg, timer)
        if mesh_every:
            t0 = time.perf_counter()
            extract_mesh(state, cfg)
            timer["meshing"] = timer.get("meshing", 0.0) + time.perf_counter() - t0
    total = time.perf_counter() - start
    stages = {s: 1000.0 * timer.get(s, 0.0) for s in STAGES}
    return StageTiming(stages, 1000.0 * total, key_frames)


def _summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    out = {"median_ms": float(np.median(v))}
    if len(v) > 1:
        q1, q3 = np.percentile(v, [25, 75])
        out["iqr_ms"] = float(q3 - q1)
    return out


def run_benchmark(frames: Sequence, weights: NetworkWeights, cfg: FusionConfig, repeats: int = 3,
                  mesh_every: bool = True) -> dict:
    """Median (and, for ``repeats > 1``, interquartile range) of every stage over repeated runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    frames = list(frames)
    runs = [time_sequence(frames, weights, cfg, mesh_every) for _ in range(repeats)]
    key_frames = runs[0].key_frames
    total = _summary([r.total_ms for r in runs])
    stages = {s: _summary([r.stages[s] for r in runs]) for s in STAGES}
    per_kf = {s: v["median_ms"] / key_frames if key_frames else 0.0 for s, v in stages.items()}
    return {
        "repeats": repeats,
        "key_frames": key_frames,
        "stages": stages,
        "stage_ms_per_keyframe": per_kf,
        "total": total,
        "ms_per_keyframe": total["median_ms"] / key_frames if key_frames else 0.0,
        "runs": [r.to_dict() for r in runs],
    }


def table_rows(report: dict) -> list:
    """Flat rows (stage, label, median, iqr, per key frame) for CSV export."""
    rows = []
    for s in STAGES:
        st = report["stages"][s]
        rows.append({"stage": s, "label": stage_label(s), "median_ms": st["median_ms"],
                     "iqr_ms": st.get("iqr_ms", ""), "ms_per_keyframe": report["stage_ms_per_keyframe"][s]})
    rows.append({"stage": "total", "label": "Total", "median_ms": report["total"]["median_ms"],
                 "iqr_ms": report["total"].get("iqr_ms", ""), "ms_per_keyframe": report["ms_per_keyframe"]})
    return rows


def sparse_conv_sweep(counts: Sequence[int] = (4096, 8192, 16384, 32768), density: float = 0.1,
                      channels: int = 16, repeats: int = 5, seed: int = 0) -> list:
    """Time one submanifold convolution on random grids whose occupied count follows ``counts``.

    The bounding cube grows with the count so the occupied fraction stays at ``density``.
    """
    rng = np.random.default_rng(seed)
    w = SparseConvWeights.init(rng, channels, channels)
    rows = []
    for n in counts:
        side = max(2, int(round((n / density) ** (1.0 / 3.0))))
        flat = rng.choice(side ** 3, size=min(n, side ** 3), replace=False)
        coords = np.stack(np.unravel_index(flat, (side,) * 3), axis=1)
        grid = SparseVoxelGrid(3, 0.04, (0.0, 0.0, 0.0), coords, rng.normal(size=(len(coords), channels)))
        nbr = grid.neighbor_table()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            conv_forward(grid.values, nbr, w)
            times.append(1000.0 * (time.perf_counter() - t0))
        rows.append({"occupied": len(coords), "side": side, **_summary(times)})
    return rows


def is_monotone(rows: Sequence[dict], key: str = "median_ms") -> bool:
    v = [r[key] for r in rows]
    return all(b >= a for a, b in zip(v, v[1:]))


def default_sweep_counts(base: Optional[int] = None) -> tuple:
    base = base or 4096
    return tuple(base * 2 ** i for i in range(4))
