"""Coarse-to-fine fragment reconstruction with recurrent feature fusion, global integration and toy training."""
from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import losses
from .camera import Fbv, Fragment, KeyframeMode, assemble_fragments
from .featvol import (DEFAULT_CHANNELS, DEFAULT_STRIDES, build_feature_volume, extract_features, fbv_coords,
                      init_stub_weights, stub_weight_names)
from .losses import occupancy_loss, occupancy_logit_grad, sdf_loss, sdf_loss_grad  # noqa: F401  (re-export)
from .meshing import TriangleMesh, marching_cubes
from .nnops import (GruWeights, MlpWeights, SparseConvWeights, conv_backward, conv_forward, gru_backward,
                    gru_forward, load_weights, mlp_backward, mlp_forward_array, save_weights)
from .voxgrid import N_LEVELS, PayloadKind, SparseVoxelGrid, replace_region, sparsify, upsample2x

W_MAX = 255.0


class FusionMethod(str, enum.Enum):
    GRU = "gru"
    AVERAGE = "avg"
    LINEAR = "linear"


class FusionArea(str, enum.Enum):
    OCC = "occ"
    FBV = "fbv"


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass
class FusionConfig:
    fusion_method: FusionMethod = FusionMethod.GRU
    fusion_area: FusionArea = FusionArea.FBV
    n_views: int = 9
    theta: float = 0.5
    lam: float = 0.12
    d_max: float = 3.0
    t_max: float = 0.1
    r_max_deg: float = 15.0
    voxel_size: float = 0.04
    channels: tuple = DEFAULT_CHANNELS
    geo_channels: tuple = (16, 16, 16)
    mlp_hidden: int = 16
    strides: tuple = DEFAULT_STRIDES
    depth_residual: bool = True
    keyframe_mode: KeyframeMode = KeyframeMode.CONJUNCTION

    def __post_init__(self):
        self.fusion_method = FusionMethod(self.fusion_method)
        self.fusion_area = FusionArea(self.fusion_area)
        self.keyframe_mode = KeyframeMode(self.keyframe_mode)
        self.channels = tuple(int(c) for c in self.channels)
        self.geo_channels = tuple(int(c) for c in self.geo_channels)
        self.strides = tuple(int(s) for s in self.strides)
        if not 0.0 < self.theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        if self.lam <= 0:
            raise ConfigError("lambda must be positive")
        if self.n_views < 2:
            raise ConfigError("n_views must be >= 2")
        if self.voxel_size <= 0 or self.d_max <= 0:
            raise ConfigError("voxel_size and d_max must be positive")
        for name in ("channels", "geo_channels", "strides"):
            if len(getattr(self, name)) != N_LEVELS:
                raise ConfigError(f"{name} needs one entry per level")

    def level_voxel_size(self, level: int) -> float:
        return self.voxel_size * 2 ** (N_LEVELS - level)

    def net_input_channels(self, level: int) -> int:
        return self.channels[level - 1] + int(self.depth_residual) + 1 + (2 if level > 1 else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion_method"] = self.fusion_method.value
        d["fusion_area"] = self.fusion_area.value
        d["keyframe_mode"] = self.keyframe_mode.value
        for k in ("channels", "geo_channels", "strides"):
            d[k] = list(d[k])
        return d


# config-file key -> (field, parser)
def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.replace(",", " ").split())


_CONFIG_KEYS = {
    "voxel_size": ("voxel_size", float),
    "lambda": ("lam", float),
    "d_max": ("d_max", float),
    "R_max_deg": ("r_max_deg", float),
    "t_max": ("t_max", float),
    "theta": ("theta", float),
    "n_views": ("n_views", int),
    "fusion": ("fusion_method", lambda s: FusionMethod(s.strip().lower())),
    "area": ("fusion_area", lambda s: FusionArea(s.strip().lower())),
    "channels": ("channels", _ints),
    "geo_channels": ("geo_channels", _ints),
    "mlp_hidden": ("mlp_hidden", int),
    "strides": ("strides", _ints),
    "depth_residual": ("depth_residual", _bool),
    "keyframe_mode": ("keyframe_mode", lambda s: KeyframeMode(s.strip().lower())),
}


def parse_config(text: str, base: Optional[FusionConfig] = None) -> FusionConfig:
    """``key = value`` lines; ``#`` starts a comment.  Unknown keys are rejected."""
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        name, conv = _CONFIG_KEYS[key]
        try:
            updates[name] = conv(value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    return replace(base or FusionConfig(), **updates)


def load_config(path, base: Optional[FusionConfig] = None) -> FusionConfig:
    with open(path) as fh:
        return parse_config(fh.read(), base)


def format_config(cfg: FusionConfig) -> str:
    rev = {v[0]: k for k, v in _CONFIG_KEYS.items()}
    d = cfg.to_dict()
    lines = []
    for name, key in rev.items():
        v = d[name]
        if isinstance(v, list):
            v = ",".join(str(a) for a in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# weights

@dataclass
class LevelWeights:
    geo0: SparseConvWeights
    geo1: SparseConvWeights
    gru: GruWeights
    mlp: MlpWeights


@dataclass
class NetworkWeights:
    stub: dict
    levels: list = field(default_factory=list)

    @classmethod
    def init(cls, cfg: FusionConfig, seed: int = 0) -> "NetworkWeights":
        rng = np.random.default_rng(seed)
        levels = []
        for l in range(1, N_LEVELS + 1):
            cg = cfg.geo_channels[l - 1]
            levels.append(LevelWeights(
                SparseConvWeights.init(rng, cfg.net_input_channels(l), cg),
                SparseConvWeights.init(rng, cg, cg),
                GruWeights.init(rng, cg, cg),
                MlpWeights.init(rng, (cg, cfg.mlp_hidden, 2)),
            ))
        return cls(init_stub_weights(cfg.channels, seed), levels)

    def to_tensors(self) -> dict:
        out = {k: self.stub[k] for k in stub_weight_names(len(self.levels))}
        for l, lw in enumerate(self.levels, start=1):
            for i, c in enumerate((lw.geo0, lw.geo1)):
                out[f"level{l}.geo_conv{i}.kernel"] = c.kernel
                out[f"level{l}.geo_conv{i}.bias"] = c.bias
            for gate in ("W_z", "W_r", "W_h"):
                c = getattr(lw.gru, gate)
                out[f"level{l}.gru.{gate}.kernel"] = c.kernel
                out[f"level{l}.gru.{gate}.bias"] = c.bias
            for i, (w, b) in enumerate(lw.mlp.layers):
                out[f"level{l}.mlp.layer{i}.weight"] = w
                out[f"level{l}.mlp.layer{i}.bias"] = b
        return out

    @classmethod
    def from_tensors(cls, t: dict) -> "NetworkWeights":
        levels = []
        for l in range(1, N_LEVELS + 1):
            conv = lambda p: SparseConvWeights(t[f"{p}.kernel"], t[f"{p}.bias"])  # noqa: E731
            layers, i = [], 0
            while f"level{l}.mlp.layer{i}.weight" in t:
                layers.append((t[f"level{l}.mlp.layer{i}.weight"], t[f"level{l}.mlp.layer{i}.bias"]))
                i += 1
            levels.append(LevelWeights(
                conv(f"level{l}.geo_conv0"), conv(f"level{l}.geo_conv1"),
                GruWeights(*(conv(f"level{l}.gru.{g}") for g in ("W_z", "W_r", "W_h"))),
                MlpWeights(layers),
            ))
        return cls({k: t[k] for k in stub_weight_names()}, levels)

    def save(self, path) -> None:
        save_weights(self.to_tensors(), path)

    @classmethod
    def load(cls, path) -> "NetworkWeights":
        required = stub_weight_names() + [
            f"level{l}.{n}" for l in range(1, N_LEVELS + 1)
            for n in ("geo_conv0.kernel", "geo_conv0.bias", "geo_conv1.kernel", "geo_conv1.bias",
                      "gru.W_z.kernel", "gru.W_z.bias", "gru.W_r.kernel", "gru.W_r.bias",
                      "gru.W_h.kernel", "gru.W_h.bias", "mlp.layer0.weight", "mlp.layer0.bias")]
        return cls.from_tensors(load_weights(path, required=required))

    def copy(self) -> "NetworkWeights":
        return NetworkWeights.from_tensors({k: np.array(v, copy=True) for k, v in self.to_tensors().items()})


# ---------------------------------------------------------------------------
# state

@dataclass
class ReconState:
    """Global hidden grids per level, the global level-3 TSDF with weights and update stamps."""

    hidden: list
    tsdf: SparseVoxelGrid
    weight: SparseVoxelGrid
    stamp: SparseVoxelGrid
    t: int = 0

    @classmethod
    def empty(cls, cfg: FusionConfig) -> "ReconState":
        vs = cfg.level_voxel_size(N_LEVELS)
        extra = 1 if cfg.fusion_method is FusionMethod.AVERAGE else 0
        hidden = [SparseVoxelGrid(l, cfg.level_voxel_size(l), channels=cfg.geo_channels[l - 1] + extra)
                  for l in range(1, N_LEVELS + 1)]
        return cls(hidden,
                   SparseVoxelGrid(N_LEVELS, vs, kind=PayloadKind.TSDF),
                   SparseVoxelGrid(N_LEVELS, vs, channels=1),
                   SparseVoxelGrid(N_LEVELS, vs, channels=1))


# ---------------------------------------------------------------------------
# per-level network

def _relu(a):
    return np.maximum(a, 0.0)


def level_forward(x_in: np.ndarray, nbr: np.ndarray, lw: LevelWeights, method: FusionMethod,
                  h_prev: Optional[np.ndarray] = None, count: Optional[np.ndarray] = None):
    """Geometry convs, feature fusion and the MLP head on one level's voxels.

    Returns ``(h, logit, o, x, cache)``.  ``h_prev`` is the gathered hidden state (zeros where
    unseen); ``count`` is the running-average count used by the averaging ablation.
    """
    a0, c0 = conv_forward(x_in, nbr, lw.geo0)
    r0 = _relu(a0)
    a1, c1 = conv_forward(r0, nbr, lw.geo1)
    g = _relu(a1)
    cg = None
    if method is FusionMethod.GRU:
        hp = np.zeros((len(g), lw.gru.c_hidden)) if h_prev is None else h_prev
        h, cg = gru_forward(hp, g, nbr, lw.gru)
    elif method is FusionMethod.AVERAGE:
        if h_prev is None:
            h = g
        else:
            if h_prev.shape != g.shape:
                raise ValueError("averaging fusion needs hidden width equal to the geometry width")
            cnt = count[:, None]
            h = (cnt * h_prev + g) / (cnt + 1.0)
    else:
        h = g
    (logit, raw, o, x), cm = mlp_forward_array(h, lw.mlp)
    return h, logit, o, x, (a0, c0, a1, c1, cg, cm)


def level_backward(cache, d_logit: np.ndarray, d_x: np.ndarray, method: FusionMethod) -> LevelWeights:
    """Parameter gradients of :func:`level_forward` for the GRU or pass-through fusion paths."""
    a0, c0, a1, c1, cg, cm = cache
    dh, mlp_grads = mlp_backward(cm, d_x=d_x, d_logit=d_logit)
    if method is FusionMethod.GRU:
        _, dg, gg = gru_backward(cg, dh)
        gru_g = GruWeights(*(SparseConvWeights(*gg[k]) for k in ("W_z", "W_r", "W_h")))
    elif method is FusionMethod.LINEAR:
        dg, gru_g = dh, None
    else:
        raise ValueError("gradients are only defined for the GRU and linear paths")
    da1 = dg * (a1 > 0)
    dr0, dk1, db1 = conv_backward(c1, da1)
    da0 = dr0 * (a0 > 0)
    _, dk0, db0 = conv_backward(c0, da0)
    return LevelWeights(SparseConvWeights(dk0, db0), SparseConvWeights(dk1, db1), gru_g, MlpWeights(mlp_grads))


def _tick(timer, key, t0):
    if timer is not None:
        timer[key] = timer.get(key, 0.0) + time.perf_counter() - t0
    return time.perf_counter()


def _gather(grid: SparseVoxelGrid, coords: np.ndarray, width: int) -> tuple:
    out = np.zeros((len(coords), width))
    idx = grid.lookup(coords) if len(grid) else np.full(len(coords), -1)
    hit = idx >= 0
    out[hit] = grid.values[idx[hit], :width]
    return out, idx


def reconstruct_fragment(fragment: Fragment, state: ReconState, weights: NetworkWeights, cfg: FusionConfig,
                         timer: Optional[dict] = None) -> SparseVoxelGrid:
    """Predict the fragment's sparse level-3 TSDF, update the hidden state and integrate it globally."""
    state.t += 1
    t0 = time.perf_counter()
    pyramids = [extract_features(f, weights.stub, cfg.strides, cfg.channels) for f in fragment.frames]
    t0 = _tick(timer, "image_encode", t0)
    n_views = len(fragment.frames)
    survivors = None
    for l in range(1, N_LEVELS + 1):
        vs = cfg.level_voxel_size(l)
        lw = weights.levels[l - 1]
        if l == 1:
            cand = fbv_coords(fragment.fbv, 1, vs)
            up = None
        else:
            up = upsample2x(survivors)
            cand = up.coords
        fv = build_feature_volume(fragment, pyramids, l, cand, cfg.d_max, vs, cfg.depth_residual, cfg.lam)
        t0 = _tick(timer, f"level{l}.unproj", t0)
        if len(fv) == 0:
            return SparseVoxelGrid(N_LEVELS, cfg.level_voxel_size(N_LEVELS), kind=PayloadKind.TSDF)
        parts = [fv.values[:, :-1], fv.values[:, -1:] / n_views]
        if up is not None:
            parts.append(up.values[up.lookup(fv.coords)])
        x_in = np.concatenate(parts, axis=1)
        nbr = fv.neighbor_table()
        t0 = _tick(timer, f"level{l}.sparse_conv", t0)

        hidden = state.hidden[l - 1]
        cg = lw.gru.c_hidden if cfg.fusion_method is FusionMethod.GRU else cfg.geo_channels[l - 1]
        h_prev = count = None
        if cfg.fusion_method is not FusionMethod.LINEAR:
            gathered, idx = _gather(hidden, fv.coords, hidden.channels)
            h_prev = gathered[:, :cg]
            if cfg.fusion_method is FusionMethod.AVERAGE:
                count = gathered[:, cg]
                h_prev = np.where((idx >= 0)[:, None], h_prev, 0.0)
        h, _, o, x, _ = level_forward(x_in, nbr, lw, cfg.fusion_method, h_prev, count)
        if cfg.fusion_method is not FusionMethod.LINEAR:
            mask = np.ones(len(fv), dtype=bool) if cfg.fusion_area is FusionArea.FBV else o >= cfg.theta
            vals = h if cfg.fusion_method is FusionMethod.GRU else np.concatenate([h, (count + 1)[:, None]], axis=1)
            sub = fv.subset(mask)
            replace_region(hidden, sub.with_values(vals[mask]))
        t0 = _tick(timer, f"level{l}.gru", t0)

        s_l = fv.with_values(np.stack([o, x], axis=1), kind=PayloadKind.TSDF)
        survivors = sparsify(s_l, cfg.theta)
        if len(survivors) == 0:
            return survivors if l == N_LEVELS else SparseVoxelGrid(N_LEVELS, cfg.level_voxel_size(N_LEVELS),
                                                                   kind=PayloadKind.TSDF)
    integrate_global(survivors, state, cfg)
    return survivors


def integrate_global(local: SparseVoxelGrid, state: ReconState, cfg: Optional[FusionConfig] = None) -> None:
    """Write a fragment's level-3 TSDF into the global volume.

    Replacement for the GRU/averaging modes; a running weighted average for the linear mode.
    """
    if local.level != N_LEVELS:
        raise ValueError("only level-3 volumes can be integrated")
    shift = state.tsdf.lattice_offset(local)
    if len(local) == 0:
        return
    coords = local.coords + shift
    linear = cfg is not None and cfg.fusion_method is FusionMethod.LINEAR
    stamp = state.stamp.like(coords, np.full(len(coords), float(state.t)))
    if linear:
        old, idx = _gather(state.tsdf, coords, 2)
        w, _ = _gather(state.weight, coords, 1)
        w = w[:, 0]
        vals = (old * w[:, None] + local.values) / (w[:, None] + 1.0)
        replace_region(state.tsdf, state.tsdf.like(coords, vals, kind=PayloadKind.TSDF))
        replace_region(state.weight, state.weight.like(coords, np.minimum(w + 1.0, W_MAX)))
    else:
        replace_region(state.tsdf, state.tsdf.like(coords, local.values, kind=PayloadKind.TSDF))
        replace_region(state.weight, state.weight.like(coords, np.ones(len(coords))))
    replace_region(state.stamp, stamp)


def extract_mesh(state: ReconState, cfg: Optional[FusionConfig] = None) -> TriangleMesh:
    return marching_cubes(state.tsdf, theta=cfg.theta if cfg else 0.5)


def reconstruct_sequence(frames: Iterable, weights: NetworkWeights, cfg: FusionConfig,
                         on_fragment: Optional[Callable] = None, timer: Optional[dict] = None) -> ReconState:
    """Assemble fragments from a frame stream and reconstruct them in order."""
    state = ReconState.empty(cfg)
    for frag in assemble_fragments(frames, cfg.n_views, cfg.t_max, cfg.r_max_deg, cfg.d_max,
                                   cfg.level_voxel_size(1), cfg.keyframe_mode):
        out = reconstruct_fragment(frag, state, weights, cfg, timer)
        if on_fragment is not None:
            on_fragment(frag, out, state)
    return state


# ---------------------------------------------------------------------------
# supervision

def _sdf_fn(oracle) -> Callable:
    if callable(oracle):
        return oracle
    from .synth import scene_sdf
    return lambda p: scene_sdf(oracle, p)


def ground_truth_at(oracle, coords: np.ndarray, voxel_size: float, lam: float = 0.12) -> tuple:
    """``(occ, x)`` at voxel centres: occupied iff ``|sdf| < lam``; ``x = clamp(sdf / lam)``."""
    sdf = np.asarray(_sdf_fn(oracle)((np.asarray(coords) + 0.5) * voxel_size), dtype=np.float64)
    return (np.abs(sdf) < lam).astype(np.float64), np.clip(sdf / lam, -1.0, 1.0)


def ground_truth_volume(oracle, fbv: Fbv, level: int, lam: float = 0.12, voxel_size: Optional[float] = None,
                        coords: Optional[np.ndarray] = None) -> SparseVoxelGrid:
    """GT ``(occ, x)`` on the FBV lattice of a level (or on the given coordinates)."""
    vs = voxel_size or 0.04 * 2 ** (N_LEVELS - level)
    if coords is None:
        coords = fbv_coords(fbv, level, vs)
    occ, x = ground_truth_at(oracle, coords, vs, lam)
    return SparseVoxelGrid(level, vs, (0.0, 0.0, 0.0), coords, np.stack([occ, x], axis=1), kind=PayloadKind.TSDF)


@dataclass
class _LevelBatch:
    x_static: np.ndarray
    nbr: np.ndarray
    parent: Optional[np.ndarray]
    occ: np.ndarray
    x_gt: np.ndarray


def prepare_training_fragment(fragment: Fragment, oracle, weights: NetworkWeights, cfg: FusionConfig) -> list:
    """Teacher-forced per-level inputs: level-l candidates are children of GT-occupied level-(l-1) cells."""
    pyramids = [extract_features(f, weights.stub, cfg.strides, cfg.channels) for f in fragment.frames]
    n_views = len(fragment.frames)
    batches, prev = [], None
    for l in range(1, N_LEVELS + 1):
        vs = cfg.level_voxel_size(l)
        if l == 1:
            cand = fbv_coords(fragment.fbv, 1, vs)
        else:
            occupied = prev.coords[prev_occ > 0]
            cand = upsample2x(prev.like(occupied, np.zeros((len(occupied), 1)))).coords
        fv = build_feature_volume(fragment, pyramids, l, cand, cfg.d_max, vs, cfg.depth_residual, cfg.lam)
        occ, x_gt = ground_truth_at(oracle, fv.coords, vs, cfg.lam)
        parent = prev.lookup(fv.coords // 2) if prev is not None else None
        batches.append(_LevelBatch(np.concatenate([fv.values[:, :-1], fv.values[:, -1:] / n_views], axis=1),
                                   fv.neighbor_table(), parent, occ, x_gt))
        prev, prev_occ = fv, occ
    return batches


def _add_scaled(w: LevelWeights, g: LevelWeights, lr: float) -> None:
    for name in ("geo0", "geo1"):
        a, b = getattr(w, name), getattr(g, name)
        a.kernel -= lr * b.kernel
        a.bias -= lr * b.bias
    if g.gru is not None:
        for gate in ("W_z", "W_r", "W_h"):
            a, b = getattr(w.gru, gate), getattr(g.gru, gate)
            a.kernel -= lr * b.kernel
            a.bias -= lr * b.bias
    w.mlp.layers = [(wa - lr * wb, ba - lr * bb) for (wa, ba), (wb, bb) in zip(w.mlp.layers, g.mlp.layers)]


def training_step(batches: Sequence[list], weights: NetworkWeights, cfg: FusionConfig, lr: float) -> float:
    """One gradient-descent step on BCE + log-l1 summed over levels (and averaged over fragments)."""
    method = FusionMethod.LINEAR if cfg.fusion_method is FusionMethod.LINEAR else FusionMethod.GRU
    total = 0.0
    grads = []
    for frag_batches in batches:
        prev_ox = None
        for l, b in enumerate(frag_batches, start=1):
            lw = weights.levels[l - 1]
            x_in = b.x_static if prev_ox is None else np.concatenate([b.x_static, prev_ox[b.parent]], axis=1)
            _, logit, o, x, cache = level_forward(x_in, b.nbr, lw, method)
            total += occupancy_loss(o, b.occ) + sdf_loss(x, b.x_gt, mask=b.occ > 0)
            g = level_backward(cache, occupancy_logit_grad(o, b.occ), sdf_loss_grad(x, b.x_gt, b.occ > 0), method)
            grads.append((l, g))
            prev_ox = np.stack([o, x], axis=1)  # detached parent prediction
    scale = 1.0 / max(len(batches), 1)
    if lr != 0.0:
        for l, g in grads:
            _add_scaled(weights.levels[l - 1], g, lr * scale)
    return total * scale


def train_toy(fragments: Sequence[tuple], weights: NetworkWeights, cfg: FusionConfig, steps: int = 500,
              lr: float = 0.05, callback: Optional[Callable] = None) -> list:
    """Plain gradient descent over ``(fragment, sdf_oracle)`` pairs; returns the per-step total loss.

    The loss recorded for step ``i`` is the one evaluated before that step's update.  The image
    backbone stays fixed.
    """
    batches = [prepare_training_fragment(f, oracle, weights, cfg) for f, oracle in fragments]
    history = []
    for step in range(steps):
        loss = training_step(batches, weights, cfg, lr)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return history


__all__ = [
    "FusionMethod", "FusionArea", "FusionConfig", "ConfigError", "TrainingDivergedError", "parse_config",
    "load_config", "format_config", "LevelWeights", "NetworkWeights", "ReconState", "level_forward",
    "level_backward", "reconstruct_fragment", "integrate_global", "extract_mesh", "reconstruct_sequence",
    "ground_truth_at", "ground_truth_volume", "prepare_training_fragment", "training_step", "train_toy",
    "occupancy_loss", "sdf_loss", "losses",
]
