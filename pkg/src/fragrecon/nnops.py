"""Sparse 3-D convolution, MLP head and convolutional GRU with hand-written backward passes.

Every op has an array-level ``*_forward`` returning ``(output, cache)`` and a matching
``*_backward(cache, upstream)``; the grid-level wrappers (:func:`sparse_conv3d`,
:func:`gru_cell`, :func:`mlp_forward`) are what the pipeline calls at inference time.

Convolutions use submanifold semantics: output sites equal input sites and absent
neighbours contribute zero.  ``out[c] = bias + sum_o kernel[o] . in[c + o]`` over the 27
offsets ``o`` in ``OFFSETS_27`` order.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses
from .voxgrid import OFFSETS_27, SparseVoxelGrid, TsdfVoxel, concat_channels

_MIRROR = np.arange(26, -1, -1)


def sigmoid(a):
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class SparseConvWeights:
    kernel: np.ndarray  # [3, 3, 3, C_in, C_out]
    bias: np.ndarray    # [C_out]

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.kernel.ndim != 5 or self.kernel.shape[:3] != (3, 3, 3):
            raise ValueError(f"kernel must have shape [3,3,3,C_in,C_out], got {self.kernel.shape}")
        if self.bias.shape[0] != self.kernel.shape[4]:
            raise ValueError("bias length must equal C_out")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[3]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[4]

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, gain: float = 2.0) -> "SparseConvWeights":
        std = np.sqrt(gain / (27 * c_in))
        k = rng.normal(0.0, std, size=(3, 3, 3, c_in, c_out)).astype(np.float32)
        return cls(k, np.zeros(c_out, dtype=np.float32))

    @classmethod
    def identity(cls, channels: int) -> "SparseConvWeights":
        k = np.zeros((3, 3, 3, channels, channels))
        k[1, 1, 1] = np.eye(channels)
        return cls(k, np.zeros(channels))


@dataclass
class MlpWeights:
    """Dense layers ``(weight [in, out], bias [out])``; ReLU between layers, 2 outputs at the end."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64).reshape(-1))
                       for w, b in self.layers]
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("MLP layer dimensions do not chain")
        if self.layers and self.layers[-1][0].shape[1] != 2:
            raise ValueError("final MLP layer must emit 2 values (occupancy logit, raw sdf)")

    @property
    def c_in(self) -> int:
        return self.layers[0][0].shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dims) -> "MlpWeights":
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            gain = 2.0 if i < len(dims) - 2 else 1.0
            w = rng.normal(0.0, np.sqrt(gain / a), size=(a, b)).astype(np.float32)
            layers.append((w, np.zeros(b, dtype=np.float32)))
        return cls(layers)


@dataclass
class GruWeights:
    W_z: SparseConvWeights
    W_r: SparseConvWeights
    W_h: SparseConvWeights

    def __post_init__(self):
        shapes = {(w.c_in, w.c_out) for w in (self.W_z, self.W_r, self.W_h)}
        if len(shapes) != 1:
            raise ValueError("W_z, W_r and W_h must share input/output channel counts")
        if self.W_z.c_in <= self.W_z.c_out:
            raise ValueError("GRU input channels must be C_hidden + C_geo")

    @property
    def c_hidden(self) -> int:
        return self.W_z.c_out

    @property
    def c_geo(self) -> int:
        return self.W_z.c_in - self.W_z.c_out

    @classmethod
    def init(cls, rng: np.random.Generator, c_hidden: int, c_geo: int) -> "GruWeights":
        return cls(*(SparseConvWeights.init(rng, c_hidden + c_geo, c_hidden, gain=1.0) for _ in range(3)))


# ---------------------------------------------------------------------------
# sparse convolution

def conv_forward(x: np.ndarray, nbr: np.ndarray, w: SparseConvWeights):
    """Array-level submanifold convolution; ``nbr`` comes from ``SparseVoxelGrid.neighbor_table``."""
    n = x.shape[0]
    if x.shape[1] != w.c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.c_in}")
    xp = np.vstack([x, np.zeros((1, x.shape[1]))])
    k = w.kernel.reshape(27, w.c_in, w.c_out)
    out = np.empty((n, w.c_out))
    out[:] = w.bias
    for o in range(27):
        col = nbr[:, o]
        if o != 13 and np.all(col == n):
            continue
        out += xp[col] @ k[o]
    return out, (xp, nbr, w)


def conv_backward(cache, dy: np.ndarray):
    """Gradients ``(dx, dkernel, dbias)`` of :func:`conv_forward`."""
    xp, nbr, w = cache
    n = nbr.shape[0]
    k = w.kernel.reshape(27, w.c_in, w.c_out)
    dyp = np.vstack([dy, np.zeros((1, dy.shape[1]))])
    dk = np.zeros_like(k)
    dx = np.zeros((n, w.c_in))
    for o in range(27):
        col = nbr[:, o]
        if o != 13 and np.all(col == n):
            continue
        dk[o] = xp[col].T @ dy
        # x[c] feeds out[c - o]; that site sits at the mirrored offset of c
        dx += dyp[nbr[:, _MIRROR[o]]] @ k[o].T
    return dx, dk.reshape(w.kernel.shape), dy.sum(axis=0)


def sparse_conv3d(grid: SparseVoxelGrid, w: SparseConvWeights) -> SparseVoxelGrid:
    if grid.channels != w.c_in:
        raise ValueError(f"channel mismatch: grid has {grid.channels}, kernel expects {w.c_in}")
    out, _ = conv_forward(grid.values, grid.neighbor_table(), w)
    return grid.with_values(out)


# ---------------------------------------------------------------------------
# MLP head

def mlp_forward_array(x: np.ndarray, w: MlpWeights):
    """Returns ``(logit, raw, o, sdf)`` each of shape (n,), plus the cache for backward."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != w.c_in:
        raise ValueError(f"dimension mismatch: features have {x.shape[1]}, MLP expects {w.c_in}")
    acts = [x]
    h = x
    for i, (wm, b) in enumerate(w.layers):
        h = h @ wm + b
        if i < len(w.layers) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    logit, raw = h[:, 0], h[:, 1]
    o, sdf = sigmoid(logit), np.tanh(raw)
    return (logit, raw, o, sdf), (acts, w, o, sdf)


def mlp_backward(cache, d_o=None, d_x=None, d_logit=None):
    """Gradients w.r.t. the input features and each layer, given upstream grads on ``o``/``x``.

    ``d_logit`` may be supplied directly instead of ``d_o`` (stable BCE-with-logits path).
    """
    acts, w, o, sdf = cache
    n = acts[0].shape[0]
    g_logit = np.zeros(n) if d_logit is None else np.asarray(d_logit, dtype=np.float64).copy()
    if d_o is not None:
        g_logit += np.asarray(d_o) * o * (1.0 - o)
    g_raw = np.zeros(n) if d_x is None else np.asarray(d_x) * (1.0 - sdf ** 2)
    g = np.stack([g_logit, g_raw], axis=1)
    grads = [None] * len(w.layers)
    for i in range(len(w.layers) - 1, -1, -1):
        wm, _ = w.layers[i]
        if i < len(w.layers) - 1:
            g = g * (acts[i + 1] > 0)
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ wm.T
    return g, grads


def mlp_forward(features, w: MlpWeights):
    """Per-voxel MLP: a single vector gives a :class:`TsdfVoxel`, a batch gives ``(o, x)`` arrays."""
    features = np.asarray(features, dtype=np.float64)
    (_, _, o, x), _ = mlp_forward_array(features, w)
    if features.ndim == 1:
        return TsdfVoxel(float(o[0]), float(x[0]))
    return o, x


# ---------------------------------------------------------------------------
# convolutional GRU

def gru_forward(h_prev: np.ndarray, g: np.ndarray, nbr: np.ndarray, w: GruWeights):
    if h_prev.shape[1] != w.c_hidden or g.shape[1] != w.c_geo:
        raise ValueError(f"channel mismatch: hidden {h_prev.shape[1]}/{w.c_hidden}, "
                         f"geometry {g.shape[1]}/{w.c_geo}")
    a = np.concatenate([h_prev, g], axis=1)
    az, cz = conv_forward(a, nbr, w.W_z)
    ar, cr = conv_forward(a, nbr, w.W_r)
    z, r = sigmoid(az), sigmoid(ar)
    a2 = np.concatenate([r * h_prev, g], axis=1)
    ah, ch = conv_forward(a2, nbr, w.W_h)
    h_tilde = np.tanh(ah)
    h = (1.0 - z) * h_prev + z * h_tilde
    return h, (h_prev, z, r, h_tilde, cz, cr, ch, w)


def gru_backward(cache, dh: np.ndarray):
    """Returns ``(dh_prev, dg, {"W_z": (dk, db), "W_r": ..., "W_h": ...})``."""
    h_prev, z, r, h_tilde, cz, cr, ch, w = cache
    c = w.c_hidden
    dh_prev = dh * (1.0 - z)
    dz = dh * (h_tilde - h_prev)
    dah = dh * z * (1.0 - h_tilde ** 2)
    da2, dkh, dbh = conv_backward(ch, dah)
    d_rh = da2[:, :c]
    dg = da2[:, c:].copy()
    dh_prev += d_rh * r
    dar = d_rh * h_prev * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    da_z, dkz, dbz = conv_backward(cz, daz)
    da_r, dkr, dbr = conv_backward(cr, dar)
    dh_prev += da_z[:, :c] + da_r[:, :c]
    dg += da_z[:, c:] + da_r[:, c:]
    return dh_prev, dg, {"W_z": (dkz, dbz), "W_r": (dkr, dbr), "W_h": (dkh, dbh)}


def gather_hidden(g: SparseVoxelGrid, h_prev: Optional[SparseVoxelGrid], c_hidden: int) -> np.ndarray:
    """Hidden vectors at ``g``'s coordinates; cells missing from ``h_prev`` start at zero."""
    out = np.zeros((len(g), c_hidden))
    if h_prev is None or len(h_prev) == 0:
        return out
    shift = g.lattice_offset(h_prev)
    idx = h_prev.lookup(g.coords - shift)
    hit = idx >= 0
    out[hit] = h_prev.values[idx[hit], :c_hidden]
    return out


def gru_cell(g: SparseVoxelGrid, h_prev: Optional[SparseVoxelGrid], w: GruWeights) -> SparseVoxelGrid:
    """Fuse geometric features ``g`` into the hidden state; evaluated on ``g``'s coordinate set."""
    if g.channels != w.c_geo:
        raise ValueError(f"channel mismatch: geometry has {g.channels}, GRU expects {w.c_geo}")
    if h_prev is not None and len(h_prev) and h_prev.channels < w.c_hidden:
        raise ValueError(f"channel mismatch: hidden has {h_prev.channels}, GRU expects {w.c_hidden}")
    hp = gather_hidden(g, h_prev, w.c_hidden)
    h, _ = gru_forward(hp, g.values, g.neighbor_table(), w)
    return g.with_values(h)


def backward(op: str, inputs, upstream):
    """Single entry point for the hand-written backward passes.

    ``inputs`` is the cache returned by the op's forward (``conv_forward``, ``mlp_forward_array``,
    ``gru_forward``) or, for the losses, the ``(pred, gt[, mask])`` tuple.  ``upstream`` is the
    gradient of the objective w.r.t. the op's output; for ``mlp_forward`` pass ``(d_o, d_x)``.
    """
    if op == "sparse_conv3d":
        dy = np.asarray(upstream, dtype=np.float64)
        if dy.shape != (inputs[1].shape[0], inputs[2].c_out):
            raise ValueError(f"upstream gradient has shape {dy.shape}")
        return conv_backward(inputs, dy)
    if op == "mlp_forward":
        d_o, d_x = upstream
        n = inputs[0][0].shape[0]
        for g in (d_o, d_x):
            if g is not None and np.shape(g) != (n,):
                raise ValueError(f"upstream gradient has shape {np.shape(g)}, expected ({n},)")
        return mlp_backward(inputs, d_o=d_o, d_x=d_x)
    if op == "gru_cell":
        dh = np.asarray(upstream, dtype=np.float64)
        if dh.shape != inputs[0].shape:
            raise ValueError(f"upstream gradient has shape {dh.shape}")
        return gru_backward(inputs, dh)
    if op == "occupancy_loss":
        return float(upstream) * losses.occupancy_loss_grad(*inputs)
    if op == "sdf_loss":
        return float(upstream) * losses.sdf_loss_grad(*inputs)
    raise ValueError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# finite-difference checking

def grad_check(fn: Callable[[dict], float], params: dict, analytic: dict, h: float = 1e-5,
               n_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` maps the parameter dict to a scalar and is evaluated after in-place perturbation
    of one coordinate at a time.  ``n_coords`` limits the check to that many randomly chosen
    coordinates per tensor.  Relative error uses ``max(|analytic|, |numeric|, 1e-8)``.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        if ga.shape != flat.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        idx = np.arange(flat.size)
        if n_coords is not None and flat.size > n_coords:
            idx = rng.choice(flat.size, size=n_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(params)
            flat[i] = orig - h
            fm = fn(params)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
    return worst


def random_sparse_grid(rng: np.random.Generator, size: int, channels: int, density: float = 0.5,
                       level: int = 3) -> SparseVoxelGrid:
    """Random occupancy inside a ``size``^3 block with normally distributed features."""
    dense = np.stack(np.meshgrid(*(np.arange(size),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    keep = rng.random(len(dense)) < density
    if not keep.any():
        keep[rng.integers(len(dense))] = True
    coords = dense[keep]
    return SparseVoxelGrid(level, 0.04, (0.0, 0.0, 0.0), coords, rng.normal(size=(len(coords), channels)))


def make_instance(op: str, rng: np.random.Generator, **kw):
    """Random ``(fn, params, analytic)`` triple for :func:`grad_check`.

    The scalar objective is a random linear functional of the op's outputs, so every
    output channel carries gradient.
    """
    if op == "sparse_conv3d":
        size, cin, cout = kw.get("size", 4), kw.get("c_in", 3), kw.get("c_out", 2)
        grid = random_sparse_grid(rng, size, cin, kw.get("density", 0.5))
        nbr = grid.neighbor_table()
        params = {"x": grid.values.copy(), "kernel": rng.normal(size=(3, 3, 3, cin, cout)),
                  "bias": rng.normal(size=cout)}
        proj = rng.normal(size=(len(grid), cout))

        def fn(p):
            y, _ = conv_forward(p["x"], nbr, SparseConvWeights(p["kernel"], p["bias"]))
            return float(np.sum(y * proj))

        _, cache = conv_forward(params["x"], nbr, SparseConvWeights(params["kernel"], params["bias"]))
        dx, dk, db = conv_backward(cache, proj)
        return fn, params, {"x": dx, "kernel": dk, "bias": db}

    if op == "mlp_forward":
        dims = kw.get("dims", (8, 6, 2))
        n = kw.get("n", 5)
        w0 = MlpWeights.init(rng, dims)
        params = {"x": rng.normal(size=(n, dims[0]))}
        for j, (wm, b) in enumerate(w0.layers):
            params[f"w{j}"] = np.asarray(wm, dtype=np.float64) + 0.0
            params[f"b{j}"] = rng.normal(scale=0.1, size=b.shape)
        po, px = rng.normal(size=n), rng.normal(size=n)
        nl = len(dims) - 1

        def build(p):
            return MlpWeights([(p[f"w{j}"], p[f"b{j}"]) for j in range(nl)])

        def fn(p):
            (_, _, o, x), _ = mlp_forward_array(p["x"], build(p))
            return float(np.sum(o * po) + np.sum(x * px))

        _, cache = mlp_forward_array(params["x"], build(params))
        dx, grads = mlp_backward(cache, d_o=po, d_x=px)
        analytic = {"x": dx}
        for j, (gw, gb) in enumerate(grads):
            analytic[f"w{j}"], analytic[f"b{j}"] = gw, gb
        return fn, params, analytic

    if op == "gru_cell":
        size, ch, cg = kw.get("size", 3), kw.get("c_hidden", 4), kw.get("c_geo", 4)
        grid = random_sparse_grid(rng, size, cg, kw.get("density", 0.7))
        nbr = grid.neighbor_table()
        n = len(grid)
        params = {"h_prev": rng.normal(scale=0.5, size=(n, ch)), "g": grid.values.copy()}
        for gate in ("W_z", "W_r", "W_h"):
            params[gate + ".kernel"] = rng.normal(scale=0.3, size=(3, 3, 3, ch + cg, ch))
            params[gate + ".bias"] = rng.normal(scale=0.3, size=ch)
        proj = rng.normal(size=(n, ch))

        def build(p):
            return GruWeights(*(SparseConvWeights(p[g + ".kernel"], p[g + ".bias"]) for g in ("W_z", "W_r", "W_h")))

        def fn(p):
            hh, _ = gru_forward(p["h_prev"], p["g"], nbr, build(p))
            return float(np.sum(hh * proj))

        _, cache = gru_forward(params["h_prev"], params["g"], nbr, build(params))
        dhp, dg, dw = gru_backward(cache, proj)
        analytic = {"h_prev": dhp, "g": dg}
        for gate, (dk, db) in dw.items():
            analytic[gate + ".kernel"], analytic[gate + ".bias"] = dk, db
        return fn, params, analytic

    if op == "occupancy_loss":
        n = kw.get("n", 16)
        params = {"o": rng.uniform(0.05, 0.95, size=n)}
        gt = (rng.random(n) < 0.5).astype(np.float64)
        return (lambda p: losses.occupancy_loss(p["o"], gt), params,
                {"o": losses.occupancy_loss_grad(params["o"], gt)})

    if op == "sdf_loss":
        n = kw.get("n", 16)
        params = {"x": rng.uniform(-1, 1, size=n)}
        gt = rng.uniform(-1, 1, size=n)
        # keep away from the |.| kink
        close = np.abs(params["x"] - gt) < 1e-3
        params["x"][close] += 0.01
        mask = rng.random(n) < 0.7
        mask[0] = True
        return (lambda p: losses.sdf_loss(p["x"], gt, mask), params,
                {"x": losses.sdf_loss_grad(params["x"], gt, mask)})

    raise ValueError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# weight files

NRWT_MAGIC = b"NRWT"
NRWT_VERSION = 1
_NAME_PATTERNS = [
    re.compile(r"stub\.conv\d+\.(kernel|bias)"),
    re.compile(r"level[123]\.geo_conv\d+\.(kernel|bias)"),
    re.compile(r"level[123]\.gru\.W_[zrh]\.(kernel|bias)"),
    re.compile(r"level[123]\.mlp\.layer\d+\.(weight|bias)"),
]


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class TruncatedWeightFileError(WeightFileError):
    pass


class UnknownTensorError(WeightFileError):
    pass


class MissingTensorError(WeightFileError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "missing tensor"


def is_canonical_name(name: str) -> bool:
    return any(p.fullmatch(name) for p in _NAME_PATTERNS)


def save_weights(tensors: dict, path) -> None:
    """Write named tensors as little-endian f32."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", NRWT_MAGIC, NRWT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            if not is_canonical_name(name):
                raise UnknownTensorError(f"unknown tensor name {name!r}")
            a = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_weights(path, required=()) -> dict:
    """Read a weight file into ``{name: float64 array}``; checks magic, sizes and names."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedWeightFileError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12)) if len(data) >= 12 else (data[:4], 0, 0)
    if magic != NRWT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {NRWT_MAGIC!r}")
    if len(data) < 12:
        raise TruncatedWeightFileError(f"{path}: truncated header")
    if version != NRWT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        if not is_canonical_name(name):
            raise UnknownTensorError(f"{path}: unknown tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float64)
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes")
    for name in required:
        if name not in out:
            raise MissingTensorError(f"missing required tensor {name!r}")
    return out


__all__ = [
    "SparseConvWeights", "MlpWeights", "GruWeights", "sigmoid",
    "conv_forward", "conv_backward", "sparse_conv3d",
    "mlp_forward_array", "mlp_backward", "mlp_forward",
    "gru_forward", "gru_backward", "gru_cell", "gather_hidden",
    "grad_check", "make_instance", "random_sparse_grid",
    "save_weights", "load_weights", "is_canonical_name", "backward",
    "WeightFileError", "BadMagicError", "TruncatedWeightFileError", "UnknownTensorError",
    "MissingTensorError", "concat_channels",
]
