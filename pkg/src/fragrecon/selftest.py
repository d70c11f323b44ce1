"""Fast internal consistency checks run by ``fragrecon selftest``."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .meshing import marching_cubes
from .nnops import SparseConvWeights, grad_check, make_instance, random_sparse_grid, sparse_conv3d
from .synth import SceneSpec, Sphere, sdf_grid

GRAD_OPS = ("sparse_conv3d", "mlp_forward", "gru_cell", "occupancy_loss", "sdf_loss")


def dense_conv_reference(grid, w: SparseConvWeights) -> np.ndarray:
    """Dense correlation of the zero-filled grid, read back at the occupied sites."""
    dense, lo = grid.to_dense()
    out = np.zeros((len(grid), w.c_out))
    c = grid.coords - lo
    for j in range(w.c_out):
        acc = np.zeros(dense.shape[:3])
        for i in range(w.c_in):
            acc += ndimage.correlate(dense[..., i], w.kernel[..., i, j], mode="constant", cval=0.0)
        out[:, j] = acc[c[:, 0], c[:, 1], c[:, 2]] + w.bias[j]
    return out


def check_gradients(seed: int = 0, instances: int = 3, n_coords: int = 20) -> dict:
    rng = np.random.default_rng(seed)
    worst = {}
    for op in GRAD_OPS:
        errs = []
        for _ in range(instances):
            fn, params, analytic = make_instance(op, rng)
            errs.append(grad_check(fn, params, analytic, n_coords=n_coords, rng=rng))
        worst[op] = max(errs)
    return worst


def check_conv_oracle(seed: int = 0, instances: int = 5) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        size = int(rng.integers(2, 9))
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        grid = random_sparse_grid(rng, size, cin, float(rng.uniform(0.1, 0.9)))
        w = SparseConvWeights(rng.normal(size=(3, 3, 3, cin, cout)), rng.normal(size=cout))
        worst = max(worst, float(np.abs(sparse_conv3d(grid, w).values - dense_conv_reference(grid, w)).max()))
    return worst


def check_sphere(voxel_size: float = 0.04, radius: float = 0.5) -> tuple:
    spec = SceneSpec([Sphere((0.0, 0.0, 0.0), radius)], [[-1, -1, -1], [1, 1, 1]])
    mesh = marching_cubes(sdf_grid(spec, (-0.8,) * 3, (0.8,) * 3, voxel_size))
    err = np.abs(np.linalg.norm(mesh.vertices.astype(np.float64), axis=1) - radius)
    return float(err.mean()), float(err.max())


def run_selftest(seed: int = 0) -> list:
    results = []
    for op, err in check_gradients(seed).items():
        results.append({"name": f"grad:{op}", "passed": err < 1e-4, "detail": f"max rel err {err:.2e}"})
    err = check_conv_oracle(seed)
    results.append({"name": "sparse_conv_dense_oracle", "passed": err < 1e-6, "detail": f"max abs diff {err:.2e}"})
    mean, mx = check_sphere()
    results.append({"name": "marching_cubes_sphere", "passed": mean < 0.02 and mx < 0.04,
                    "detail": f"radial error mean {mean:.4f} m, max {mx:.4f} m"})
    return results
