"""
Overfitting the learned pipeline on one fragment
================================================

Nine key frames of two floating objects form one fragment.  The per-level
networks are trained by plain gradient descent against the analytic SDF, then
the fragment is reconstructed coarse-to-fine and meshed.  Pass an output path
to keep the trained weights.
"""
import sys
import time

import numpy as np

from fragrecon.camera import Fragment, Frame, Intrinsics, compute_fbv
from fragrecon.metrics import eval_3d
from fragrecon.pipeline import FusionConfig, NetworkWeights, ReconState, extract_mesh, reconstruct_fragment, train_toy
from fragrecon.synth import default_objects, gt_mesh, render_gt_depth, scripted_trajectory

spec = default_objects()
cfg = FusionConfig(channels=(8, 8, 8), geo_channels=(8, 8, 8), mlp_hidden=16, d_max=2.0)
intr = Intrinsics.from_fov(160, 120, 60)
poses = scripted_trajectory(spec, "orbit", 9, radius=1.2, height=0.0, target=(0, 0, 0), step_deg=40,
                            height_amplitude=0.3)
frames = [Frame(i, p, intr, d, d) for i, p in enumerate(poses) for d in [render_gt_depth(spec, p, intr, 2.0)]]
frag = Fragment(frames, compute_fbv(frames, cfg.d_max), 0)
print("fragment bounding volume:", frag.fbv)

weights = NetworkWeights.init(cfg, seed=0)
t0 = time.perf_counter()
history = train_toy([(frag, spec)], weights, cfg, steps=500, lr=0.2,
                    callback=lambda s, loss: s % 100 == 0 and print(f"step {s:4d}  loss {loss:.4f}"))
print(f"loss {history[0]:.3f} -> {history[-1]:.3f} in {time.perf_counter() - t0:.0f} s")

state = ReconState.empty(cfg)
out = reconstruct_fragment(frag, state, weights, cfg)
mesh = extract_mesh(state, cfg)
print(f"{len(out)} surviving 4 cm voxels, {len(mesh)} triangles")

lo, hi = np.asarray(frag.fbv.min_corner), frag.fbv.max_corner
gt = gt_mesh(spec, 0.02, bounds=(np.maximum(lo, spec.room_bounds[0]), np.minimum(hi, spec.room_bounds[1])))
m = eval_3d(mesh, gt, threshold=0.08, region=(lo, hi))
print(f"F-score at 8 cm inside the fragment volume: {m.fscore:.3f}")

if len(sys.argv) > 1:
    weights.save(sys.argv[1])
    print("weights written to", sys.argv[1])
