"""
Fusion ablation on a longer orbit
=================================

Runs the fusion variants (linear TSDF averaging, feature averaging, GRU) over
two fusion areas and several fragment sizes.  Weights come from a short
overfit on the first fragment, one set for the GRU path and one for the
pass-through path the other two methods use.  With toy weights the numbers
say whether every variant runs end to end, not which one is better.
"""
import numpy as np

from fragrecon.camera import Fragment, Frame, Intrinsics, compute_fbv
from fragrecon.metrics import eval_3d
from fragrecon.pipeline import FusionConfig, NetworkWeights, extract_mesh, reconstruct_sequence, train_toy
from fragrecon.synth import default_objects, gt_mesh, render_gt_depth, scripted_trajectory

spec = default_objects()
base = dict(channels=(8, 8, 8), geo_channels=(8, 8, 8), mlp_hidden=16, d_max=2.0)
intr = Intrinsics.from_fov(160, 120, 60)


def frames_along(n, start_deg=0.0):
    poses = scripted_trajectory(spec, "orbit", n, radius=1.2, height=0.0, target=(0, 0, 0), step_deg=40,
                                height_amplitude=0.3, start_deg=start_deg)
    return [Frame(i, p, intr, d, d) for i, p in enumerate(poses) for d in [render_gt_depth(spec, p, intr, 2.0)]]


train_frames = frames_along(9)
frag = Fragment(train_frames, compute_fbv(train_frames, 2.0), 0)
trained = {}
for path in ("gru", "linear"):
    cfg = FusionConfig(**base, fusion_method=path)
    trained[path] = NetworkWeights.init(cfg, 0)
    hist = train_toy([(frag, spec)], trained[path], cfg, steps=300, lr=0.2)
    print(f"{path:>6} path trained: loss {hist[0]:.3f} -> {hist[-1]:.3f}")

frames = frames_along(27, start_deg=5.0)
gt = gt_mesh(spec, 0.02)
print(f"\n{'method':>7} {'area':>5} {'N':>3} {'frags':>5} {'prec':>6} {'recall':>6} {'F':>6}")
for method, area, n in [("linear", "occ", 5), ("avg", "occ", 5), ("avg", "fbv", 5), ("gru", "occ", 5),
                        ("gru", "fbv", 5), ("gru", "fbv", 7), ("gru", "fbv", 9), ("gru", "fbv", 11)]:
    cfg = FusionConfig(**base, fusion_method=method, fusion_area=area, n_views=n)
    count = []
    state = reconstruct_sequence(frames, trained["gru" if method == "gru" else "linear"], cfg,
                                 on_fragment=lambda f, o, s: count.append(1))
    mesh = extract_mesh(state, cfg)
    if mesh.is_empty:
        print(f"{method:>7} {area:>5} {n:>3} {len(count):>5}  (empty mesh)")
        continue
    m = eval_3d(mesh, gt, threshold=0.05, n_samples=50_000, region=tuple(spec.room_bounds))
    print(f"{method:>7} {area:>5} {n:>3} {len(count):>5} {m.prec:6.3f} {m.recall:6.3f} {m.fscore:6.3f}")
