"""Command-line entry point: synth, reconstruct, fuse-depth, eval, bench, train, selftest."""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

TRAJECTORY = "trajectory.txt"
INTRINSICS = "intrinsics.txt"
DEPTH_DIR = "depth"
SCENE = "scene.json"
GT_MESH = "gt.ply"


class CliError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict
    seed: int
    outputs: list = field(default_factory=list)
    version: str = __version__

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def _guard(paths, force: bool) -> None:
    for p in paths:
        p = Path(p)
        if p.exists() and not force:
            if p.is_dir() and not any(p.iterdir()):
                continue
            raise CliError(f"refusing to overwrite {p} (use --force)")


def _config(args):
    from .pipeline import FusionConfig, load_config
    cfg = load_config(args.config) if args.config else FusionConfig()
    overrides = {}
    for name, attr in (("fusion", "fusion_method"), ("area", "fusion_area"), ("views", "n_views")):
        v = getattr(args, name, None)
        if v is not None:
            overrides[attr] = v
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def _frames(data_dir: Path):
    from .camera import ingest_sequence
    for name in (TRAJECTORY, INTRINSICS):
        if not (data_dir / name).is_file():
            raise CliError(f"{data_dir}: missing {name}")
    depth = data_dir / DEPTH_DIR
    return list(ingest_sequence(data_dir / TRAJECTORY, data_dir / INTRINSICS, depth if depth.is_dir() else data_dir))


def _load_scene(spec: str):
    from . import synth
    if spec == "builtin:room":
        return synth.default_room()
    if spec == "builtin:objects":
        return synth.default_objects()
    return synth.load_scene(spec)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> dict:
    import numpy as np
    from . import synth
    from .camera import Intrinsics, write_depth_png, write_intrinsics, write_trajectory
    from .meshing import write_mesh

    spec = _load_scene(args.spec)
    out = Path(args.out_dir)
    _guard([out], args.force)
    out.mkdir(parents=True, exist_ok=True)
    (out / DEPTH_DIR).mkdir(exist_ok=True)
    intr = Intrinsics.from_fov(args.width, args.height, args.hfov)
    target = np.asarray(args.target, dtype=np.float64) if args.target else None
    poses = synth.scripted_trajectory(spec, args.trajectory, args.frames, radius=args.radius, height=args.cam_height,
                                      target=target, step_deg=args.step_deg, keyframe_every=args.keyframe_every,
                                      height_amplitude=args.height_amplitude)
    rng = np.random.default_rng(args.seed)
    for i, pose in enumerate(poses):
        depth = synth.render_gt_depth(spec, pose, intr, args.d_max, noise_sigma=args.noise, rng=rng)
        write_depth_png(out / DEPTH_DIR / f"{i:06d}.png", depth)
    write_trajectory(out / TRAJECTORY, enumerate(poses))
    write_intrinsics(out / INTRINSICS, intr)
    synth.save_scene(spec, out / SCENE)
    write_mesh(synth.gt_mesh(spec, args.gt_voxel), out / GT_MESH)
    outputs = [TRAJECTORY, INTRINSICS, DEPTH_DIR, SCENE, GT_MESH]
    RunManifest("synth", {"frames": args.frames, "trajectory": args.trajectory, "radius": args.radius,
                          "width": args.width, "height": args.height, "hfov": args.hfov, "d_max": args.d_max,
                          "noise": args.noise}, {"spec": args.spec}, args.seed, outputs).write(out / "manifest.json")
    return {"out_dir": str(out), "frames": len(poses)}


def cmd_reconstruct(args) -> dict:
    from .meshing import TriangleMesh, write_mesh

    out = Path(args.out)
    stats_path = out.with_name(out.name + ".stats.json")
    _guard([out, stats_path], args.force)
    frames = _frames(Path(args.data_dir))
    cfg = _config(args)
    stats = []
    if args.baseline == "tsdf":
        from .baseline import fuse_sequence
        from .meshing import marching_cubes
        grid = fuse_sequence(frames, cfg.lam, cfg.d_max, cfg.voxel_size)
        mesh = marching_cubes(grid)
        stats.append({"voxels": len(grid), "frames": len(frames)})
    else:
        from .pipeline import NetworkWeights, extract_mesh, reconstruct_sequence
        weights = NetworkWeights.load(args.weights) if args.weights else NetworkWeights.init(cfg, args.seed)

        def log(frag, local, state):
            rec = {"fragment": frag.fragment_index, "frames": frag.frame_indices, "voxels": len(local),
                   "global_voxels": len(state.tsdf)}
            if not args.skip_meshing:
                rec["triangles"] = len(extract_mesh(state, cfg).triangles)
            stats.append(rec)

        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            state = reconstruct_sequence(frames, weights, cfg, on_fragment=log)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        mesh = extract_mesh(state, cfg) if stats else TriangleMesh.empty()
    write_mesh(mesh, out)
    with open(stats_path, "w") as fh:
        json.dump({"fragments": stats}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    RunManifest("reconstruct", cfg.to_dict(), {"data_dir": args.data_dir, "weights": args.weights,
                                               "baseline": args.baseline}, args.seed,
                [str(out), str(stats_path)]).write(manifest_path(out))
    return {"mesh": str(out), "fragments": len(stats), "triangles": len(mesh.triangles)}


def cmd_fuse_depth(args) -> dict:
    from .baseline import fuse_sequence
    from .meshing import marching_cubes, write_mesh
    from .voxgrid import save_grid

    out = Path(args.out)
    targets = [out] + ([Path(args.volume)] if args.volume else [])
    _guard(targets, args.force)
    cfg = _config(args)
    frames = _frames(Path(args.data_dir))
    grid = fuse_sequence(frames, cfg.lam, cfg.d_max, cfg.voxel_size)
    mesh = marching_cubes(grid)
    write_mesh(mesh, out)
    if args.volume:
        save_grid(grid, args.volume)
    RunManifest("fuse-depth", cfg.to_dict(), {"data_dir": args.data_dir}, args.seed,
                [str(p) for p in targets]).write(manifest_path(out))
    return {"mesh": str(out), "voxels": len(grid), "triangles": len(mesh.triangles)}


def cmd_eval(args) -> dict:
    from .meshing import read_mesh
    from .metrics import eval_3d, eval_sequence, write_csv, write_report

    for p in (args.pred, args.gt):
        if not Path(p).is_file():
            raise CliError(f"mesh not found: {p}")
    out = Path(args.out) if args.out else None
    if out:
        _guard([out, out.with_suffix(".csv")], args.force)
    pred, gt = read_mesh(args.pred), read_mesh(args.gt)
    region = None
    if args.crop_to_gt and not gt.is_empty:
        region = (gt.vertices.min(axis=0) - 1e-6, gt.vertices.max(axis=0) + 1e-6)
    if args.data_dir:
        report = eval_sequence(pred, gt, _frames(Path(args.data_dir)), args.interval, args.threshold,
                               args.samples, args.seed, region=region)
    else:
        report = {"metrics_3d": asdict(eval_3d(pred, gt, args.threshold, args.samples, args.seed, region)),
                  "metrics_2d": None}
    report["inputs"] = {"pred": args.pred, "gt": args.gt, "data_dir": args.data_dir}
    report["config"] = {"threshold": args.threshold, "samples": args.samples, "seed": args.seed,
                        "interval": args.interval, "crop_to_gt": args.crop_to_gt}
    report["version"] = __version__
    if out:
        write_report(report, out)
        row = {f"3d_{k}": v for k, v in report["metrics_3d"].items()}
        if report["metrics_2d"]:
            row.update({f"2d_{k}": v for k, v in report["metrics_2d"].items()})
        write_csv([row], out.with_suffix(".csv"))
    m = report["metrics_3d"]
    if not args.json:
        print(f"acc {m['acc']:.4f}  comp {m['comp']:.4f}  prec {m['prec']:.4f}  "
              f"recall {m['recall']:.4f}  fscore {m['fscore']:.4f}")
    return report


def cmd_bench(args) -> dict:
    from .bench import default_sweep_counts, is_monotone, run_benchmark, sparse_conv_sweep, table_rows
    from .metrics import write_csv, write_report
    from .pipeline import NetworkWeights

    out = Path(args.out)
    _guard([out / "bench.json", out / "bench.csv", out / "sweep.csv"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _config(args)
    frames = _frames(Path(args.data_dir))
    weights = NetworkWeights.load(args.weights) if args.weights else NetworkWeights.init(cfg, args.seed)
    report = run_benchmark(frames, weights, cfg, args.repeats, mesh_every=not args.skip_meshing)
    write_csv(table_rows(report), out / "bench.csv")
    if args.sweep_voxels is not None:
        counts = default_sweep_counts() if args.sweep_voxels == "default" else \
            tuple(int(c) for c in args.sweep_voxels.split(","))
        sweep = sparse_conv_sweep(counts, repeats=max(args.repeats, 3), seed=args.seed)
        report["sparse_conv_sweep"] = {"rows": sweep, "monotone": is_monotone(sweep)}
        write_csv(sweep, out / "sweep.csv")
    report["config"] = cfg.to_dict()
    write_report(report, out / "bench.json")
    RunManifest("bench", cfg.to_dict(), {"data_dir": args.data_dir, "weights": args.weights}, args.seed,
                [str(out / "bench.json"), str(out / "bench.csv")]).write(out / "manifest.json")
    if not args.json:
        for r in table_rows(report):
            print(f"{r['label']:<28} {r['median_ms']:10.2f} ms  ({r['ms_per_keyframe']:.2f} ms/key frame)")
    return report


def cmd_train(args) -> dict:
    from .camera import assemble_fragments
    from .pipeline import NetworkWeights, train_toy

    out = Path(args.out)
    _guard([out], args.force)
    cfg = _config(args)
    spec = _load_scene(args.scene)
    frames = _frames(Path(args.data_dir))
    frags = list(assemble_fragments(frames, cfg.n_views, cfg.t_max, cfg.r_max_deg, cfg.d_max,
                                    cfg.level_voxel_size(1), cfg.keyframe_mode))
    if not frags:
        raise CliError("no fragment could be assembled from the sequence")
    picked = frags[: args.fragments]
    weights = NetworkWeights.init(cfg, args.seed)
    history = train_toy([(f, spec) for f in picked], weights, cfg, args.steps, args.lr)
    weights.save(out)
    RunManifest("train", cfg.to_dict(), {"data_dir": args.data_dir, "scene": args.scene}, args.seed,
                [str(out)]).write(manifest_path(out))
    if not args.json:
        print(f"loss {history[0]:.4f} -> {history[-1]:.4f} over {len(history)} steps")
    return {"weights": str(out), "initial_loss": history[0], "final_loss": history[-1]}


def cmd_selftest(args) -> dict:
    from .selftest import run_selftest
    results = run_selftest(seed=args.seed)
    if not args.json:
        for r in results:
            print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['name']}: {r['detail']}")
    ok = all(r["passed"] for r in results)
    if not ok:
        failed = ", ".join(r["name"] for r in results if not r["passed"])
        raise CliError(f"selftest failed: {failed}", {"checks": results})
    return {"checks": results, "passed": ok}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(q, suppress: bool):
        # sub-commands accept the same flags; SUPPRESS keeps them from clobbering values
        # given before the command name
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        q.add_argument("--config", default=d(None), help="key = value pipeline config file")
        q.add_argument("--seed", type=int, default=d(0))
        q.add_argument("--threads", type=int, default=d(None), help="cap the BLAS/OpenMP thread pools")
        q.add_argument("--json", action="store_true", default=d(False), help="print a machine-readable result")
        q.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")

    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, suppress=True)
    p = argparse.ArgumentParser(prog="fragrecon", description=__doc__)
    global_flags(p, suppress=False)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic depth sequence")
    s.add_argument("spec", help="scene JSON file, or builtin:room / builtin:objects")
    s.add_argument("out_dir")
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--trajectory", choices=("orbit", "scan-line"), default="orbit")
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--cam-height", type=float)
    s.add_argument("--target", type=float, nargs=3)
    s.add_argument("--step-deg", type=float)
    s.add_argument("--keyframe-every", type=int)
    s.add_argument("--height-amplitude", type=float, default=0.0)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--hfov", type=float, default=90.0)
    s.add_argument("--d-max", type=float, default=3.0)
    s.add_argument("--noise", type=float, default=0.0, help="Gaussian depth noise sigma (m)")
    s.add_argument("--gt-voxel", type=float, default=0.02)
    s.set_defaults(func=cmd_synth)

    def fusion_flags(q):
        q.add_argument("--fusion", choices=("gru", "avg", "linear"))
        q.add_argument("--area", choices=("occ", "fbv"))
        q.add_argument("--views", type=int)

    r = sub.add_parser("reconstruct", parents=[common], help="run the fragment pipeline on a sequence")
    r.add_argument("data_dir")
    r.add_argument("--weights")
    r.add_argument("--out", required=True, help="output mesh (.ply or .obj)")
    r.add_argument("--baseline", choices=("tsdf",), help="use classical depth fusion instead")
    r.add_argument("--skip-meshing", action="store_true", help="only mesh once at the end")
    fusion_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    f = sub.add_parser("fuse-depth", parents=[common], help="classical TSDF fusion of depth maps")
    f.add_argument("data_dir")
    f.add_argument("--out", required=True)
    f.add_argument("--volume", help="also save the fused volume")
    f.set_defaults(func=cmd_fuse_depth)

    e = sub.add_parser("eval", parents=[common], help="3-D and 2-D metrics of a mesh")
    e.add_argument("pred")
    e.add_argument("gt")
    e.add_argument("--data-dir", help="sequence for the 2-D depth metrics")
    e.add_argument("--interval", type=int, default=10)
    e.add_argument("--threshold", type=float, default=0.05)
    e.add_argument("--samples", type=int, default=200_000)
    e.add_argument("--crop-to-gt", action="store_true", help="ignore predicted geometry outside the GT bounds")
    e.add_argument("--out", help="JSON report path (a CSV is written next to it)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="per-stage timing report")
    b.add_argument("data_dir")
    b.add_argument("--weights")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--sweep-voxels", nargs="?", const="default",
                   help="also time sparse conv over occupied-voxel counts (comma list)")
    b.add_argument("--skip-meshing", action="store_true")
    fusion_flags(b)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train", parents=[common], help="fit toy weights on synthetic fragments")
    t.add_argument("data_dir")
    t.add_argument("--scene", required=True, help="scene JSON used as the SDF oracle")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=0.2)
    t.add_argument("--fragments", type=int, default=1)
    fusion_flags(t)
    t.set_defaults(func=cmd_train)

    st = sub.add_parser("selftest", parents=[common], help="gradient, convolution and meshing checks")
    st.add_argument("--weights", help="ignored; the self-test uses seeded weights")
    st.set_defaults(func=cmd_selftest)
    return p


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        _limit_threads(args.threads)
    try:
        result = args.func(args)
    except CliError as exc:
        payload = exc.args[1] if len(exc.args) > 1 else None
        if args.json:
            print(json.dumps({"ok": False, "error": str(exc.args[0]), **(payload or {})}, indent=2, sort_keys=True))
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        # FileNotFoundError/KeyError carry a bare message in args[0]; str() would decorate it
        msg = exc.args[0] if len(exc.args) == 1 and isinstance(exc.args[0], str) else str(exc)
        if args.json:
            print(json.dumps({"ok": False, "error": str(msg)}, indent=2, sort_keys=True))
        print(f"error: {msg}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps({"ok": True, **result}, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
