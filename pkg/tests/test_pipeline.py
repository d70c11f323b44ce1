import numpy as np
import pytest

from fragrecon.camera import Fragment, Frame, Intrinsics, compute_fbv
from fragrecon.nnops import MissingTensorError, grad_check, random_sparse_grid, save_weights
from fragrecon.pipeline import (ConfigError, FusionArea, FusionConfig, FusionMethod, NetworkWeights, ReconState,
                                TrainingDivergedError, extract_mesh, format_config, ground_truth_at,
                                ground_truth_volume, integrate_global, level_backward, level_forward, load_config,
                                parse_config, reconstruct_fragment, reconstruct_sequence, train_toy)
from fragrecon.synth import default_objects, render_gt_depth, scripted_trajectory
from fragrecon.voxgrid import PayloadKind, SparseVoxelGrid

SPEC = default_objects()
INTR = Intrinsics.from_fov(64, 48, 60)


def small_cfg(**kw):
    base = dict(channels=(4, 4, 4), geo_channels=(4, 4, 4), mlp_hidden=8, d_max=2.0, strides=(8, 4, 2))
    base.update(kw)
    return FusionConfig(**base)


def make_fragment(start_deg=0.0, n=9, index=0):
    poses = scripted_trajectory(SPEC, "orbit", n, radius=1.2, height=0.0, target=(0, 0, 0), step_deg=40,
                                height_amplitude=0.3, start_deg=start_deg)
    frames = []
    for i, p in enumerate(poses):
        d = render_gt_depth(SPEC, p, INTR, d_max=2.0)
        frames.append(Frame(i, p, INTR, d, d))
    return Fragment(frames, compute_fbv(frames, 2.0), index)


@pytest.fixture(scope="module")
def frag():
    return make_fragment()


@pytest.fixture(scope="module")
def frag_b():
    return make_fragment(start_deg=20.0, index=1)


class TestConfig:
    def test_defaults(self):
        c = FusionConfig()
        assert (c.voxel_size, c.lam, c.d_max, c.r_max_deg, c.t_max, c.theta, c.n_views) == \
               (0.04, 0.12, 3.0, 15.0, 0.1, 0.5, 9)
        assert c.fusion_method is FusionMethod.GRU and c.fusion_area is FusionArea.FBV
        assert [c.level_voxel_size(l) for l in (1, 2, 3)] == pytest.approx([0.16, 0.08, 0.04])

    def test_parse(self):
        c = parse_config("# comment\nlambda = 0.2\nfusion = avg\narea=occ\nchannels = 8, 8, 8\nn_views = 5\n")
        assert c.lam == 0.2 and c.fusion_method is FusionMethod.AVERAGE and c.fusion_area is FusionArea.OCC
        assert c.channels == (8, 8, 8) and c.n_views == 5

    def test_round_trip(self, tmp_path):
        c = small_cfg(fusion_method="linear", depth_residual=False)
        (tmp_path / "c.cfg").write_text(format_config(c))
        assert load_config(tmp_path / "c.cfg").to_dict() == c.to_dict()

    @pytest.mark.parametrize("text,match", [("bogus = 1", "line 1"), ("theta = 1.5", "theta"),
                                            ("\nn_views = 1", "n_views"), ("lambda = -1", "lambda"),
                                            ("channels = 1,2", "channels"), ("fusion = lstm", "line 1")])
    def test_errors(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_config(text)


class TestGroundTruth:
    def test_examples(self):
        for sdf, occ, x in [(0.0, 1.0, 0.0), (0.12, 0.0, 1.0), (-0.06, 1.0, -0.5)]:
            o, xx = ground_truth_at(lambda p, s=sdf: np.full(len(p), s), np.zeros((1, 3), dtype=int), 0.04)
            assert (o[0], xx[0]) == (occ, pytest.approx(x))

    def test_volume_on_fbv(self, frag):
        g = ground_truth_volume(SPEC, frag.fbv, 1)
        assert len(g) == frag.fbv.n_cells(0.16) ** 3 and g.kind == PayloadKind.TSDF
        assert np.all(np.abs(g.values[:, 1]) <= 1)


def tsdf(coords, x, origin=(0.0, 0.0, 0.0)):
    coords = np.asarray(coords)
    return SparseVoxelGrid(3, 0.04, origin, coords, np.stack([np.ones(len(coords)), x], 1), kind=PayloadKind.TSDF)


class TestIntegrate:
    def test_disjoint_counts(self):
        st = ReconState.empty(FusionConfig())
        integrate_global(tsdf([[0, 0, 0], [1, 0, 0]], [0.1, 0.2]), st)
        integrate_global(tsdf([[5, 0, 0]], [0.3]), st)
        assert len(st.tsdf) == 3

    def test_idempotent_and_replacement(self):
        st = ReconState.empty(FusionConfig())
        a = tsdf([[0, 0, 0], [1, 0, 0]], [0.2, 0.4])
        integrate_global(a, st)
        snap = st.tsdf.values.copy()
        integrate_global(a, st)
        assert np.array_equal(st.tsdf.values, snap)
        integrate_global(tsdf([[0, 0, 0]], [-0.1]), st)
        assert st.tsdf[(0, 0, 0)][1] == -0.1 and st.tsdf[(1, 0, 0)][1] == 0.4

    def test_linear_running_average(self):
        cfg = FusionConfig(fusion_method="linear")
        st = ReconState.empty(cfg)
        integrate_global(tsdf([[0, 0, 0]], [0.2]), st, cfg)
        integrate_global(tsdf([[0, 0, 0]], [-0.1]), st, cfg)
        assert st.tsdf[(0, 0, 0)][1] == pytest.approx(0.05) and st.weight[(0, 0, 0)][0] == 2

    def test_errors(self):
        st = ReconState.empty(FusionConfig())
        with pytest.raises(ValueError, match="lattice"):
            integrate_global(tsdf([[0, 0, 0]], [0.1], origin=(0.01, 0, 0)), st)
        with pytest.raises(ValueError):
            integrate_global(SparseVoxelGrid(2, 0.08, kind=PayloadKind.TSDF), st)


class TestReconstruct:
    def test_output_structure(self, frag):
        cfg = small_cfg()
        st = ReconState.empty(cfg)
        out = reconstruct_fragment(frag, st, NetworkWeights.init(cfg, 0), cfg)
        assert out.level == 3 and len(out) > 0 and st.t == 1
        assert np.all(out.values[:, 0] >= cfg.theta) and np.all(np.abs(out.values[:, 1]) <= 1)
        lo = np.round(np.asarray(frag.fbv.min_corner) / 0.04)
        n = frag.fbv.n_cells(0.04)
        assert np.all((out.coords >= lo) & (out.coords < lo + n))
        assert np.array_equal(st.tsdf.coords, out.coords)

    def test_nothing_visible(self, frag):
        cfg = small_cfg(d_max=0.001)
        st = ReconState.empty(cfg)
        out = reconstruct_fragment(frag, st, NetworkWeights.init(cfg, 0), cfg)
        assert len(out) == 0 and len(st.tsdf) == 0 and all(len(h) == 0 for h in st.hidden) and st.t == 1

    def test_deterministic(self, frag, frag_b):
        cfg = small_cfg()
        w = NetworkWeights.init(cfg, 3)
        runs = []
        for _ in range(2):
            st = ReconState.empty(cfg)
            for f in (frag, frag_b):
                reconstruct_fragment(f, st, w, cfg)
            runs.append(st)
        assert np.array_equal(runs[0].tsdf.values, runs[1].tsdf.values)
        assert all(np.array_equal(a.values, b.values) for a, b in zip(runs[0].hidden, runs[1].hidden))

    def test_global_only_holds_emitted_voxels(self, frag, frag_b):
        cfg = small_cfg()
        st = ReconState.empty(cfg)
        w = NetworkWeights.init(cfg, 1)
        emitted = set()
        for f in (frag, frag_b):
            emitted |= {tuple(c) for c in reconstruct_fragment(f, st, w, cfg).coords}
        assert {tuple(c) for c in st.tsdf.coords} <= emitted
        assert len(extract_mesh(st, cfg)) > 0

    def _forced_gate(self, cfg, bias, reset_bias=None):
        w = NetworkWeights.init(cfg, 0)
        for lw in w.levels:
            lw.gru.W_z.kernel[...] = 0.0
            lw.gru.W_z.bias[...] = bias
            if reset_bias is not None:
                lw.gru.W_r.kernel[...] = 0.0
                lw.gru.W_r.bias[...] = reset_bias
        return w

    def test_open_gate_ignores_history(self, frag, frag_b):
        cfg = small_cfg()
        # the candidate still reads r * H_prev, so the reset gate must be shut as well
        w = self._forced_gate(cfg, 1e3, reset_bias=-1e3)
        st = ReconState.empty(cfg)
        reconstruct_fragment(frag, st, w, cfg)
        with_history = reconstruct_fragment(frag_b, st, w, cfg)
        fresh = reconstruct_fragment(frag_b, ReconState.empty(cfg), w, cfg)
        assert np.array_equal(with_history.coords, fresh.coords)
        assert np.array_equal(with_history.values, fresh.values)

    def test_closed_gate_keeps_hidden(self, frag):
        cfg = small_cfg()
        w = self._forced_gate(cfg, -1e3)
        st = ReconState.empty(cfg)
        reconstruct_fragment(frag, st, w, cfg)
        before = [h.copy() for h in st.hidden]
        reconstruct_fragment(frag, st, w, cfg)
        for b, a in zip(before, st.hidden):
            idx = a.lookup(b.coords)
            assert np.array_equal(a.values[idx], b.values)

    def test_linear_mode_keeps_no_hidden(self, frag):
        cfg = small_cfg(fusion_method="linear")
        st = ReconState.empty(cfg)
        reconstruct_fragment(frag, st, NetworkWeights.init(cfg, 0), cfg)
        reconstruct_fragment(frag, st, NetworkWeights.init(cfg, 0), cfg)
        assert all(len(h) == 0 for h in st.hidden) and np.all(st.weight.values == 2)

    def test_average_mode_counts(self, frag):
        cfg = small_cfg(fusion_method="avg", fusion_area="fbv")
        st = ReconState.empty(cfg)
        w = NetworkWeights.init(cfg, 0)
        reconstruct_fragment(frag, st, w, cfg)
        level1 = st.hidden[0].copy()
        reconstruct_fragment(frag, st, w, cfg)
        assert np.all(level1.values[:, -1] == 1) and np.all(st.hidden[0].values[:, -1] == 2)
        # averaging identical features leaves them unchanged
        assert np.allclose(st.hidden[0].values[:, :-1], level1.values[:, :-1])

    def test_occ_area_writes_only_occupied(self, frag):
        cfg = small_cfg(fusion_area="occ")
        st = ReconState.empty(cfg)
        reconstruct_fragment(frag, st, NetworkWeights.init(cfg, 0), cfg)
        full = ReconState.empty(small_cfg())
        reconstruct_fragment(frag, full, NetworkWeights.init(cfg, 0), small_cfg())
        assert len(st.hidden[0]) < len(full.hidden[0])

    def test_sequence_and_timer(self, frag):
        cfg = small_cfg()
        timer, seen = {}, []
        reconstruct_sequence(frag.frames, NetworkWeights.init(cfg, 0), cfg,
                             on_fragment=lambda f, out, st: seen.append(len(f.frames)), timer=timer)
        assert seen and sum(seen) <= len(frag.frames)
        assert {"image_encode", "level1.unproj", "level3.gru"} <= set(timer)


def test_level_backward_matches_finite_differences(rng):
    cfg = small_cfg()
    lw = NetworkWeights.init(cfg, 5).levels[1]
    grid = random_sparse_grid(rng, 4, cfg.net_input_channels(2), density=0.6)
    nbr = grid.neighbor_table()
    gl, gx = rng.normal(size=len(grid)), rng.normal(size=len(grid))

    params = {"geo0.kernel": lw.geo0.kernel, "geo1.bias": lw.geo1.bias, "gru.W_h.kernel": lw.gru.W_h.kernel,
              "mlp0": lw.mlp.layers[0][0]}

    def fn(_):
        _, logit, _, x, _ = level_forward(grid.values, nbr, lw, FusionMethod.GRU)
        return float(np.sum(logit * gl) + np.sum(x * gx))

    *_, cache = level_forward(grid.values, nbr, lw, FusionMethod.GRU)
    g = level_backward(cache, gl, gx, FusionMethod.GRU)
    analytic = {"geo0.kernel": g.geo0.kernel, "geo1.bias": g.geo1.bias, "gru.W_h.kernel": g.gru.W_h.kernel,
                "mlp0": g.mlp.layers[0][0]}
    assert grad_check(fn, params, analytic, n_coords=30, rng=rng) < 1e-4
    with pytest.raises(ValueError):
        level_backward(cache, gl, gx, FusionMethod.AVERAGE)


class TestWeights:
    def test_file_round_trip(self, tmp_path):
        cfg = small_cfg()
        w = NetworkWeights.init(cfg, 2)
        w.save(tmp_path / "w.nrwt")
        back = NetworkWeights.load(tmp_path / "w.nrwt")
        t0, t1 = w.to_tensors(), back.to_tensors()
        assert t0.keys() == t1.keys() and all(np.array_equal(t0[k], t1[k]) for k in t0)

    def test_missing_gate(self, tmp_path):
        t = NetworkWeights.init(small_cfg(), 0).to_tensors()
        del t["level1.gru.W_z.kernel"]
        save_weights(t, tmp_path / "w.nrwt")
        with pytest.raises(MissingTensorError, match="level1.gru.W_z"):
            NetworkWeights.load(tmp_path / "w.nrwt")


class TestTraining:
    def test_zero_lr_constant(self, frag):
        cfg = small_cfg()
        hist = train_toy([(frag, SPEC)], NetworkWeights.init(cfg, 0), cfg, steps=3, lr=0.0)
        assert hist[0] > 0 and hist == [hist[0]] * 3

    def test_repeatable_and_decreasing(self, frag):
        cfg = small_cfg()
        a = train_toy([(frag, SPEC)], NetworkWeights.init(cfg, 0), cfg, steps=15, lr=0.2)
        b = train_toy([(frag, SPEC)], NetworkWeights.init(cfg, 0), cfg, steps=15, lr=0.2)
        assert a == b and a[-1] < a[0]

    def test_divergence_reports_step(self, frag):
        cfg = small_cfg()
        w = NetworkWeights.init(cfg, 0)
        w.levels[0].mlp.layers[-1][1][0] = np.nan
        with pytest.raises(TrainingDivergedError) as exc:
            train_toy([(frag, SPEC)], w, cfg, steps=2)
        assert exc.value.step == 0
