import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from fragrecon import losses
from fragrecon.nnops import (BadMagicError, GruWeights, MissingTensorError, MlpWeights, SparseConvWeights,
                             TruncatedWeightFileError, UnknownTensorError, backward, conv_forward, grad_check,
                             gru_cell, gru_forward, load_weights, make_instance, mlp_forward, mlp_forward_array,
                             random_sparse_grid, save_weights, sigmoid, sparse_conv3d)
from fragrecon.voxgrid import SparseVoxelGrid, TsdfVoxel


def dense_oracle(grid, w):
    """Submanifold conv through zero-padded dense cross-correlation, read back at occupied sites."""
    lo = grid.coords.min(axis=0)
    idx = grid.coords - lo
    shape = tuple(idx.max(axis=0) + 1)
    dense = np.zeros(shape + (grid.channels,))
    dense[tuple(idx.T)] = grid.values
    k = np.asarray(w.kernel, dtype=np.float64)
    out = np.zeros((len(grid), k.shape[4]))
    for co in range(k.shape[4]):
        acc = np.zeros(shape)
        for ci in range(k.shape[3]):
            acc += ndimage.correlate(dense[..., ci], k[..., ci, co], mode="constant", cval=0.0)
        out[:, co] = acc[tuple(idx.T)] + w.bias[co]
    return out


class TestSparseConv:
    def test_identity_kernel(self, rng):
        g = random_sparse_grid(rng, 5, 4)
        out = sparse_conv3d(g, SparseConvWeights.identity(4))
        assert np.allclose(out.values, g.values) and np.array_equal(out.coords, g.coords)

    def test_single_voxel_sees_only_centre_tap(self, rng):
        g = SparseVoxelGrid(3, 0.04, (0, 0, 0), [[4, 4, 4]], [[1.0, 2.0]])
        w = SparseConvWeights(rng.normal(size=(3, 3, 3, 2, 3)), rng.normal(size=3))
        expect = np.array([1.0, 2.0]) @ w.kernel[1, 1, 1] + w.bias
        assert np.allclose(sparse_conv3d(g, w).values[0], expect)

    def test_neighbor_direction(self):
        # out[c] gathers in[c + o] with kernel index o + 1
        g = SparseVoxelGrid(3, 0.04, (0, 0, 0), [[0, 0, 0], [1, 0, 0]], [[0.0], [5.0]])
        k = np.zeros((3, 3, 3, 1, 1))
        k[2, 1, 1] = 1.0
        out = sparse_conv3d(g, SparseConvWeights(k, np.zeros(1)))
        assert out[(0, 0, 0)][0] == 5.0 and out[(1, 0, 0)][0] == 0.0

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        size = int(rng.integers(2, 9))
        g = random_sparse_grid(rng, size, 3, density=float(rng.uniform(0.1, 0.9)))
        w = SparseConvWeights(rng.normal(size=(3, 3, 3, 3, 2)), rng.normal(size=2))
        assert np.allclose(sparse_conv3d(g, w).values, dense_oracle(g, w), atol=1e-10)

    def test_linearity(self, rng):
        g = random_sparse_grid(rng, 4, 2)
        w = SparseConvWeights(rng.normal(size=(3, 3, 3, 2, 2)), np.zeros(2))
        nbr = g.neighbor_table()
        x1, x2 = rng.normal(size=g.values.shape), rng.normal(size=g.values.shape)
        y = conv_forward(2.0 * x1 - 3.0 * x2, nbr, w)[0]
        assert np.allclose(y, 2.0 * conv_forward(x1, nbr, w)[0] - 3.0 * conv_forward(x2, nbr, w)[0])

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            sparse_conv3d(random_sparse_grid(rng, 3, 2), SparseConvWeights.identity(3))

    def test_empty_grid(self):
        out = sparse_conv3d(SparseVoxelGrid(3, 0.04, channels=2), SparseConvWeights.identity(2))
        assert len(out) == 0


class TestMlp:
    def test_zero_weights(self):
        w = MlpWeights([(np.zeros((4, 3)), np.zeros(3)), (np.zeros((3, 2)), np.zeros(2))])
        v = mlp_forward(np.ones(4), w)
        assert isinstance(v, TsdfVoxel) and v.o == 0.5 and v.x == 0.0

    def test_large_bias_saturates(self):
        w = MlpWeights([(np.zeros((4, 2)), np.array([20.0, 20.0]))])
        v = mlp_forward(np.zeros(4), w)
        assert v.o == pytest.approx(sigmoid(20.0), abs=0) and v.o > 1 - 1e-8
        assert v.x == pytest.approx(np.tanh(20.0))

    def test_hand_example(self):
        # relu([1, -2] @ I + 0) = [1, 0]; then [1, 0] @ [[2, 0.5], [7, 7]] + [0, 0] = [2, 0.5]
        w = MlpWeights([(np.eye(2), np.zeros(2)), (np.array([[2.0, 0.5], [7.0, 7.0]]), np.zeros(2))])
        v = mlp_forward(np.array([1.0, -2.0]), w)
        assert v.o == pytest.approx(1 / (1 + np.exp(-2.0)))
        assert v.x == pytest.approx(np.tanh(0.5))

    def test_batch_and_ranges(self, rng):
        w = MlpWeights.init(rng, (5, 8, 2))
        o, x = mlp_forward(rng.normal(scale=10, size=(50, 5)), w)
        assert o.shape == (50,) and np.all((o >= 0) & (o <= 1)) and np.all(np.abs(x) <= 1)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError, match="dimension mismatch"):
            mlp_forward(np.zeros(3), MlpWeights.init(rng, (4, 2)))

    def test_last_layer_width(self):
        with pytest.raises(ValueError):
            MlpWeights([(np.zeros((2, 3)), np.zeros(3))])


def gru_weights(rng, ch, cg, z_bias=None):
    ws = [SparseConvWeights(rng.normal(scale=0.3, size=(3, 3, 3, ch + cg, ch)), rng.normal(scale=0.3, size=ch))
          for _ in range(3)]
    if z_bias is not None:
        ws[0] = SparseConvWeights(np.zeros_like(ws[0].kernel), np.full(ch, z_bias))
    return GruWeights(*ws)


class TestGru:
    def test_update_gate_closed_keeps_hidden(self, rng):
        g = random_sparse_grid(rng, 3, 2)
        w = gru_weights(rng, 3, 2, z_bias=-1e3)
        hp = rng.normal(size=(len(g), 3))
        h, _ = gru_forward(hp, g.values, g.neighbor_table(), w)
        assert np.allclose(h, hp)

    def test_update_gate_open_gives_candidate(self, rng):
        g = random_sparse_grid(rng, 3, 2)
        w = gru_weights(rng, 3, 2, z_bias=1e3)
        hp = rng.normal(size=(len(g), 3))
        h, cache = gru_forward(hp, g.values, g.neighbor_table(), w)
        assert np.allclose(h, cache[3])

    @given(st.integers(0, 10_000))
    def test_convex_combination(self, seed):
        rng = np.random.default_rng(seed)
        g = random_sparse_grid(rng, 3, 2)
        w = gru_weights(rng, 2, 2)
        hp = rng.uniform(-1, 1, size=(len(g), 2))
        h, cache = gru_forward(hp, g.values, g.neighbor_table(), w)
        lo, hi = np.minimum(hp, cache[3]), np.maximum(hp, cache[3])
        assert np.all((h >= lo - 1e-12) & (h <= hi + 1e-12))

    def test_missing_hidden_starts_at_zero(self, rng):
        g = random_sparse_grid(rng, 3, 2)
        w = gru_weights(rng, 3, 2)
        a = gru_cell(g, None, w)
        b, _ = gru_forward(np.zeros((len(g), 3)), g.values, g.neighbor_table(), w)
        assert np.allclose(a.values, b)
        assert np.all(np.abs(a.values) < 1)

    def test_hidden_gathered_by_coordinate(self, rng):
        g = random_sparse_grid(rng, 3, 2, density=1.0)
        w = gru_weights(rng, 2, 2)
        hp = SparseVoxelGrid(3, 0.04, (0, 0, 0), g.coords[::-1], rng.normal(size=(len(g), 2)))
        dense_h = hp.values[hp.lookup(g.coords)]
        ref, _ = gru_forward(dense_h, g.values, g.neighbor_table(), w)
        assert np.allclose(gru_cell(g, hp, w).values, ref)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError, match="channel mismatch"):
            gru_cell(random_sparse_grid(rng, 3, 3), None, gru_weights(rng, 2, 2))


class TestLosses:
    def test_bce_half(self):
        assert losses.occupancy_loss([0.5], [1.0]) == pytest.approx(np.log(2))
        assert losses.occupancy_loss([0.5, 0.5], [0.0, 1.0]) == pytest.approx(np.log(2))

    def test_bce_confident(self):
        assert losses.occupancy_loss([0.9], [1.0]) == pytest.approx(-np.log(0.9))

    def test_bce_clamped(self):
        assert losses.occupancy_loss([0.0], [1.0]) == pytest.approx(-np.log(1e-7))
        assert np.isfinite(losses.occupancy_loss([1.0], [0.0]))

    def test_sdf_log_l1(self):
        assert losses.sdf_loss([1.0], [-1.0]) == pytest.approx(2 * np.log(2))
        assert losses.sdf_loss([0.3, 0.9], [0.3, 0.0], mask=[True, False]) == 0.0

    def test_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            losses.occupancy_loss([0.5, 0.5], [1.0])
        with pytest.raises(ValueError, match="mismatch"):
            losses.sdf_loss([0.5], [1.0, 0.0])

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
    def test_log_transform_odd_monotone(self, xs):
        x = np.sort(np.array(xs))
        t = losses.log_transform(x)
        assert np.allclose(losses.log_transform(-x), -t)
        assert np.all(np.diff(t) >= 0)


class TestBackward:
    @pytest.mark.parametrize("op", ["sparse_conv3d", "mlp_forward", "gru_cell", "occupancy_loss", "sdf_loss"])
    def test_finite_differences(self, op):
        rng = np.random.default_rng(7)
        fn, params, analytic = make_instance(op, rng)
        assert grad_check(fn, params, analytic, n_coords=25, rng=rng) < 1e-4

    def test_identity_conv_grad_passes_upstream(self, rng):
        g = random_sparse_grid(rng, 4, 3)
        _, cache = conv_forward(g.values, g.neighbor_table(), SparseConvWeights.identity(3))
        up = rng.normal(size=g.values.shape)
        dx, dk, db = backward("sparse_conv3d", cache, up)
        assert np.allclose(dx, up) and np.allclose(db, up.sum(0))

    def test_zero_upstream_gives_zero(self, rng):
        g = random_sparse_grid(rng, 3, 2)
        w = gru_weights(rng, 2, 2)
        _, cache = gru_forward(rng.normal(size=(len(g), 2)), g.values, g.neighbor_table(), w)
        dhp, dg, dw = backward("gru_cell", cache, np.zeros((len(g), 2)))
        assert not dhp.any() and not dg.any() and all(not k.any() and not b.any() for k, b in dw.values())
        _, mc = mlp_forward_array(rng.normal(size=(4, 3)), MlpWeights.init(rng, (3, 4, 2)))
        dx, grads = backward("mlp_forward", mc, (np.zeros(4), np.zeros(4)))
        assert not dx.any()

    def test_loss_upstream_scales(self):
        base = losses.occupancy_loss_grad([0.3, 0.8], [1.0, 0.0])
        assert np.allclose(backward("occupancy_loss", ([0.3, 0.8], [1.0, 0.0]), 2.5), 2.5 * base)

    def test_shape_checks(self, rng):
        g = random_sparse_grid(rng, 3, 2)
        _, cache = conv_forward(g.values, g.neighbor_table(), SparseConvWeights.identity(2))
        with pytest.raises(ValueError):
            backward("sparse_conv3d", cache, np.zeros((len(g) + 1, 2)))
        with pytest.raises(ValueError, match="unknown op"):
            backward("pool", cache, None)


class TestWeightFiles:
    def tensors(self, rng):
        return {"level1.gru.W_z.kernel": rng.normal(size=(3, 3, 3, 4, 2)).astype(np.float32),
                "level1.mlp.layer0.bias": rng.normal(size=5).astype(np.float32),
                "stub.conv1.kernel": rng.normal(size=(3, 3, 3, 2)).astype(np.float32)}

    def test_round_trip(self, tmp_path, rng):
        t = self.tensors(rng)
        save_weights(t, tmp_path / "w.nrwt")
        back = load_weights(tmp_path / "w.nrwt")
        assert back.keys() == t.keys()
        for k in t:
            assert np.array_equal(back[k], t[k])

    def test_header(self, tmp_path, rng):
        save_weights(self.tensors(rng), tmp_path / "w.nrwt")
        assert struct.unpack_from("<4sII", (tmp_path / "w.nrwt").read_bytes()) == (b"NRWT", 1, 3)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "w.nrwt").write_bytes(b"ABCD" + bytes(8))
        with pytest.raises(BadMagicError):
            load_weights(tmp_path / "w.nrwt")

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "w.nrwt"
        save_weights(self.tensors(rng), p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(TruncatedWeightFileError):
            load_weights(p)

    def test_unknown_name(self, tmp_path):
        with pytest.raises(UnknownTensorError):
            save_weights({"level1.foo": np.zeros(2)}, tmp_path / "w.nrwt")

    def test_missing_required(self, tmp_path, rng):
        save_weights(self.tensors(rng), tmp_path / "w.nrwt")
        with pytest.raises(MissingTensorError, match="level1.gru.W_r.kernel"):
            load_weights(tmp_path / "w.nrwt", required=["level1.gru.W_r.kernel"])
