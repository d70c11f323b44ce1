"""
Sparse voxel grids and submanifold convolution
==============================================

A sparse grid stores only occupied cells.  Convolving it keeps the same set of
cells (nothing is dilated), and a missing neighbour simply contributes zero.
This script builds a tiny grid by hand, runs one convolution and checks it
against a dense cross-correlation from scipy.
"""
import numpy as np
from scipy import ndimage

from fragrecon.nnops import SparseConvWeights, sparse_conv3d
from fragrecon.voxgrid import OFFSETS_27, SparseVoxelGrid, sparsify, upsample2x

# Four occupied cells on the finest (4 cm) level, one feature channel each.
coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 3, 3]])
grid = SparseVoxelGrid(3, 0.04, (0.0, 0.0, 0.0), coords, [[1.0], [2.0], [3.0], [4.0]])
print(grid)
print("world-space centres (m):\n", grid.centers())

# The 27 kernel taps are visited in lexicographic offset order; tap 13 is the centre.
print("tap 13 offset:", OFFSETS_27[13])

# A kernel that sums the +x neighbour into each cell.
k = np.zeros((3, 3, 3, 1, 1))
k[1, 1, 1] = 1.0
k[2, 1, 1] = 10.0
out = sparse_conv3d(grid, SparseConvWeights(k, np.zeros(1)))
for c, v in zip(out.coords, out.values[:, 0]):
    print(tuple(c), "->", v)
# (0,0,0) gets 1 + 10*2 = 21; the isolated cell (3,3,3) only sees itself.

# Same result through a zero-padded dense correlation restricted to occupied cells.
dense = np.zeros((4, 4, 4))
dense[tuple(coords.T)] = grid.values[:, 0]
ref = ndimage.correlate(dense, k[..., 0, 0], mode="constant")[tuple(coords.T)]
print("matches dense correlation:", np.allclose(ref, out.values[:, 0]))

# Coarse-to-fine bookkeeping: keep confident cells, then split each into 8 children.
tsdf = SparseVoxelGrid(1, 0.16, (0.0, 0.0, 0.0), [[0, 0, 0], [1, 0, 0]], [[0.9, 0.1], [0.2, -0.4]], kind=2)
kept = sparsify(tsdf, 0.5)
print("kept after sparsify:", kept.coords.tolist())
print("children at level 2:", len(upsample2x(kept)))
