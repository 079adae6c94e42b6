"""Gaussian voxelization with occupancy, and adaptive cross-representation
enhancement of the lifted voxel volume."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .diffcore import Tensor, ops
from .lifting import VoxelGridSpec
from .parallel import run_chunks


@dataclass
class OccupancyGrid:
    grid: VoxelGridSpec
    values: np.ndarray  # {0, 1} float array [X, Y, Z]

    @property
    def fill_rate(self) -> float:
        return float(self.values.mean())


@dataclass
class VoxelizeResult:
    volume: object  # Tensor or array [C, X, Y, Z]
    occupancy: OccupancyGrid
    n_dropped: int
    n_binned: int
    matrix: sp.csr_matrix  # [n_voxels, n_gaussians] averaging map


def voxel_indices(positions, grid: VoxelGridSpec):
    """Floor binning. Returns (linear index or -1 when off-grid, in-grid mask)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((pos - np.array(grid.origin)) / grid.voxel_size)
    dims = np.array(grid.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=1) & np.all(np.isfinite(pos), axis=1)
    idx = np.where(ok[:, None], idx, 0).astype(np.int64)
    lin = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    return np.where(ok, lin, -1), ok


@numba.njit(nogil=True, cache=True)
def _mean_kernel(starts, members, feats, g0, g1, out):
    C = feats.shape[1]
    for g in range(g0, g1):
        a = starts[g]
        b = starts[g + 1]
        inv = 1.0 / (b - a)
        for c in range(C):
            acc = 0.0
            for m in range(a, b):
                acc += feats[members[m], c]
            out[g, c] = acc * inv


def voxelize(positions, features, grid: VoxelGridSpec, threads=None) -> VoxelizeResult:
    """Average per-Gaussian ``features`` [N, C] into their floor-binned voxels.

    Members are sorted by (linear voxel index, original index) before
    averaging, so the result is independent of thread count and of the
    input order of Gaussians that land in different voxels.
    """
    feats_v = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    n, C = feats_v.shape
    lin, ok = voxel_indices(positions, grid)
    members = np.nonzero(ok)[0]
    members = members[np.lexsort((members, lin[members]))]
    vox = lin[members]
    uniq, starts = np.unique(vox, return_index=True)
    starts = np.append(starts, len(members)).astype(np.int64)
    groups = np.empty((len(uniq), C))
    fv = np.ascontiguousarray(feats_v)

    def kernel(a, b):
        _mean_kernel(starts, members, fv, a, b, groups)

    run_chunks(kernel, len(uniq), threads, min_chunk=16)
    nv = grid.n_voxels
    dense = np.zeros((nv, C))
    dense[uniq] = groups
    occ = np.zeros(nv)
    occ[uniq] = 1.0
    counts = np.diff(starts)
    weights = np.repeat(1.0 / np.maximum(counts, 1), counts)
    matrix = sp.csr_matrix((weights, (vox, members)), shape=(nv, n))
    values = dense.T.reshape((C,) + grid.dims)
    if isinstance(features, Tensor):
        mt = matrix.T.tocsr()
        node = features.graph.record("voxelize", (features,), dense, lambda go: (np.asarray(mt @ go),))
        volume = ops.reshape(ops.transpose(node, (1, 0)), (C,) + grid.dims)
    else:
        volume = values
    return VoxelizeResult(volume, OccupancyGrid(grid, occ.reshape(grid.dims)),
                          int(n - len(members)), int(len(members)), matrix)


def gaussian_encoder_shapes(channels, latent_dim=64):
    return {"genc.c1.w": (channels, latent_dim, 3, 3, 3), "genc.c1.b": (channels,),
            "genc.c2.w": (channels, channels, 3, 3, 3), "genc.c2.b": (channels,)}


def weight_net_shapes(channels):
    return {"wnet.w": (2, 2 * channels, 1, 1, 1), "wnet.b": (2,)}


def fusion_net_shapes(channels):
    return {"fuse.c1.w": (channels, 2 * channels, 3, 3, 3), "fuse.c1.b": (channels,),
            "fuse.c2.w": (channels, channels, 3, 3, 3), "fuse.c2.b": (channels,)}


def encode_gaussian_volume(v_g, p):
    """Two 3x3x3 convs with ReLU between: 64 -> C_f channels."""
    x = ops.relu(ops.conv3d(v_g, p["genc.c1.w"], p["genc.c1.b"]))
    return ops.conv3d(x, p["genc.c2.w"], p["genc.c2.b"])


def apply_occupancy(encoded, occupancy):
    """Broadcast-multiply a [C, X, Y, Z] volume by a [X, Y, Z] mask."""
    occ = occupancy.values if isinstance(occupancy, OccupancyGrid) else np.asarray(occupancy)
    if tuple(encoded.shape[1:]) != occ.shape:
        raise ValueError(f"apply_occupancy: shape mismatch {encoded.shape} vs {occ.shape}")
    if isinstance(encoded, Tensor):
        return ops.mul(encoded, occ[None])
    return np.asarray(encoded) * occ[None]


def adaptive_weights(v, v_g_masked, p):
    """Softmax over the two channels of a 1x1x1 conv on [V, V_g]."""
    if v.shape[0] != v_g_masked.shape[0]:
        raise ValueError(f"adaptive_weights: channel mismatch {v.shape} vs {v_g_masked.shape}")
    logits = ops.conv3d(ops.concat([v, v_g_masked], axis=0), p["wnet.w"], p["wnet.b"])
    w = ops.softmax(logits, axis=0)
    return w[0:1], w[1:2]


def cross_enhance(v, v_g_masked, alpha_v, alpha_g, p):
    """Fusion net on [alpha_v * V, alpha_g * V_g]: two 3x3x3 convs, ReLU between."""
    if v.shape != v_g_masked.shape:
        raise ValueError(f"cross_enhance: shape mismatch {v.shape} vs {v_g_masked.shape}")
    x = ops.concat([ops.mul(alpha_v, v), ops.mul(alpha_g, v_g_masked)], axis=0)
    x = ops.relu(ops.conv3d(x, p["fuse.c1.w"], p["fuse.c1.b"]))
    return ops.conv3d(x, p["fuse.c2.w"], p["fuse.c2.b"])
