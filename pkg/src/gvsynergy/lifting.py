"""2D-to-3D feature lifting: class-token fusion, bilinear sampling and
masked multi-view averaging into a voxel volume."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .diffcore import Tensor, ops
from .geometry import DEPTH_EPS, Camera, in_bounds
from .parallel import run_chunks


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple
    voxel_size: float
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def centers(self) -> np.ndarray:
        """Voxel centres o + (idx + 0.5) * s, shape [X, Y, Z, 3]."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def coarsen(self, factor=2) -> "VoxelGridSpec":
        return VoxelGridSpec(self.origin, self.voxel_size * factor,
                             tuple(max(1, d // factor) for d in self.dims))

    def to_dict(self):
        return {"origin": list(self.origin), "voxel_size": self.voxel_size, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["origin"]), d["voxel_size"], tuple(d["dims"]))


@dataclass
class FeatureVolume:
    values: np.ndarray  # [C, X, Y, Z]
    grid: VoxelGridSpec

    @property
    def channels(self):
        return self.values.shape[0]


def fuse_class_token(patch_tokens, class_token, weight, bias):
    """ReLU(Linear([repeat(class_token, N), patch_tokens])) -> [N, D']."""
    n, d = patch_tokens.shape
    if class_token.shape != (1, d):
        raise ValueError(f"class token shape {class_token.shape} does not match patch tokens {patch_tokens.shape}")
    if weight.shape[0] != 2 * d:
        raise ValueError(f"projection expects {weight.shape[0]} inputs, tokens give {2 * d}")
    repeated = ops.take(class_token, np.zeros(n, dtype=np.intp), axis=0)
    joined = ops.concat([repeated, patch_tokens], axis=1)
    return ops.relu(ops.add(ops.matmul(joined, weight), bias))


def bilinear_sample(fmap, u, v):
    """Bilinear sample of ``fmap`` [C, H, W] at feature coords (u, v).

    Texel centres sit at integer coordinates; taps clamp at the last
    row/column so the whole half-open domain [0, W) x [0, H) is valid.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    _, H, W = fmap.shape
    if not (0 <= u < W and 0 <= v < H):
        raise ValueError(f"sample point ({u}, {v}) outside the {W}x{H} feature map")
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = u - x0, v - y0
    return ((1 - fx) * (1 - fy) * fmap[:, y0, x0] + fx * (1 - fy) * fmap[:, y0, x1]
            + (1 - fx) * fy * fmap[:, y1, x0] + fx * fy * fmap[:, y1, x1])


@numba.njit(nogil=True, cache=True)
def _lift_kernel(mats, fmaps, origin, vs, dims, feat_w, feat_h, start, stop,
                 out, cols, wts, counts):
    n_views, C, H, W = fmaps.shape
    ny, nz = dims[1], dims[2]
    for vox in range(start, stop):
        ix = vox // (ny * nz)
        iy = (vox // nz) % ny
        iz = vox % nz
        px = origin[0] + (ix + 0.5) * vs
        py = origin[1] + (iy + 0.5) * vs
        pz = origin[2] + (iz + 0.5) * vs
        k = 0
        for c in range(C):
            out[vox, c] = 0.0
        for i in range(n_views):
            for t in range(4):
                cols[vox, 4 * i + t] = 0
                wts[vox, 4 * i + t] = 0.0
            m = mats[i]
            hz = m[2, 0] * px + m[2, 1] * py + m[2, 2] * pz + m[2, 3]
            if not hz > 1e-9:
                continue
            u = (m[0, 0] * px + m[0, 1] * py + m[0, 2] * pz + m[0, 3]) / hz
            v = (m[1, 0] * px + m[1, 1] * py + m[1, 2] * pz + m[1, 3]) / hz
            if not (u >= 0.0 and u < feat_w[i] and v >= 0.0 and v < feat_h[i]):
                continue
            x0 = int(np.floor(u))
            y0 = int(np.floor(v))
            x1 = min(x0 + 1, W - 1)
            y1 = min(y0 + 1, H - 1)
            fx = u - x0
            fy = v - y0
            k += 1
            base = i * H * W
            cols[vox, 4 * i + 0] = base + y0 * W + x0
            cols[vox, 4 * i + 1] = base + y0 * W + x1
            cols[vox, 4 * i + 2] = base + y1 * W + x0
            cols[vox, 4 * i + 3] = base + y1 * W + x1
            wts[vox, 4 * i + 0] = (1 - fx) * (1 - fy)
            wts[vox, 4 * i + 1] = fx * (1 - fy)
            wts[vox, 4 * i + 2] = (1 - fx) * fy
            wts[vox, 4 * i + 3] = fx * fy
            for c in range(C):
                top = fmaps[i, c, y0, x0] + fx * (fmaps[i, c, y0, x1] - fmaps[i, c, y0, x0])
                bot = fmaps[i, c, y1, x0] + fx * (fmaps[i, c, y1, x1] - fmaps[i, c, y1, x0])
                s = top + fy * (bot - top)
                # running mean keeps constant inputs exact
                out[vox, c] += (s - out[vox, c]) / k
        counts[vox] = k


class LiftPlan:
    """Sampling table of one lift: value plus the sparse linear map used in
    backward (rows = voxels, cols = view*H*W + y*W + x)."""

    def __init__(self, values, matrix, counts, grid):
        self.values = values
        self.matrix = matrix
        self.counts = counts
        self.grid = grid


def _check_inputs(fmaps, cameras):
    if len(cameras) == 0 or len(fmaps) == 0:
        raise ValueError("lift_features needs at least one view")
    if len(fmaps) != len(cameras):
        raise ValueError(f"{len(fmaps)} feature maps but {len(cameras)} cameras")


def plan_lift(fmaps, cameras, grid: VoxelGridSpec, threads=None) -> LiftPlan:
    fmaps = np.ascontiguousarray(fmaps, dtype=np.float64)
    _check_inputs(fmaps, cameras)
    if fmaps.ndim != 4:
        raise ValueError(f"feature maps must be [views, C, H, W], got {fmaps.shape}")
    n, C, H, W = fmaps.shape
    mats = np.ascontiguousarray([cam.projection for cam in cameras])
    feat_w = np.array([cam.feature_size[0] for cam in cameras])
    feat_h = np.array([cam.feature_size[1] for cam in cameras])
    if np.any(feat_w > W) or np.any(feat_h > H):
        raise ValueError(f"camera feature bounds exceed the {W}x{H} feature maps")
    nv = grid.n_voxels
    out = np.empty((nv, C))
    cols = np.empty((nv, 4 * n), dtype=np.int64)
    wts = np.empty((nv, 4 * n))
    counts = np.empty(nv, dtype=np.int64)
    origin = np.array(grid.origin)
    dims = np.array(grid.dims, dtype=np.int64)

    def kernel(a, b):
        _lift_kernel(mats, fmaps, origin, grid.voxel_size, dims, feat_w, feat_h, a, b,
                     out, cols, wts, counts)

    run_chunks(kernel, nv, threads)
    scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    data = (wts * scale[:, None]).reshape(-1)
    rows = np.repeat(np.arange(nv), 4 * n)
    keep = data != 0.0
    matrix = sp.csr_matrix((data[keep], (rows[keep], cols.reshape(-1)[keep])), shape=(nv, n * H * W))
    values = out.T.reshape((C,) + grid.dims)
    return LiftPlan(values, matrix, counts.reshape(grid.dims), grid)


def lift_features(maps, cameras, grid: VoxelGridSpec, threads=None):
    """Masked multi-view average of bilinear samples at voxel centres.

    ``maps`` is either an array [views, C, H, W] (returns a FeatureVolume)
    or a Tensor of that shape (returns a differentiable Tensor
    [C, X, Y, Z]).
    """
    if isinstance(maps, Tensor):
        plan = plan_lift(maps.data, cameras, grid, threads)
        n, C, H, W = maps.shape
        flat = ops.reshape(ops.transpose(maps, (0, 2, 3, 1)), (n * H * W, C))
        mt = plan.matrix.T.tocsr()
        vals = plan.values.reshape(C, -1).T
        lifted = maps.graph.record("lift", (flat,), vals, lambda go: (np.asarray(mt @ go),))
        return ops.reshape(ops.transpose(lifted, (1, 0)), (C,) + grid.dims)
    plan = plan_lift(maps, cameras, grid, threads)
    return FeatureVolume(plan.values, grid)


def visible_mask(cameras, grid: VoxelGridSpec) -> np.ndarray:
    """Number of views whose half-open feature bounds contain each voxel centre."""
    pts = grid.centers().reshape(-1, 3)
    count = np.zeros(len(pts), dtype=np.int64)
    for cam in cameras:
        M = cam.projection
        hz = pts[:, 0] * M[2, 0] + pts[:, 1] * M[2, 1] + pts[:, 2] * M[2, 2] + M[2, 3]
        ok = hz > DEPTH_EPS
        safe = np.where(ok, hz, 1.0)
        u = (pts[:, 0] * M[0, 0] + pts[:, 1] * M[0, 1] + pts[:, 2] * M[0, 2] + M[0, 3]) / safe
        v = (pts[:, 0] * M[1, 0] + pts[:, 1] * M[1, 1] + pts[:, 2] * M[1, 2] + M[1, 3]) / safe
        count += ok & in_bounds(cam, u, v)
    return count.reshape(grid.dims)
