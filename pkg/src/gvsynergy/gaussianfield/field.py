"""Pixel-aligned Gaussians: depth head, 66-channel regressor, latent
decoding and GRU-gated multi-view fusion."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..diffcore import Tensor, ops
from ..geometry import Camera, project_points, unproject_pixels

LATENT_DIM = 64
REGRESSOR_CHANNELS = 2 + LATENT_DIM
DECODED_CHANNELS = 19  # 12 SH + 4 quaternion + 3 scale
S_MIN = 0.01
D_MIN = 0.25
D_MAX = 8.0


def depth_head_shapes(in_channels, hidden=16):
    return {"depth.c1.w": (hidden, in_channels, 3, 3), "depth.c1.b": (hidden,),
            "depth.c2.w": (1, hidden, 3, 3), "depth.c2.b": (1,)}


def regressor_shapes(in_channels, hidden=32):
    return {"reg.c1.w": (hidden, in_channels, 3, 3), "reg.c1.b": (hidden,),
            "reg.c2.w": (REGRESSOR_CHANNELS, hidden, 3, 3), "reg.c2.b": (REGRESSOR_CHANNELS,)}


def decoder_shapes():
    return {"dec.w": (LATENT_DIM, DECODED_CHANNELS), "dec.b": (DECODED_CHANNELS,)}


def gru_shapes():
    return {f"gru.{g}": (2 * LATENT_DIM, LATENT_DIM) for g in ("z", "r", "h")}


@dataclass
class GaussianSet:
    """Per-primitive arrays. ``opacity``, ``weight``, ``latent`` (and ``sh``
    once decoded) may be Tensors so gradients reach the regressor."""

    positions: np.ndarray  # [N, 3]
    opacity: object  # [N]
    weight: object  # [N]
    latent: object  # [N, 64]
    source_view: np.ndarray  # [N]
    pixel: np.ndarray  # [N] linear feature-pixel index in the source view
    depth: np.ndarray  # [N] camera z in the source view
    sh: object = None  # [N, 3, 4]
    rotation: np.ndarray = None  # [N, 4] unit quaternions (w, x, y, z)
    scale: np.ndarray = None  # [N, 3]

    def __len__(self):
        return len(self.positions)


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def predict_depth(depth_features, p, d_min=D_MIN, d_max=D_MAX):
    """[n, C, h, w] -> [n, h, w] depths in [d_min, d_max]."""
    x = ops.relu(ops.conv2d(depth_features, p["depth.c1.w"], p["depth.c1.b"]))
    x = ops.sigmoid(ops.conv2d(x, p["depth.c2.w"], p["depth.c2.b"]))
    n, _, h, w = x.shape
    return ops.add(ops.mul(ops.reshape(x, (n, h, w)), d_max - d_min), d_min)


def regress_gaussians(depth_features, depth, cameras, p, first_view=0):
    """One Gaussian per feature pixel for each view.

    ``cameras`` are feature-scaled; pixel (u, v) sits at (u + 0.5, v + 0.5).
    Returns one GaussianSet per view.
    """
    x = ops.relu(ops.conv2d(depth_features, p["reg.c1.w"], p["reg.c1.b"]))
    x = ops.conv2d(x, p["reg.c2.w"], p["reg.c2.b"])
    n, _, h, w = x.shape
    dvals = _value(depth)
    if dvals.shape != (n, h, w):
        raise ValueError(f"depth shape {dvals.shape} does not match regressor output {(n, h, w)}")
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    sets = []
    for i in range(n):
        raw = ops.transpose(ops.reshape(x[i], (REGRESSOR_CHANNELS, h * w)), (1, 0))
        pos = unproject_pixels(cameras[i], uu.reshape(-1), vv.reshape(-1), dvals[i].reshape(-1))
        sets.append(GaussianSet(
            positions=pos,
            opacity=ops.sigmoid(ops.reshape(raw[:, 0:1], (h * w,))),
            weight=ops.sigmoid(ops.reshape(raw[:, 1:2], (h * w,))),
            latent=raw[:, 2:],
            source_view=np.full(h * w, first_view + i, dtype=np.int64),
            pixel=np.arange(h * w, dtype=np.int64),
            depth=dvals[i].reshape(-1).copy(),
        ))
    return sets


def decode_latent(latent, p, s_min=S_MIN):
    """Linear 64 -> 19 decode.

    Returns ``(sh [N, 3, 4], rotation [N, 4], scale [N, 3], n_degenerate)``.
    SH stays differentiable; rotation and scale are plain arrays.
    Near-zero raw quaternions fall back to the identity rotation.
    """
    out = ops.add(ops.matmul(latent, p["dec.w"]), p["dec.b"])
    n = out.shape[0]
    sh = ops.reshape(out[:, 0:12], (n, 3, 4))
    raw = out.data
    q = raw[:, 12:16]
    norm = np.linalg.norm(q, axis=1)
    bad = norm < 1e-12
    rot = np.where(bad[:, None], np.array([1.0, 0.0, 0.0, 0.0]), q / np.where(bad, 1.0, norm)[:, None])
    s = raw[:, 16:19]
    scale = s_min + np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))
    return sh, rot, scale, int(bad.sum())


def decode_set(gset: GaussianSet, p, s_min=S_MIN):
    sh, rot, scale, bad = decode_latent(gset.latent, p, s_min)
    return replace(gset, sh=sh, rotation=rot, scale=scale), bad


def gru_update(h_old, h_new, w_new, p):
    """h' = (1 - z*w) h_old + (z*w) h~ with a gated candidate h~."""
    both = ops.concat([h_old, h_new], axis=1)
    z = ops.sigmoid(ops.matmul(both, p["gru.z"]))
    r = ops.sigmoid(ops.matmul(both, p["gru.r"]))
    cand = ops.tanh(ops.matmul(ops.concat([ops.mul(r, h_old), h_new], axis=1), p["gru.h"]))
    gate = ops.mul(z, ops.reshape(w_new, (-1, 1)))
    return ops.add(h_old, ops.mul(gate, ops.sub(cand, h_old)))


def match_primitives(global_set: GaussianSet, incoming: GaussianSet, camera: Camera, tau_rel, grid_hw):
    """Pairs (global index, incoming index) passing the relative depth test.

    Each incoming primitive takes at most one global partner: the smallest
    depth difference, then the lowest global index.
    """
    h, w = grid_hw
    if len(global_set) == 0 or len(incoming) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    u, v, d, valid = project_points(camera, global_set.positions)
    W, H = camera.feature_size
    ok = valid & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    gidx = np.nonzero(ok)[0]
    pix = np.floor(v[gidx]).astype(np.int64) * w + np.floor(u[gidx]).astype(np.int64)
    lookup = np.full(h * w, -1, dtype=np.int64)
    lookup[incoming.pixel] = np.arange(len(incoming))
    inc = lookup[pix]
    has = inc >= 0
    gidx, inc = gidx[has], inc[has]
    d_in = incoming.depth[inc]
    diff = np.abs(d[gidx] - d_in)
    keep = diff < tau_rel * d_in
    gidx, inc, diff = gidx[keep], inc[keep], diff[keep]
    order = np.lexsort((gidx, diff, inc))
    gidx, inc = gidx[order], inc[order]
    first = np.ones(len(inc), dtype=bool)
    first[1:] = inc[1:] != inc[:-1]
    return gidx[first], inc[first]


def _take(x, idx):
    if isinstance(x, Tensor):
        return ops.take(x, idx, axis=0)
    return np.asarray(x)[idx]


def _cat(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        g = a.graph if isinstance(a, Tensor) else b.graph
        return ops.concat([g.lift(a), g.lift(b)], axis=0)
    return np.concatenate([a, b], axis=0)


def _update_rows(base, idx, rows):
    if isinstance(base, Tensor) or isinstance(rows, Tensor):
        return ops.index_update(base, idx, rows)
    out = np.array(base, dtype=np.float64, copy=True)
    out[idx] = rows
    return out


def fuse_multiview(global_set: GaussianSet, incoming: GaussianSet, camera: Camera, tau_rel, p, grid_hw):
    """Merge ``incoming`` (one view) into ``global_set``.

    Matched latents go through the GRU gated by the incoming fusion weight;
    opacity and position become the fusion-weight average of the pair;
    unmatched incoming primitives are appended.
    """
    if tau_rel <= 0:
        raise ValueError("tau_rel must be positive")
    if len(incoming) == 0:
        return global_set
    gi, ii = match_primitives(global_set, incoming, camera, tau_rel, grid_hw)
    latent, opacity, positions = global_set.latent, global_set.opacity, global_set.positions
    if len(gi):
        h_old, h_new = _take(global_set.latent, gi), _take(incoming.latent, ii)
        w_old, w_new = _take(global_set.weight, gi), _take(incoming.weight, ii)
        a_old, a_new = _take(global_set.opacity, gi), _take(incoming.opacity, ii)
        if isinstance(h_old, Tensor):
            h_upd = gru_update(h_old, h_new, w_new, p)
            wsum = ops.add(ops.add(w_old, w_new), 1e-12)
            a_upd = ops.div(ops.add(ops.mul(w_old, a_old), ops.mul(w_new, a_new)), wsum)
        else:
            h_upd = _numpy_gru(h_old, h_new, w_new, p)
            wsum = w_old + w_new + 1e-12
            a_upd = (w_old * a_old + w_new * a_new) / wsum
        wo, wn = _value(w_old), _value(w_new)
        mu = (wo[:, None] * positions[gi] + wn[:, None] * incoming.positions[ii]) / (wo + wn + 1e-12)[:, None]
        latent = _update_rows(latent, gi, h_upd)
        opacity = _update_rows(opacity, gi, a_upd)
        positions = positions.copy()
        positions[gi] = mu
    rest = np.setdiff1d(np.arange(len(incoming)), ii)
    return GaussianSet(
        positions=np.concatenate([positions, incoming.positions[rest]]),
        opacity=_cat(opacity, _take(incoming.opacity, rest)),
        weight=_cat(global_set.weight, _take(incoming.weight, rest)),
        latent=_cat(latent, _take(incoming.latent, rest)),
        source_view=np.concatenate([global_set.source_view, incoming.source_view[rest]]),
        pixel=np.concatenate([global_set.pixel, incoming.pixel[rest]]),
        depth=np.concatenate([global_set.depth, incoming.depth[rest]]),
    )


def _numpy_gru(h_old, h_new, w_new, p):
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
    pv = {k: _value(v) for k, v in p.items()}
    both = np.concatenate([h_old, h_new], axis=1)
    z = sig(both @ pv["gru.z"])
    r = sig(both @ pv["gru.r"])
    cand = np.tanh(np.concatenate([r * h_old, h_new], axis=1) @ pv["gru.h"])
    gate = z * np.asarray(w_new)[:, None]
    return h_old + gate * (cand - h_old)


def fuse_views(sets, cameras, tau_rel, p, grid_hw):
    """Sequential fusion: start from the first view and merge the rest in order."""
    out = sets[0]
    for s, cam in zip(sets[1:], cameras[1:]):
        out = fuse_multiview(out, s, cam, tau_rel, p, grid_hw)
    return out
