"""CPU splat renderer: EWA projection, depth sort, front-to-back alpha
compositing with a 3-sigma footprint.

Gradients reach opacity and colour (hence SH) only; footprints and the
depth order are treated as constants of the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..diffcore import Tensor, ops
from ..geometry import Camera
from ..parallel import run_chunks

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
NEAR = 0.05
MIN_CONDITION = 1e-12
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)


def quat_to_rotmat(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=1)


def sh_basis(positions, camera_center):
    """Degree-1 real SH basis [N, 4] in the viewing direction."""
    d = positions - camera_center
    d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack([np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=1)


def sh_colors(sh, basis):
    """colour = 0.5 + sum_k basis_k * sh[:, c, k]; works on Tensors and arrays."""
    if isinstance(sh, Tensor):
        return ops.add(ops.sum(ops.mul(sh, basis[:, None, :]), axis=2), 0.5)
    return 0.5 + np.einsum("nck,nk->nc", sh, basis)


@dataclass
class Footprints:
    mean2d: np.ndarray  # [N, 2]
    conic: np.ndarray  # [N, 3] (a, b, c) of the inverse 2D covariance
    radius: np.ndarray  # [N] pixels
    depth: np.ndarray  # [N]
    order: np.ndarray  # visible indices sorted by (depth, index)
    n_singular: int


def project_footprints(positions, rotation, scale, camera: Camera) -> Footprints:
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    W = camera.P[:3, :3]
    tcam = positions @ W.T + camera.P[:3, 3]
    z = tcam[:, 2]
    front = z > NEAR
    M = camera.projection
    zs = np.where(front, z, 1.0)
    h = positions @ M[:, :3].T + M[:, 3]
    mean2d = np.stack([h[:, 0] / zs, h[:, 1] / zs], axis=1)
    fx = camera.S[0, 0] * camera.K[0, 0]
    fy = camera.S[1, 1] * camera.K[1, 1]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * tcam[:, 0] / zs ** 2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * tcam[:, 1] / zs ** 2
    R = quat_to_rotmat(np.asarray(rotation, dtype=np.float64))
    cov3 = np.einsum("nij,nj,nkj->nik", R, np.asarray(scale, dtype=np.float64) ** 2, R)
    T = J @ W
    cov2 = T @ cov3 @ np.transpose(T, (0, 2, 1))
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    tr = a + c
    disc = np.sqrt(np.maximum(((a - c) / 2) ** 2 + b * b, 0.0))
    lmax = tr / 2 + disc
    lmin = tr / 2 - disc
    cond = np.where(lmax > 0, lmin / np.where(lmax > 0, lmax, 1.0), 0.0)
    singular = front & ~(cond >= MIN_CONDITION)
    ok = front & ~singular
    det = np.where(ok, a * c - b * b, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    radius = np.where(ok, 3.0 * np.sqrt(np.maximum(lmax, 0.0)), 0.0)
    vis = np.nonzero(ok)[0]
    order = vis[np.lexsort((vis, z[vis]))]
    return Footprints(mean2d, conic, radius, z, order.astype(np.int64), int(singular.sum()))


@numba.njit(nogil=True, cache=True)
def _composite_rows(order, mean2d, conic, radius, opacity, colors, bg, H, W, r0, r1, image, trans):
    for i in range(r0, r1):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            for kk in range(order.shape[0]):
                k = order[kk]
                dx = px - mean2d[k, 0]
                dy = py - mean2d[k, 1]
                r = radius[k]
                if dx > r or dx < -r or dy > r or dy < -r:
                    continue
                q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                if q > 9.0:
                    continue
                a = opacity[k] * np.exp(-0.5 * q)
                w = T * a
                c0 += w * colors[k, 0]
                c1 += w * colors[k, 1]
                c2 += w * colors[k, 2]
                T = T * (1.0 - a)
            image[0, i, j] = c0 + T * bg[0]
            image[1, i, j] = c1 + T * bg[1]
            image[2, i, j] = c2 + T * bg[2]
            trans[i, j] = T


@numba.njit(cache=True)
def _composite_backward(order, mean2d, conic, radius, opacity, colors, bg, H, W, gout, g_op, g_col):
    n = order.shape[0]
    ks = np.empty(n, dtype=np.int64)
    alphas = np.empty(n)
    falloff = np.empty(n)
    ts = np.empty(n)
    for i in range(H):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            T = 1.0
            m = 0
            for kk in range(n):
                k = order[kk]
                dx = px - mean2d[k, 0]
                dy = py - mean2d[k, 1]
                r = radius[k]
                if dx > r or dx < -r or dy > r or dy < -r:
                    continue
                q = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                if q > 9.0:
                    continue
                g = np.exp(-0.5 * q)
                a = opacity[k] * g
                ks[m] = k
                alphas[m] = a
                falloff[m] = g
                ts[m] = T
                m += 1
                T = T * (1.0 - a)
            b0 = bg[0]
            b1 = bg[1]
            b2 = bg[2]
            go0 = gout[0, i, j]
            go1 = gout[1, i, j]
            go2 = gout[2, i, j]
            for s in range(m - 1, -1, -1):
                k = ks[s]
                a = alphas[s]
                t = ts[s]
                g_col[k, 0] += go0 * t * a
                g_col[k, 1] += go1 * t * a
                g_col[k, 2] += go2 * t * a
                da = t * ((colors[k, 0] - b0) * go0 + (colors[k, 1] - b1) * go1 + (colors[k, 2] - b2) * go2)
                g_op[k] += da * falloff[s]
                b0 = a * colors[k, 0] + (1.0 - a) * b0
                b1 = a * colors[k, 1] + (1.0 - a) * b1
                b2 = a * colors[k, 2] + (1.0 - a) * b2


def composite(fp: Footprints, opacity, colors, image_size, background, threads=None):
    """Forward compositing on plain arrays. Returns (image [3, H, W], T [H, W])."""
    W, H = image_size
    opacity = np.ascontiguousarray(opacity, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    image = np.empty((3, H, W))
    trans = np.empty((H, W))

    def kernel(a, b):
        _composite_rows(fp.order, fp.mean2d, fp.conic, fp.radius, opacity, colors, bg, H, W, a, b, image, trans)

    run_chunks(kernel, H, threads, min_chunk=1)
    return image, trans


def render_camera(camera: Camera, image_size) -> Camera:
    """Same camera with its feature scale reset to produce ``image_size``."""
    W0, H0 = camera.image_size
    return camera.scaled(image_size[0] / W0, image_size[1] / H0)


def render(gset, camera: Camera, image_size=None, background=(0.0, 0.0, 0.0), threads=None, stats=None):
    """Render a decoded GaussianSet into [3, H, W].

    Returns a Tensor when opacity or SH are Tensors, else an array.
    ``stats`` (a dict) receives the singular-footprint count.
    """
    image_size = tuple(camera.image_size if image_size is None else image_size)
    if image_size[0] < 1 or image_size[1] < 1:
        raise ValueError("image_size must be at least 1x1")
    cam = render_camera(camera, image_size)
    W, H = image_size
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if len(gset) == 0:
        return np.broadcast_to(bg[:, None, None], (3, H, W)).copy()
    fp = project_footprints(gset.positions, gset.rotation, gset.scale, cam)
    if stats is not None:
        stats["singular"] = stats.get("singular", 0) + fp.n_singular
    basis = sh_basis(gset.positions, camera.center)
    colors = sh_colors(gset.sh, basis)
    opacity = gset.opacity
    op_v = opacity.data if isinstance(opacity, Tensor) else np.asarray(opacity)
    col_v = colors.data if isinstance(colors, Tensor) else np.asarray(colors)
    image, _ = composite(fp, op_v, col_v, image_size, bg, threads)
    if not (isinstance(opacity, Tensor) or isinstance(colors, Tensor)):
        return image
    g = opacity.graph if isinstance(opacity, Tensor) else colors.graph
    opacity, colors = g.lift(opacity), g.lift(colors)
    op_c = np.ascontiguousarray(op_v, dtype=np.float64)
    col_c = np.ascontiguousarray(col_v, dtype=np.float64)

    def vjp(go):
        g_op = np.zeros(len(op_c))
        g_col = np.zeros((len(op_c), 3))
        _composite_backward(fp.order, fp.mean2d, fp.conic, fp.radius, op_c, col_c, bg, H, W,
                            np.ascontiguousarray(go), g_op, g_col)
        return g_op, g_col

    return g.record("render", (opacity, colors), image, vjp)


def render_loss(rendered, target):
    """Mean squared error over all pixels and channels."""
    target_shape = np.shape(target.data if isinstance(target, Tensor) else target)
    if rendered.shape != target_shape:
        raise ValueError(f"render_loss: shape mismatch {rendered.shape} vs {target_shape}")
    if isinstance(rendered, Tensor):
        return ops.mean(ops.square(ops.sub(rendered, target)))
    return float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))
