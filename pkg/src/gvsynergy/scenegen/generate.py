"""Deterministic synthetic rooms: coloured boxes, orbit cameras, ray-cast
RGB and exact camera-frame depth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..detection.boxes import Box3D
from ..geometry import Camera, project_points
from .rng import Xoshiro256

ROOM_MIN = (0.0, 0.0, 0.0)
ROOM_MAX = (6.4, 6.4, 2.56)
PLACEMENT_ATTEMPTS = 1000
POSE_ATTEMPTS = 200
FOV_DEG = 75.0
EYE_CLEARANCE = 0.5
LIGHT_DIR = np.array([0.35, 0.25, 1.0]) / np.linalg.norm([0.35, 0.25, 1.0])
AMBIENT = 0.35

# class id -> (name, base dims (l, w, h) in metres, base colour)
CLASSES = (
    ("table", (1.4, 0.9, 0.75), (0.78, 0.45, 0.18)),
    ("chair", (0.7, 0.7, 0.95), (0.18, 0.32, 0.85)),
    ("cabinet", (1.0, 0.6, 1.8), (0.22, 0.68, 0.28)),
)
N_CLASSES = len(CLASSES)

# floor, ceiling, -x, +x, -y, +y walls
SURFACE_COLORS = np.array([
    [0.55, 0.53, 0.50],
    [0.92, 0.92, 0.92],
    [0.80, 0.74, 0.68],
    [0.68, 0.74, 0.80],
    [0.74, 0.80, 0.70],
    [0.82, 0.78, 0.62],
])


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneObject:
    box: Box3D
    color: tuple


@dataclass
class SyntheticScene:
    room: tuple  # (min xyz, max xyz)
    objects: list
    cameras: list
    images: list  # [3, H, W] in [0, 1]
    depths: list  # [H, W] camera-frame z, metres
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def boxes(self):
        return [o.box for o in self.objects]

    @property
    def n_views(self):
        return len(self.cameras)

    @property
    def image_size(self):
        return self.cameras[0].image_size


def _rect_overlap(a: Box3D, b: Box3D, margin: float) -> bool:
    """Separating-axis test on footprints grown by ``margin``."""
    pa = Box3D(a.center, (a.dims[0] + margin, a.dims[1] + margin, a.dims[2]), a.yaw).bev_corners()
    pb = Box3D(b.center, (b.dims[0] + margin, b.dims[1] + margin, b.dims[2]), b.yaw).bev_corners()
    for poly in (pa, pb):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            qa, qb = pa @ axis, pb @ axis
            if qa.max() < qb.min() or qb.max() < qa.min():
                return False
    return True


def _place_objects(rng: Xoshiro256, n_objects: int, margin=0.1):
    lo, hi = np.array(ROOM_MIN), np.array(ROOM_MAX)
    objects = []
    for k in range(n_objects):
        for _ in range(PLACEMENT_ATTEMPTS):
            cls = rng.integers(N_CLASSES)
            _, base, color = CLASSES[cls]
            dims = tuple(d * rng.uniform(0.85, 1.15) for d in base)
            yaw = rng.uniform(-math.pi, math.pi)
            cx = rng.uniform(lo[0], hi[0])
            cy = rng.uniform(lo[1], hi[1])
            col = tuple(float(np.clip(c + rng.uniform(-0.08, 0.08), 0.0, 1.0)) for c in color)
            box = Box3D((cx, cy, dims[2] / 2.0), dims, yaw, cls)
            bev = box.bev_corners()
            if np.any(bev < lo[:2] + margin) or np.any(bev > hi[:2] - margin):
                continue
            if any(_rect_overlap(box, o.box, margin) for o in objects):
                continue
            objects.append(SceneObject(box, col))
            break
        else:
            raise PlacementError(
                f"could not place object {k + 1} of {n_objects} without overlap "
                f"after the {PLACEMENT_ATTEMPTS}-attempt limit")
    return objects


def _orbit_cameras(rng: Xoshiro256, n_views: int, image_size, objects):
    W, H = image_size
    focal = 0.5 * W / math.tan(math.radians(FOV_DEG) / 2.0)
    cx, cy = (ROOM_MIN[0] + ROOM_MAX[0]) / 2.0, (ROOM_MIN[1] + ROOM_MAX[1]) / 2.0
    phase = rng.uniform(0.0, 2.0 * math.pi)
    cams = []
    for i in range(n_views):
        for _ in range(POSE_ATTEMPTS):
            ang = phase + 2.0 * math.pi * i / n_views + rng.uniform(-0.2, 0.2)
            radius = rng.uniform(1.5, 2.7)
            height = rng.uniform(1.4, 1.9)
            eye = (cx + radius * math.cos(ang), cy + radius * math.sin(ang), height)
            if all(_eye_clearance(o.box, eye) >= EYE_CLEARANCE for o in objects):
                break
        else:
            return None
        target = (cx + rng.uniform(-0.4, 0.4), cy + rng.uniform(-0.4, 0.4), rng.uniform(0.3, 0.7))
        cams.append(Camera.look_at(eye, target, focal, (W, H)))
    return cams


def _eye_clearance(box: Box3D, eye) -> float:
    local = box.to_local(np.asarray(eye))
    gap = np.maximum(np.abs(local) - np.array(box.dims) / 2.0, 0.0)
    return float(np.linalg.norm(gap))


def _box_visible_views(box: Box3D, cameras) -> int:
    corners = box.corners()
    seen = 0
    for cam in cameras:
        u, v, _, valid = project_points(cam, corners)
        W, H = cam.image_size
        inside = valid & (u >= 0) & (u < W) & (v >= 0) & (v < H)
        if inside.mean() >= 0.1:
            seen += 1
    return seen


def pixel_rays(camera: Camera):
    """Per-pixel ray origins and directions scaled so that t is camera z."""
    W, H = camera.image_size
    K = camera.K
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    dcam = np.stack([(jj - K[0, 2]) / K[0, 0], (ii - K[1, 2]) / K[1, 1], np.ones_like(jj)], axis=-1)
    R = camera.P[:3, :3]
    return camera.center, dcam @ R  # world dir = R^T dcam


def raycast(objects, camera: Camera, room=(ROOM_MIN, ROOM_MAX)):
    """Ray-cast one view. Returns (image [3, H, W], depth [H, W], hit id [H, W]).

    Hit ids: -1..-6 for room surfaces (floor, ceiling, -x, +x, -y, +y),
    k >= 0 for object k.
    """
    origin, dirs = pixel_rays(camera)
    H, W = dirs.shape[:2]
    lo, hi = np.asarray(room[0], dtype=np.float64), np.asarray(room[1], dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(dirs > 0, (hi - origin) / dirs, np.inf)
        t_lo = np.where(dirs < 0, (lo - origin) / dirs, np.inf)
    t_exit = np.minimum(t_hi, t_lo)  # [H, W, 3]
    axis = np.argmin(t_exit, axis=-1)
    depth = np.take_along_axis(t_exit, axis[..., None], axis=-1)[..., 0]
    positive = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0
    # surface index: z- floor(0) z+ ceiling(1), x- (2) x+ (3), y- (4) y+ (5)
    surf = np.where(axis == 2, np.where(positive, 1, 0),
                    np.where(axis == 0, np.where(positive, 3, 2), np.where(positive, 5, 4)))
    normals_room = np.array([[0, 0, 1], [0, 0, -1], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
    normal = normals_room[surf]
    color = SURFACE_COLORS[surf]
    hit = -1 - surf

    for k, obj in enumerate(objects):
        box = obj.box
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rel = origin - np.array(box.center)
        o_loc = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
        d_loc = np.stack([c * dirs[..., 0] + s * dirs[..., 1], -s * dirs[..., 0] + c * dirs[..., 1], dirs[..., 2]], -1)
        half = np.array(box.dims) / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o_loc) / d_loc
            t2 = (half - o_loc) / d_loc
        tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
        near_axis = np.argmax(tmin, axis=-1)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        ok = (t_near <= t_far) & (t_near > 1e-9) & (t_near < depth)
        if not ok.any():
            continue
        d_ax = np.take_along_axis(d_loc, near_axis[..., None], axis=-1)[..., 0]
        n_loc = np.zeros(dirs.shape)
        np.put_along_axis(n_loc, near_axis[..., None], np.where(d_ax > 0, -1.0, 1.0)[..., None], axis=-1)
        n_world = np.stack([c * n_loc[..., 0] - s * n_loc[..., 1], s * n_loc[..., 0] + c * n_loc[..., 1], n_loc[..., 2]], -1)
        depth = np.where(ok, t_near, depth)
        normal = np.where(ok[..., None], n_world, normal)
        color = np.where(ok[..., None], np.array(obj.color), color)
        hit = np.where(ok, k, hit)

    shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, None)
    image = np.clip(color * shade[..., None], 0.0, 1.0)
    return np.ascontiguousarray(image.transpose(2, 0, 1)), depth, hit


def generate_scene(seed: int, n_objects: int = 4, image_size=(64, 64), n_views: int = 8) -> SyntheticScene:
    """Pure function of its arguments."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    W, H = int(image_size[0]), int(image_size[1])
    rng = Xoshiro256(seed)
    objects = _place_objects(rng, n_objects)
    need = min(2, n_views)
    for _ in range(POSE_ATTEMPTS):
        cameras = _orbit_cameras(rng, n_views, (W, H), objects)
        if cameras is not None and all(_box_visible_views(o.box, cameras) >= need for o in objects):
            break
    else:
        raise PlacementError(f"no clear camera orbit sees every object in {need} views "
                             f"after {POSE_ATTEMPTS} attempts")
    images, depths = [], []
    for cam in cameras:
        img, dep, _ = raycast(objects, cam)
        images.append(img)
        depths.append(dep)
    return SyntheticScene((ROOM_MIN, ROOM_MAX), objects, cameras, images, depths, seed)
