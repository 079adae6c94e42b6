"""Yaw-rotated 3D boxes and their rotated IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple
    dims: tuple  # (l, w, h): extents along the box's local x, y, z
    yaw: float = 0.0
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if len(self.center) != 3 or len(self.dims) != 3:
            raise ValueError("center and dims must have three components")

    @property
    def volume(self) -> float:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise footprint corners, shape [4, 2]."""
        l, w = self.dims[0] / 2.0, self.dims[1] / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[-l, -w], [l, -w], [l, w], [-l, w]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def corners(self) -> np.ndarray:
        """All eight corners, shape [8, 3]."""
        bev = self.bev_corners()
        z0 = self.center[2] - self.dims[2] / 2.0
        z1 = self.center[2] + self.dims[2] / 2.0
        return np.concatenate([np.column_stack([bev, np.full(4, z0)]),
                               np.column_stack([bev, np.full(4, z1)])])

    def to_local(self, points) -> np.ndarray:
        """World points [..., 3] expressed in the box frame."""
        p = np.asarray(points, dtype=np.float64) - np.array(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * p[..., 0] + s * p[..., 1]
        y = -s * p[..., 0] + c * p[..., 1]
        return np.stack([x, y, p[..., 2]], axis=-1)

    def contains(self, points) -> np.ndarray:
        local = self.to_local(points)
        return np.all(np.abs(local) <= np.array(self.dims) / 2.0, axis=-1)

    def with_score(self, score) -> "Box3D":
        return Box3D(self.center, self.dims, self.yaw, self.class_id, score)


def polygon_area(poly) -> float:
    if poly is None or len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs, output = output, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inputs[-1]
        sp = side(prev)
        for cur in inputs:
            sc = side(cur)
            if sc >= 0.0:
                if sp < 0.0:
                    t = sp / (sp - sc)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif sp >= 0.0:
                t = sp / (sp - sc)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(output) if len(output) >= 3 else None


def bev_intersection(a: Box3D, b: Box3D) -> float:
    d = abs(wrap_angle(a.yaw - b.yaw))
    if d == 0.0 or d == math.pi:
        # shared axes: exact interval product in a's frame
        pb = a.to_local(np.array(b.center))
        return _overlap(0.0, a.dims[0], pb[0], b.dims[0]) * _overlap(0.0, a.dims[1], pb[1], b.dims[1])
    return polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))


def _overlap(ca, la, cb, lb):
    lo = max(ca - la / 2.0, cb - lb / 2.0)
    hi = min(ca + la / 2.0, cb + lb / 2.0)
    return max(0.0, hi - lo)


def rotated_iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-rotated boxes: BEV clip area times z overlap."""
    if a.volume <= 0.0 or b.volume <= 0.0:
        raise ValueError("degenerate box with zero volume")
    zo = _overlap(0.0, a.dims[2], b.center[2] - a.center[2], b.dims[2])
    if zo <= 0.0:
        return 0.0
    # cheap circumscribed-circle reject
    ra = math.hypot(a.dims[0], a.dims[1]) / 2.0
    rb = math.hypot(b.dims[0], b.dims[1]) / 2.0
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    inter = bev_intersection(a, b) * zo
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))
