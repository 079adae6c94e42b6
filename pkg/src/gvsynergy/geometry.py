"""Pinhole camera: world <-> pixel projection with a feature-scale matrix.

Pixel convention: pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)`` in
``(u, v)``; its centre is ``(j + 0.5, i + 0.5)``. Camera frame is x right,
y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DEPTH_EPS = 1e-9


class BehindCamera(ValueError):
    """Raised when a point projects with depth <= 1e-9."""


class PixelCoord(NamedTuple):
    u: float
    v: float
    depth: float


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray  # 3x4 intrinsics
    P: np.ndarray  # 4x4 world-to-camera
    S: np.ndarray = field(default_factory=lambda: np.eye(3))  # diag(sx, sy, 1)
    image_size: tuple = (64, 64)  # (W, H) in full-resolution pixels

    def __post_init__(self):
        K = np.array(self.K, dtype=np.float64).reshape(3, 4)
        P = np.array(self.P, dtype=np.float64).reshape(4, 4)
        S = np.array(self.S, dtype=np.float64).reshape(3, 3)
        for a in (K, P, S):
            a.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        R = P[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("extrinsic rotation block is not a proper rotation")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(K[2], [0.0, 0.0, 1.0, 0.0]):
            raise ValueError("intrinsics third row must be [0, 0, 1, 0]")
        if (S[0, 0] <= 0 or S[1, 1] <= 0 or S[2, 2] != 1.0
                or np.count_nonzero(S - np.diag(np.diag(S)))):
            raise ValueError("S must be diag(sx, sy, 1) with sx, sy > 0")
        full = S @ K @ P
        full.setflags(write=False)
        object.__setattr__(self, "_M", full)

    def __eq__(self, other):
        return (isinstance(other, Camera) and np.array_equal(self.K, other.K)
                and np.array_equal(self.P, other.P) and np.array_equal(self.S, other.S)
                and self.image_size == other.image_size)

    @property
    def projection(self) -> np.ndarray:
        """The 3x4 matrix S.K.P."""
        return self._M

    @property
    def feature_size(self) -> tuple:
        """(W_feat, H_feat): image bounds after the feature scale."""
        return (self.image_size[0] * self.S[0, 0], self.image_size[1] * self.S[1, 1])

    @property
    def center(self) -> np.ndarray:
        R, t = self.P[:3, :3], self.P[:3, 3]
        return -R.T @ t

    def scaled(self, sx, sy=None) -> "Camera":
        sy = sx if sy is None else sy
        return Camera(self.K, self.P, np.diag([sx, sy, 1.0]), self.image_size)

    def to_dict(self) -> dict:
        return {
            "K": self.K.reshape(-1).tolist(),
            "P": self.P.reshape(-1).tolist(),
            "S": self.S.reshape(-1).tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(np.array(d["K"]).reshape(3, 4), np.array(d["P"]).reshape(4, 4),
                   np.array(d.get("S", np.eye(3).reshape(-1))).reshape(3, 3), tuple(d["image_size"]))

    @classmethod
    def look_at(cls, eye, target, focal, image_size, up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with a world z-up vector."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        P = np.eye(4)
        P[:3, :3] = R
        P[:3, 3] = -R @ eye
        W, H = image_size
        K = np.array([[focal, 0.0, W / 2.0, 0.0],
                      [0.0, focal, H / 2.0, 0.0],
                      [0.0, 0.0, 1.0, 0.0]])
        return cls(K, P, np.eye(3), (W, H))


def project_points(camera: Camera, points) -> tuple:
    """Vectorised projection of ``points`` [..., 3].

    Returns ``(u, v, depth, valid)``; ``valid`` is False where depth <= 1e-9
    (u, v are NaN there).
    """
    pts = np.asarray(points, dtype=np.float64)
    M = camera.projection
    h = pts @ M[:, :3].T + M[:, 3]
    depth = h[..., 2]
    valid = depth > DEPTH_EPS
    safe = np.where(valid, depth, 1.0)
    u = np.where(valid, h[..., 0] / safe, np.nan)
    v = np.where(valid, h[..., 1] / safe, np.nan)
    return u, v, depth, valid


def project_point(camera: Camera, p) -> PixelCoord:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("point must be a finite 3-vector")
    u, v, depth, valid = project_points(camera, p)
    if not valid:
        raise BehindCamera(f"point {p.tolist()} is at or behind the camera (depth {float(depth):.3g})")
    return PixelCoord(float(u), float(v), float(depth))


def unproject_pixels(camera: Camera, u, v, depth) -> np.ndarray:
    """Vectorised inverse of :func:`project_points`; returns [..., 3]."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    M = camera.projection
    rhs = np.stack([u * depth, v * depth, depth], axis=-1) - M[:, 3]
    return np.linalg.solve(M[:, :3], rhs.reshape(-1, 3).T).T.reshape(u.shape + (3,))


def unproject_pixel(camera: Camera, u, v, depth) -> np.ndarray:
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return unproject_pixels(camera, u, v, depth)


def in_bounds(camera: Camera, u, v):
    """Half-open validity test on feature-grid coordinates (works elementwise)."""
    W, H = camera.feature_size
    res = (u >= 0) & (u < W) & (v >= 0) & (v < H)
    return bool(res) if np.ndim(res) == 0 else res
