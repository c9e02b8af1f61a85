"""Pinhole camera math: depth back-projection and rigid transforms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CAMERA = "camera"
WORLD = "world"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        if not self.depth_scale > 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping camera-frame points into the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() >= 1e-5 or np.linalg.det(r) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-6:
            raise ValueError("bottom row of a pose matrix must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other):
        """self after other: x -> self(other(x))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, xyz):
        return np.asarray(xyz, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass
class PointCloud:
    """N x 6 array of (x, y, z, r, g, b) rows with colors in [0, 1]."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 6), dtype=np.float64))
    frame: str = CAMERA

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise ValueError(f"point cloud must be N x 6, got {pts.shape}")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def is_empty(self):
        return len(self) == 0

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def rgb(self):
        return self.points[:, 3:]


def back_project_mask(depth, mask, color, intr):
    """Lift masked depth pixels into a camera-frame cloud.

    ``mask`` is a boolean H x W array.  Pixels with zero or non-finite depth
    are dropped; the remaining points keep row-major pixel order.  When no
    pixel survives an empty cloud is returned (check ``cloud.is_empty``).
    """
    depth = np.asarray(depth)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise ValueError(f"mask shape {mask.shape} does not match depth shape {depth.shape}")
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {intr.height}x{intr.width}")
    v, u = np.nonzero(mask)
    d = depth[v, u].astype(np.float64) * intr.depth_scale
    ok = np.isfinite(d) & (d > 0)
    v, u, d = v[ok], u[ok], d[ok]
    x = (u - intr.cx) * d / intr.fx
    y = (v - intr.cy) * d / intr.fy
    col = np.asarray(color)[v, u]
    if np.issubdtype(col.dtype, np.integer):
        col = col.astype(np.float64) / 255.0
    pts = np.empty((d.shape[0], 6), dtype=np.float64)
    pts[:, 0] = x
    pts[:, 1] = y
    pts[:, 2] = d
    pts[:, 3:] = np.clip(col, 0.0, 1.0)
    return PointCloud(pts, CAMERA)


def project_points(xyz, intr):
    """Camera-frame points to (u, v) pixel coordinates."""
    xyz = np.asarray(xyz, dtype=np.float64)
    u = xyz[:, 0] * intr.fx / xyz[:, 2] + intr.cx
    v = xyz[:, 1] * intr.fy / xyz[:, 2] + intr.cy
    return np.stack([u, v], axis=1)


def transform_cloud(cloud, pose, frame=WORLD):
    pts = cloud.points.copy()
    pts[:, :3] = pose.apply(cloud.xyz)
    return PointCloud(pts, frame)
