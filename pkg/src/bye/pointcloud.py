"""Point-cloud preprocessing and augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bye.geometry import PointCloud


class EmptyObservationError(ValueError):
    pass


class ObservationTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    voxel_resolution: float = 0.01
    max_points: int = 1024
    min_points: int = 50

    def __post_init__(self):
        if not self.voxel_resolution > 0:
            raise ValueError("voxel_resolution must be positive")
        if self.max_points < 1 or self.min_points < 1:
            raise ValueError("max_points and min_points must be >= 1")


@dataclass(frozen=True)
class AugmentConfig:
    jitter_max: float = 0.03
    rot_max_deg: float = 30.0

    def __post_init__(self):
        if self.jitter_max < 0:
            raise ValueError("jitter_max must be >= 0")
        if not 0 <= self.rot_max_deg <= 180:
            raise ValueError("rot_max_deg must lie in [0, 180]")


def zero_center(cloud):
    """Subtract the positional mean; returns (centered cloud, centroid).

    The mean and the subtraction run in float64 and the result is rounded
    to float32, so a translated copy of a float64 cloud centers to the same
    float32 coordinates.
    """
    if len(cloud) == 0:
        raise EmptyObservationError("empty observation")
    xyz = cloud.xyz.astype(np.float64)
    centroid = xyz.mean(axis=0)
    pts = cloud.points.astype(np.float32)
    pts[:, :3] = xyz - centroid
    return PointCloud(pts, cloud.frame), centroid


def voxel_downsample(cloud, resolution):
    """Replace the points of each occupied voxel by their centroid (position and color).

    Output rows are ordered by lexicographic voxel index.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy(), cloud.frame)
    keys = np.floor(cloud.xyz.astype(np.float64) / resolution).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = counts.shape[0]
    src = cloud.points.astype(np.float64)
    out = np.empty((n, 6), dtype=cloud.points.dtype)
    for c in range(6):
        out[:, c] = np.bincount(inverse, weights=src[:, c], minlength=n) / counts
    return PointCloud(out, cloud.frame)


def farthest_point_indices(xyz, k):
    n = xyz.shape[0]
    if n <= k:
        return np.arange(n)
    xyz = np.asarray(xyz, dtype=np.float64)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    dist = ((xyz - xyz[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((xyz - xyz[nxt]) ** 2).sum(axis=1))
    return chosen


def farthest_point_sample(cloud, k):
    """Greedy max-min subset of ``k`` points seeded at index 0 (ties -> lowest index)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(cloud) <= k:
        return PointCloud(cloud.points.copy(), cloud.frame)
    idx = farthest_point_indices(cloud.xyz, k)
    return PointCloud(cloud.points[idx], cloud.frame)


def preprocess(cloud, cfg=PreprocessConfig()):
    if len(cloud) == 0:
        raise EmptyObservationError("empty observation")
    if len(cloud) < cfg.min_points:
        raise ObservationTooSmallError(f"observation too small: {len(cloud)} < {cfg.min_points} points")
    if len(cloud) <= cfg.max_points:
        return PointCloud(cloud.points.copy(), cloud.frame)
    out = voxel_downsample(cloud, cfg.voxel_resolution)
    if len(out) > cfg.max_points:
        out = farthest_point_sample(out, cfg.max_points)
    return out


def prepare_observation(cloud, cfg=PreprocessConfig()):
    """Zero-center, preprocess, and re-center a raw observation.

    Returns (cloud, centroid) where the centroid is the total subtracted
    offset in the input frame.  The second centering removes the small
    mean shift introduced by voxel averaging or point selection.
    """
    centered, c0 = zero_center(cloud)
    reduced = preprocess(centered, cfg)
    if len(reduced) == len(centered):
        return reduced, c0
    recentered, c1 = zero_center(reduced)
    return recentered, c0 + c1


def rotation_xyz(ax, ay, az):
    """Rz(az) @ Ry(ay) @ Rx(ax) for angles in radians."""
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(cloud, cfg, rng):
    """Random jitter, then rotations about X, Y and Z.

    Draw order from ``rng``: N x 3 standard normals (jitter directions),
    N uniforms (jitter magnitude fractions), then three uniform angles in
    [0, rot_max_deg] for X, Y, Z.  Draws happen even when a range is zero so
    the stream stays aligned across configs.
    """
    n = len(cloud)
    dirs = rng.standard_normal((n, 3))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    mags = rng.uniform(0.0, 1.0, size=(n, 1)) * cfg.jitter_max
    angles = np.deg2rad(rng.uniform(0.0, cfg.rot_max_deg, size=3))
    xyz = cloud.xyz.astype(np.float64) + dirs / norms * mags
    xyz = xyz @ rotation_xyz(*angles).T
    pts = cloud.points.copy()
    pts[:, :3] = xyz
    return PointCloud(pts, cloud.frame)
