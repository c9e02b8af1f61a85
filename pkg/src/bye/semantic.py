"""Per-object semantic features from per-mask feature vectors.

Features are fused into a sparse voxel map by running averages; an object's
feature is picked from the nearest voxel features of its points via DBSCAN
(cosine distance) on the major cluster.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from bye.geometry import back_project_mask
from bye.scores import ScoreMatrix

log = logging.getLogger(__name__)


class UnobservedObjectError(ValueError):
    pass


@dataclass
class SemanticFeatureSet:
    dim: int
    records: dict = field(default_factory=dict)  # (frame index, mask id) -> unit vector

    def __post_init__(self):
        for key, v in list(self.records.items()):
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.dim,):
                raise ValueError(f"feature {key} has shape {v.shape}, expected ({self.dim},)")
            n = np.linalg.norm(v)
            if n == 0:
                raise ValueError(f"feature {key} is the zero vector")
            # already-unit vectors (e.g. read back from float32 storage) stay bit-identical
            self.records[key] = v if abs(n - 1.0) <= 1e-6 else v / n

    def __len__(self):
        return len(self.records)

    def get(self, frame_index, mask_id):
        return self.records.get((int(frame_index), int(mask_id)))


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 0.05
    min_pts: int = 5

    def __post_init__(self):
        if not self.eps > 0 or self.min_pts < 1:
            raise ValueError("need eps > 0 and min_pts >= 1")


class FeatureVoxelMap:
    def __init__(self, dim, resolution=0.05):
        self.dim = dim
        self.resolution = resolution
        self.voxels = {}  # (i, j, k) -> [mean vector, count]

    def __len__(self):
        return len(self.voxels)

    def add(self, key, feature, times=1):
        """Running-mean update equivalent to ``times`` sequential additions of ``feature``."""
        entry = self.voxels.get(key)
        if entry is None:
            self.voxels[key] = [np.array(feature, dtype=np.float64), times]
            return
        mean, count = entry
        total = count + times
        mean += (feature - mean) * (times / total)
        entry[1] = total

    def arrays(self):
        keys = sorted(self.voxels)
        centers = (np.array(keys, dtype=np.float64) + 0.5) * self.resolution
        feats = np.array([self.voxels[k][0] for k in keys])
        counts = np.array([self.voxels[k][1] for k in keys])
        return keys, centers.reshape(-1, 3), feats.reshape(-1, self.dim), counts


def fuse_voxel_features(trial, features, resolution=0.05):
    vmap = FeatureVoxelMap(features.dim, resolution)
    missing = 0
    for frame in trial.frames:
        ids = np.unique(frame.mask)
        for inst in ids[ids != 0]:
            f = features.get(frame.index, inst)
            if f is None:
                missing += 1
                continue
            cloud = back_project_mask(frame.depth, frame.mask == inst, frame.color, trial.intrinsics)
            if cloud.is_empty:
                continue
            world = frame.pose.apply(cloud.xyz)
            keys = np.floor(world / resolution).astype(np.int64)
            uniq, counts = np.unique(keys, axis=0, return_counts=True)
            for key, c in zip(map(tuple, uniq.tolist()), counts.tolist()):
                vmap.add(key, f, c)
    if missing:
        log.warning("%d masks in trial %s have no semantic feature", missing, trial.trial_id)
    return vmap


def _normalize_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero feature vector")
    return x / n


def dbscan(features, eps, min_pts, weights=None, chunk=1024):
    """DBSCAN on cosine distance; returns labels (-1 = noise).

    ``weights`` counts how many identical copies each row stands for.
    Clusters are grown from core points in index order, so a border point
    joins the first cluster that reaches it.
    """
    x = _normalize_rows(np.asarray(features, dtype=np.float64))
    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    neighbours = []
    for s in range(0, n, chunk):
        d = 1.0 - x[s : s + chunk] @ x.T
        neighbours.extend(np.flatnonzero(row <= eps) for row in d)
    core = np.array([w[nb].sum() >= min_pts for nb in neighbours], dtype=bool)
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            p = stack.pop()
            for q in neighbours[p]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        stack.append(q)
        cluster += 1
    return labels


@dataclass
class ObjectFeature:
    vector: np.ndarray
    from_cluster: bool  # False when DBSCAN found no cluster and the mean was used
    n_collected: int


def collect_features(points, vmap):
    """Nearest voxel feature within 2 x resolution for each point: (voxel rows, feature matrix)."""
    keys, centers, feats, _ = vmap.arrays()
    if not keys:
        return np.zeros(0, dtype=np.int64), feats
    tree = cKDTree(centers)
    dist, idx = tree.query(np.asarray(points, dtype=np.float64), k=1, distance_upper_bound=2 * vmap.resolution)
    return idx[np.isfinite(dist)], feats


def object_feature(instance_cloud, vmap, cfg=DbscanConfig()):
    if len(instance_cloud) == 0:
        raise ValueError("instance cloud is empty")
    rows, feats = collect_features(instance_cloud.xyz, vmap)
    if rows.size == 0:
        raise UnobservedObjectError("object unobserved in feature map")
    # points sharing a voxel carry identical features: cluster the distinct ones with multiplicities
    uniq, mult = np.unique(rows, return_counts=True)
    cand = feats[uniq]
    labels = dbscan(cand, cfg.eps, cfg.min_pts, weights=mult)
    if np.all(labels < 0):
        return ObjectFeature((cand * mult[:, None]).sum(0) / mult.sum(), False, int(rows.size))
    sizes = np.array([mult[labels == c].sum() for c in range(labels.max() + 1)])
    major = int(np.argmax(sizes))
    members = np.flatnonzero(labels == major)
    centre = (cand[members] * mult[members, None]).sum(0) / mult[members].sum()
    cos = _normalize_rows(cand[members]) @ (centre / np.linalg.norm(centre))
    return ObjectFeature(cand[members[int(np.argmax(cos))]].copy(), True, int(rows.size))


def object_features(instance_map, vmap, cfg=DbscanConfig()):
    """{instance id: ObjectFeature} for every instance of a map."""
    return {i: object_feature(instance_map.instances[i], vmap, cfg) for i in instance_map.ids}


def vlm_score_matrix(ref_features, new_features, ref_ids=None, new_ids=None):
    """Cosine similarity between every new (row) and reference (column) feature."""
    ref = np.asarray(ref_features, dtype=np.float64)
    new = np.asarray(new_features, dtype=np.float64)
    if ref.ndim != 2 or new.ndim != 2 or ref.shape[1] != new.shape[1]:
        raise ValueError(f"feature dimensions disagree: {ref.shape} vs {new.shape}")
    vals = _normalize_rows(new) @ _normalize_rows(ref).T
    ref_ids = list(range(ref.shape[0])) if ref_ids is None else list(ref_ids)
    new_ids = list(range(new.shape[0])) if new_ids is None else list(new_ids)
    return ScoreMatrix(np.clip(vals, -1.0, 1.0), new_ids, ref_ids)
