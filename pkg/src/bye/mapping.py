"""Instance-level map construction and the partial-observation dataset."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bye.geometry import WORLD, CameraIntrinsics, PointCloud, Pose, back_project_mask, transform_cloud
from bye.pointcloud import PreprocessConfig, prepare_observation, voxel_downsample


class NoValidObservationsError(ValueError):
    pass


@dataclass
class ObservationFrame:
    depth: np.ndarray  # H x W, stored units (meters after depth_scale)
    mask: np.ndarray  # H x W instance ids, 0 = background
    color: np.ndarray  # H x W x 3, uint8 or float in [0, 1]
    pose: Pose  # camera -> world
    index: int

    def __post_init__(self):
        if self.depth.shape != self.mask.shape or self.color.shape[:2] != self.depth.shape:
            raise ValueError(
                f"frame {self.index}: depth {self.depth.shape}, mask {self.mask.shape}, "
                f"color {self.color.shape} disagree"
            )


@dataclass
class Trial:
    frames: list
    intrinsics: CameraIntrinsics
    trial_id: str = "trial"

    def __len__(self):
        return len(self.frames)


@dataclass
class InstanceMap:
    instances: dict = field(default_factory=dict)  # id -> world PointCloud
    observation_counts: dict = field(default_factory=dict)  # id -> R_i

    @property
    def ids(self):
        return sorted(self.instances)


@dataclass
class ObservationSample:
    cloud: PointCloud  # zero-centered, preprocessed, float32
    label: int
    frame_index: int
    centroid: np.ndarray  # world frame


def frame_observations(frame, intr, min_points=1):
    """Yield (instance id, camera-frame cloud) for each mask id in ascending order."""
    ids = np.unique(frame.mask)
    for inst in ids[ids != 0]:
        cloud = back_project_mask(frame.depth, frame.mask == inst, frame.color, intr)
        if len(cloud) < min_points:
            continue
        yield int(inst), cloud


def build_instance_map(trial, cfg=PreprocessConfig()):
    """Fuse every mask observation into per-instance world clouds.

    Observations are appended per instance and each fused cloud is voxel
    downsampled once at the end.
    """
    if len(trial) == 0:
        raise NoValidObservationsError("trial has no frames")
    parts, counts = {}, {}
    for frame in trial.frames:
        for inst, cloud in frame_observations(frame, trial.intrinsics, cfg.min_points):
            parts.setdefault(inst, []).append(transform_cloud(cloud, frame.pose).points)
            counts[inst] = counts.get(inst, 0) + 1
    imap = InstanceMap()
    for inst in sorted(parts):
        fused = PointCloud(np.concatenate(parts[inst]), WORLD)
        imap.instances[inst] = voxel_downsample(fused, cfg.voxel_resolution)
        imap.observation_counts[inst] = counts[inst]
    return imap


def generate_dataset(trial, cfg=PreprocessConfig()):
    """One zero-centered, preprocessed sample per surviving (frame, mask id) pair."""
    samples = []
    for frame in trial.frames:
        for inst, cloud in frame_observations(frame, trial.intrinsics, cfg.min_points):
            prepared, centroid_cam = prepare_observation(cloud, cfg)
            samples.append(
                ObservationSample(
                    cloud=prepared,
                    label=inst,
                    frame_index=frame.index,
                    centroid=frame.pose.apply(centroid_cam[None])[0],
                )
            )
    if not samples:
        raise NoValidObservationsError("no valid observations")
    return samples


def label_counts(samples):
    out = {}
    for s in samples:
        out[s.label] = out.get(s.label, 0) + 1
    return dict(sorted(out.items()))
