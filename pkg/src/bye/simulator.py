"""Synthetic long-term dynamic scenes rendered by analytic ray casting.

Objects are spheres, boxes and z-axis cylinders resting on the z = 0 plane
(the plane itself is not rendered).  Each object is posed by a position and
a yaw.  Rendering casts one ray per pixel with camera-frame direction
((u - cx) / fx, (v - cy) / fy, 1), so the hit parameter is the z-depth.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from bye.geometry import CameraIntrinsics, Pose
from bye.mapping import ObservationFrame, Trial
from bye.semantic import SemanticFeatureSet

PRIMITIVES = ("sphere", "box", "cylinder")


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneObject:
    instance_id: int
    category: int
    primitive: str
    size: tuple  # sphere (r,), box (hx, hy, hz), cylinder (r, half_height)
    base_color: tuple
    texture_seed: int
    position: tuple
    yaw: float = 0.0

    def pose(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, np.asarray(self.position, dtype=np.float64))

    @property
    def footprint_radius(self):
        if self.primitive == "box":
            return float(np.hypot(self.size[0], self.size[1]))
        return float(self.size[0])

    @property
    def half_height(self):
        return float({"sphere": self.size[0], "box": self.size[-1], "cylinder": self.size[-1]}[self.primitive])


@dataclass
class SceneSpec:
    objects: list
    bounds: tuple = (-1.5, 1.5, -1.5, 1.5)  # xmin, xmax, ymin, ymax
    seed: int = 0

    def ids(self):
        return [o.instance_id for o in self.objects]

    def by_id(self, inst):
        for o in self.objects:
            if o.instance_id == inst:
                return o
        raise KeyError(inst)

    def categories(self):
        return {o.instance_id: o.category for o in self.objects}

    def to_dict(self):
        return {
            "format_version": 1,
            "seed": self.seed,
            "bounds": list(self.bounds),
            "objects": [
                {**asdict(o), "size": list(o.size), "base_color": list(o.base_color), "position": list(o.position)}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d):
        objs = [
            SceneObject(
                instance_id=int(o["instance_id"]),
                category=int(o["category"]),
                primitive=o["primitive"],
                size=tuple(o["size"]),
                base_color=tuple(o["base_color"]),
                texture_seed=int(o["texture_seed"]),
                position=tuple(o["position"]),
                yaw=float(o["yaw"]),
            )
            for o in d["objects"]
        ]
        return cls(objs, tuple(d["bounds"]), int(d["seed"]))


@dataclass(frozen=True)
class TrajectorySpec:
    radius: float = 3.2
    camera_height: float = 1.6
    height_wobble: float = 0.3
    look_at: tuple = (0.0, 0.0, 0.2)
    frames: int = 60
    width: int = 160
    height: int = 120
    fx: float = 130.0
    fy: float = 130.0
    depth_noise: float = 0.0  # std of additive depth noise in meters; 0 keeps depths exact
    noise_seed: int = 0

    def __post_init__(self):
        if not self.radius > 0 or self.frames < 1:
            raise ValueError("radius must be positive and frames >= 1")

    def intrinsics(self):
        return CameraIntrinsics(self.fx, self.fy, (self.width - 1) / 2.0, (self.height - 1) / 2.0, self.width, self.height)


@dataclass(frozen=True)
class RelocationSpec:
    fraction: float = 0.5
    max_translation: float = 1.0
    yaw_range_deg: float = 180.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.fraction <= 1:
            raise ValueError("fraction must lie in [0, 1]")


# scene generation


def _sample_category(rng):
    prim = PRIMITIVES[int(rng.integers(3))]
    if prim == "sphere":
        size = (float(rng.uniform(0.12, 0.25)),)
    elif prim == "box":
        size = tuple(float(v) for v in rng.uniform(0.08, 0.25, 3))
    else:
        size = (float(rng.uniform(0.08, 0.2)), float(rng.uniform(0.1, 0.3)))
    color = tuple(float(v) for v in rng.uniform(0.15, 0.9, 3))
    return prim, size, color


def _overlaps(obj, others, margin):
    for o in others:
        d = np.hypot(obj.position[0] - o.position[0], obj.position[1] - o.position[1])
        if d < obj.footprint_radius + o.footprint_radius + margin:
            return True
    return False


def _inside(obj, bounds):
    r = obj.footprint_radius
    x, y = obj.position[:2]
    return bounds[0] + r <= x <= bounds[1] - r and bounds[2] + r <= y <= bounds[3] - r


def generate_scene(n_objects=15, n_duplicates=3, seed=0, bounds=(-1.5, 1.5, -1.5, 1.5), margin=0.05, max_tries=2000):
    """Random non-overlapping scene; ``n_duplicates`` objects share one category.

    Duplicates share primitive, base color and category; their sizes are
    scaled by a factor in [0.9, 1.1] and their texture seeds differ.
    """
    if n_duplicates > n_objects:
        raise ValueError("n_duplicates cannot exceed n_objects")
    rng = np.random.default_rng([seed, 11])
    n_dup = n_duplicates if n_duplicates >= 2 else 0
    n_categories = n_objects - max(n_dup - 1, 0)
    cats = [_sample_category(rng) for _ in range(n_categories)]
    plan = []
    if n_dup:
        plan += [0] * n_dup
        plan += list(range(1, n_categories))
    else:
        plan = list(range(n_categories))
    objects = []
    for i, cat in enumerate(plan):
        prim, size, color = cats[cat]
        scale = float(rng.uniform(0.9, 1.1)) if (n_dup and cat == 0) else 1.0
        size = tuple(s * scale for s in size)
        tex = int(rng.integers(2**31 - 1))
        for _ in range(max_tries):
            yaw = float(rng.uniform(-np.pi, np.pi))
            obj = SceneObject(i + 1, cat, prim, size, color, tex, (0.0, 0.0, 0.0), yaw)
            x = float(rng.uniform(bounds[0], bounds[1]))
            y = float(rng.uniform(bounds[2], bounds[3]))
            obj.position = (x, y, obj.half_height)
            if _inside(obj, bounds) and not _overlaps(obj, objects, margin):
                objects.append(obj)
                break
        else:
            raise PlacementError(f"could not place object {i + 1} after {max_tries} tries; enlarge the workspace")
    return SceneSpec(objects, tuple(bounds), seed)


def relocate(scene, spec=RelocationSpec(), margin=0.05, max_tries=2000):
    """Move a fraction of the objects and reassign fresh shuffled ids to all.

    Returns (new scene, ground truth {new id: reference id}).
    """
    rng = np.random.default_rng([spec.seed, 23])
    objs = [replace(o) for o in scene.objects]
    n_move = int(round(spec.fraction * len(objs)))
    movers = rng.choice(len(objs), size=n_move, replace=False) if n_move else []
    for k in movers:
        obj = objs[k]
        others = [o for j, o in enumerate(objs) if j != k]
        x0, y0, z0 = obj.position
        for _ in range(max_tries):
            r = spec.max_translation * np.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * np.pi)
            yaw = obj.yaw + np.deg2rad(rng.uniform(-spec.yaw_range_deg, spec.yaw_range_deg))
            cand = replace(
                obj,
                position=(float(x0 + r * np.cos(phi)), float(y0 + r * np.sin(phi)), z0),
                yaw=float((yaw + np.pi) % (2 * np.pi) - np.pi),
            )
            if _inside(cand, scene.bounds) and not _overlaps(cand, others, margin):
                objs[k] = cand
                break
        else:
            raise PlacementError(f"could not relocate object {obj.instance_id}")
    perm = rng.permutation(len(objs)) + 1
    gt = {}
    for o, new_id in zip(objs, perm):
        gt[int(new_id)] = o.instance_id
        o.instance_id = int(new_id)
    objs.sort(key=lambda o: o.instance_id)
    return SceneSpec(objs, scene.bounds, scene.seed), dict(sorted(gt.items()))


# ray casting


def _intersect(obj, origin, dirs):
    """Nearest positive hit parameter per ray (inf when missed) in world units of ``dirs``."""
    pose = obj.pose()
    rt = pose.rotation.T
    o = rt @ (origin - pose.translation)
    d = dirs @ rt.T
    inf = np.full(d.shape[0], np.inf)
    if obj.primitive == "sphere":
        r = obj.size[0]
        a = (d * d).sum(1)
        b = 2 * (d @ o)
        c = o @ o - r * r
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0))
        t0 = (-b - sq) / (2 * a)
        return np.where(ok & (t0 > 0), t0, inf)
    if obj.primitive == "box":
        h = np.asarray(obj.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmin <= tmax) & (tmin > 0)
        return np.where(ok, tmin, inf)
    r, hh = obj.size
    best = inf.copy()
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (d[:, 0] * o[0] + d[:, 1] * o[1])
    c = o[0] ** 2 + o[1] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - np.sqrt(np.where(ok, disc, 0))) / (2 * a)
    z = o[2] + t0 * d[:, 2]
    side = ok & (t0 > 0) & (np.abs(z) <= hh)
    best = np.where(side, t0, best)
    for zc in (-hh, hh):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - o[2]) / d[:, 2]
        x = o[0] + tc * d[:, 0]
        y = o[1] + tc * d[:, 1]
        cap = (tc > 0) & (x * x + y * y <= r * r)
        best = np.where(cap & (tc < best), tc, best)
    return best


def _hash01(ix, iy, iz, seed):
    """Deterministic lattice hash to [0, 1)."""
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)) ^ (iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F))
    h ^= iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
    h ^= np.uint64(seed & 0xFFFFFFFF) * np.uint64(0xD6E8FEB86659FD93)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(2**53)


def value_noise(p, seed):
    """Smooth trilinear value noise in [0, 1) at local points ``p`` (N x 3)."""
    base = np.floor(p)
    f = p - base
    f = f * f * (3 - 2 * f)
    base = base.astype(np.int64)
    out = np.zeros(p.shape[0])
    with np.errstate(over="ignore"):
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (f[:, 0] if dx else 1 - f[:, 0]) * (f[:, 1] if dy else 1 - f[:, 1]) * (f[:, 2] if dz else 1 - f[:, 2])
                    out += w * _hash01(base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz, seed)
    return out


def texture_params(obj):
    rng = np.random.default_rng([obj.texture_seed, 5])
    freq = float(rng.uniform(6.0, 14.0))
    tint = rng.uniform(0.0, 1.0, 3)
    return freq, tint


def surface_color(obj, world_points, blend=0.3):
    """Base color modulated by value noise in the object frame, blended with a per-instance tint."""
    local = obj.pose().inverse().apply(world_points)
    freq, tint = texture_params(obj)
    n = value_noise(local * freq, obj.texture_seed)[:, None]
    base = np.asarray(obj.base_color)
    col = (1 - blend) * base * (0.55 + 0.45 * n) + blend * tint * (0.5 + 0.5 * n)
    return np.clip(col, 0.0, 1.0)


def surface_distance(obj, world_points):
    """Unsigned distance from points to the object's surface."""
    p = obj.pose().inverse().apply(world_points)
    if obj.primitive == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - obj.size[0])
    if obj.primitive == "box":
        q = np.abs(p) - np.asarray(obj.size)
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        return np.abs(outside + inside)
    r, hh = obj.size
    q = np.stack([np.hypot(p[:, 0], p[:, 1]) - r, np.abs(p[:, 2]) - hh], axis=1)
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    return np.abs(outside + inside)


def camera_pose(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose looking from ``eye`` at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def trajectory_poses(traj):
    poses = []
    for t in range(traj.frames):
        phi = 2 * np.pi * t / traj.frames
        h = traj.camera_height + traj.height_wobble * np.sin(2 * phi)
        eye = (traj.radius * np.cos(phi), traj.radius * np.sin(phi), h)
        poses.append(camera_pose(eye, traj.look_at))
    return poses


def render_frame(scene, pose, intr, index=0, noise_rng=None, depth_noise=0.0):
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    dirs_cam = np.stack([(u.ravel() - intr.cx) / intr.fx, (v.ravel() - intr.cy) / intr.fy, np.ones(u.size)], axis=1)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation
    depth = np.full(u.size, np.inf)
    ids = np.zeros(u.size, dtype=np.uint16)
    for obj in scene.objects:
        t = _intersect(obj, origin, dirs)
        closer = t < depth
        depth[closer] = t[closer]
        ids[closer] = obj.instance_id
    hit = np.isfinite(depth)
    color = np.zeros((u.size, 3))
    for obj in scene.objects:
        sel = ids == obj.instance_id
        if np.any(sel):
            pts = origin + dirs[sel] * depth[sel, None]
            color[sel] = surface_color(obj, pts)
    depth = np.where(hit, depth, 0.0)
    if depth_noise > 0 and noise_rng is not None:
        depth = np.where(hit, depth + noise_rng.normal(0, depth_noise, depth.shape), 0.0)
    shape = (intr.height, intr.width)
    return ObservationFrame(
        depth=depth.reshape(shape).astype(np.float32),
        mask=ids.reshape(shape),
        color=np.round(color * 255).astype(np.uint8).reshape(shape + (3,)),
        pose=pose,
        index=index,
    )


def render_trial(scene, traj=TrajectorySpec(), trial_id="trial"):
    intr = traj.intrinsics()
    rng = np.random.default_rng([traj.noise_seed, 3]) if traj.depth_noise > 0 else None
    frames = [
        render_frame(scene, pose, intr, t, rng, traj.depth_noise) for t, pose in enumerate(trajectory_poses(traj))
    ]
    return Trial(frames, intr, trial_id)


def visible_frame_counts(trial, min_pixels=1):
    """Per instance id, the number of frames where it covers at least ``min_pixels`` pixels."""
    out = {}
    for f in trial.frames:
        ids, counts = np.unique(f.mask[f.mask != 0], return_counts=True)
        for i, c in zip(ids, counts):
            if c >= min_pixels:
                out[int(i)] = out.get(int(i), 0) + 1
    return dict(sorted(out.items()))


# semantic stand-in features


def category_prototypes(categories, dim, seed):
    out = {}
    for c in sorted(set(categories)):
        v = np.random.default_rng([seed, 101, int(c)]).standard_normal(dim)
        out[int(c)] = v / np.linalg.norm(v)
    return out


def emit_semantic_features(scene, trial, dim=32, sigma=0.05, seed=0):
    """One noisy category-prototype feature per visible (frame, mask id)."""
    cats = scene.categories()
    protos = category_prototypes(cats.values(), dim, seed)
    rng = np.random.default_rng([seed, 202, zlib.crc32(trial.trial_id.encode())])
    records = {}
    for f in trial.frames:
        ids = np.unique(f.mask)
        for inst in ids[ids != 0]:
            v = protos[cats[int(inst)]] + sigma * rng.standard_normal(dim)
            records[(f.index, int(inst))] = v / np.linalg.norm(v)
    return SemanticFeatureSet(dim, records)


@dataclass
class SimulatedPair:
    ref_scene: SceneSpec
    ref_trial: Trial
    new_scene: SceneSpec
    new_trial: Trial
    ground_truth: dict  # new id -> ref id
    ref_features: SemanticFeatureSet = None
    new_features: SemanticFeatureSet = None
    categories: dict = field(default_factory=dict)  # ref id -> category


def simulate_pair(n_objects=15, n_duplicates=3, frames=60, seed=0, traj=None, relocation=None, feature_dim=32, sigma=0.05):
    """Reference trial, relocated new trial, ground truth and semantic features for one seed."""
    traj = traj or TrajectorySpec(frames=frames)
    relocation = relocation or RelocationSpec(seed=seed)
    ref = generate_scene(n_objects, n_duplicates, seed)
    new, gt = relocate(ref, relocation)
    ref_trial = render_trial(ref, traj, f"ref-{seed}")
    new_trial = render_trial(new, traj, f"new-{seed}")
    return SimulatedPair(
        ref,
        ref_trial,
        new,
        new_trial,
        gt,
        emit_semantic_features(ref, ref_trial, feature_dim, sigma, seed),
        emit_semantic_features(new, new_trial, feature_dim, sigma, seed),
        ref.categories(),
    )
