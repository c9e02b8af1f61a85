"""On-disk formats.

JSON for metadata, raw little-endian binaries for bulk arrays:

* trial directory: ``manifest.json`` plus ``frames/NNNNNN.{depth.f32,mask.u16,rgb.u8,pose.txt}``
* dataset store: ``index.json`` plus ``points.f32`` (all sample clouds, N x 6 rows)
* instance map ``BYEM``, memory bank ``BYEB``, semantic features ``BYEF``
* ``scene.json``, ``mapping.json``, ``assoc.json``, ``report.json``

Every binary header starts with a 4-byte magic and a u32 format version.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from bye.geometry import WORLD, CameraIntrinsics, PointCloud, Pose
from bye.mapping import InstanceMap, ObservationFrame, ObservationSample, Trial
from bye.membank import MemoryBank
from bye.semantic import SemanticFeatureSet

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _check_version(found, what):
    if found != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported format version {found}")


class _Reader:
    def __init__(self, data, what):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, n=None):
        if n is None:
            return struct.unpack("<I", self.take(4))[0]
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)

    def f32(self, n):
        return np.frombuffer(self.take(4 * n), dtype="<f4")

    def magic(self, expected):
        if self.take(4) != expected:
            raise FormatError(f"{self.what}: bad magic, expected {expected.decode()}")
        _check_version(self.u32(), self.what)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: trailing bytes")


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


# trial directory


def _pose_text(pose):
    return " ".join(f"{v:.17g}" for v in pose.matrix().ravel()) + "\n"


def write_trial(trial, path):
    frames_dir = os.path.join(path, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    intr = trial.intrinsics
    write_json(
        os.path.join(path, "manifest.json"),
        {
            "format_version": FORMAT_VERSION,
            "trial_id": trial.trial_id,
            "frame_count": len(trial.frames),
            "width": intr.width,
            "height": intr.height,
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "depth_scale": intr.depth_scale,
            "frame_indices": [f.index for f in trial.frames],
        },
    )
    for f in trial.frames:
        stem = os.path.join(frames_dir, f"{f.index:06d}")
        with open(stem + ".depth.f32", "wb") as fh:
            fh.write(np.ascontiguousarray(f.depth, dtype="<f4").tobytes())
        with open(stem + ".mask.u16", "wb") as fh:
            fh.write(np.ascontiguousarray(f.mask, dtype="<u2").tobytes())
        with open(stem + ".rgb.u8", "wb") as fh:
            fh.write(np.ascontiguousarray(f.color, dtype=np.uint8).tobytes())
        with open(stem + ".pose.txt", "w") as fh:
            fh.write(_pose_text(f.pose))


def read_trial(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError(f"{path}: not a trial directory (manifest.json missing)")
    m = read_json(mpath)
    _check_version(m.get("format_version"), mpath)
    intr = CameraIntrinsics(m["fx"], m["fy"], m["cx"], m["cy"], int(m["width"]), int(m["height"]), m["depth_scale"])
    h, w = intr.height, intr.width
    indices = m.get("frame_indices", list(range(m["frame_count"])))
    if len(indices) != m["frame_count"]:
        raise FormatError(f"{mpath}: frame_count disagrees with frame_indices")
    frames = []
    for idx in indices:
        stem = os.path.join(path, "frames", f"{idx:06d}")
        try:
            depth = np.frombuffer(_read_bytes(stem + ".depth.f32"), dtype="<f4")
            mask = np.frombuffer(_read_bytes(stem + ".mask.u16"), dtype="<u2")
            rgb = np.frombuffer(_read_bytes(stem + ".rgb.u8"), dtype=np.uint8)
            with open(stem + ".pose.txt") as fh:
                vals = [float(v) for v in fh.read().split()]
        except FileNotFoundError as e:
            raise FormatError(f"missing frame file: {e.filename}") from None
        if depth.size != h * w or mask.size != h * w or rgb.size != h * w * 3:
            raise FormatError(f"frame {idx}: file sizes do not match {w}x{h}")
        if len(vals) != 16:
            raise FormatError(f"frame {idx}: pose needs 16 values, got {len(vals)}")
        try:
            pose = Pose.from_matrix(np.array(vals).reshape(4, 4))
        except ValueError as e:
            raise FormatError(f"frame {idx}: invalid pose ({e})") from None
        frames.append(
            ObservationFrame(
                depth.reshape(h, w).astype(np.float32),
                mask.reshape(h, w).astype(np.uint16),
                rgb.reshape(h, w, 3).copy(),
                pose,
                int(idx),
            )
        )
    return Trial(frames, intr, m.get("trial_id", os.path.basename(os.path.normpath(path))))


# dataset store


def write_dataset(samples, path, trial_id=""):
    os.makedirs(path, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for s in samples:
        pts = np.ascontiguousarray(s.cloud.points, dtype="<f4")
        entries.append(
            {
                "label": int(s.label),
                "frame_index": int(s.frame_index),
                "offset": offset,
                "count": int(pts.shape[0]),
                "centroid": [float(v) for v in s.centroid],
            }
        )
        blobs.append(pts.tobytes())
        offset += pts.shape[0]
    with open(os.path.join(path, "points.f32"), "wb") as fh:
        fh.write(b"".join(blobs))
    write_json(
        os.path.join(path, "index.json"),
        {"format_version": FORMAT_VERSION, "trial_id": trial_id, "count": len(entries), "samples": entries},
    )


def read_dataset(path):
    ipath = os.path.join(path, "index.json")
    if not os.path.exists(ipath):
        raise FormatError(f"{path}: not a dataset directory (index.json missing)")
    idx = read_json(ipath)
    _check_version(idx.get("format_version"), ipath)
    pts = np.frombuffer(_read_bytes(os.path.join(path, "points.f32")), dtype="<f4")
    if pts.size % 6:
        raise FormatError("points.f32 size is not a multiple of 6 floats")
    pts = pts.reshape(-1, 6)
    out = []
    for e in idx["samples"]:
        a, n = e["offset"], e["count"]
        if a + n > pts.shape[0]:
            raise FormatError("index refers past the end of points.f32")
        out.append(ObservationSample(PointCloud(pts[a : a + n].copy()), int(e["label"]), int(e["frame_index"]), np.array(e["centroid"])))
    if len(out) != idx["count"]:
        raise FormatError("index count disagrees with sample list")
    return out


# instance map


def instance_map_bytes(imap):
    parts = [b"BYEM", struct.pack("<II", FORMAT_VERSION, len(imap.instances))]
    for i in imap.ids:
        pts = np.ascontiguousarray(imap.instances[i].points, dtype="<f4")
        parts.append(struct.pack("<III", i, imap.observation_counts.get(i, 0), pts.shape[0]))
        parts.append(pts.tobytes())
    return b"".join(parts)


def write_instance_map(imap, path):
    with open(path, "wb") as fh:
        fh.write(instance_map_bytes(imap))


def read_instance_map(path):
    r = _Reader(_read_bytes(path), path)
    r.magic(b"BYEM")
    imap = InstanceMap()
    for _ in range(r.u32()):
        inst, count, n = r.u32(), r.u32(), r.u32()
        imap.instances[inst] = PointCloud(r.f32(6 * n).reshape(n, 6).copy(), WORLD)
        imap.observation_counts[inst] = count
    r.done()
    return imap


# memory bank


def bank_bytes(bank):
    emb = np.ascontiguousarray(bank.embeddings, dtype="<f4")
    return b"".join(
        [
            b"BYEB",
            struct.pack("<III", FORMAT_VERSION, emb.shape[1], emb.shape[0]),
            emb.tobytes(),
            np.ascontiguousarray(bank.labels, dtype="<u4").tobytes(),
            struct.pack("<I", len(bank.ref_ids)),
            np.asarray(bank.ref_ids, dtype="<u4").tobytes(),
        ]
    )


def write_bank(bank, path):
    with open(path, "wb") as fh:
        fh.write(bank_bytes(bank))


def read_bank(path):
    r = _Reader(_read_bytes(path), path)
    r.magic(b"BYEB")
    dim, n = r.u32(), r.u32()
    emb = r.f32(dim * n).reshape(n, dim).copy()
    labels = r.u32(n)
    ref_ids = r.u32(r.u32()).tolist()
    r.done()
    return MemoryBank(emb, labels, ref_ids)


# semantic features


def features_bytes(features):
    keys = sorted(features.records)
    parts = [b"BYEF", struct.pack("<III", FORMAT_VERSION, features.dim, len(keys))]
    for k in keys:
        parts.append(struct.pack("<II", *k))
        parts.append(np.ascontiguousarray(features.records[k], dtype="<f4").tobytes())
    return b"".join(parts)


def write_features(features, path):
    with open(path, "wb") as fh:
        fh.write(features_bytes(features))


def read_features(path):
    r = _Reader(_read_bytes(path), path)
    r.magic(b"BYEF")
    dim, n = r.u32(), r.u32()
    records = {}
    for _ in range(n):
        frame, mask = r.u32(), r.u32()
        records[(frame, mask)] = r.f32(dim).astype(np.float64)
    r.done()
    return SemanticFeatureSet(dim, records)
