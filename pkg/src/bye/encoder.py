"""PointNet- and DGCNN-style point-cloud encoders with a projection head.

Clouds of different sizes are stacked along rows; per-point layers run on
the stacked matrix and global pooling is a per-cloud segment max, so no
padding is needed.  Batch-norm statistics in training mode are taken over
all stacked points.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from bye import tensor as T
from bye.tensor import Tensor

MAGIC = b"BYE1"
FORMAT_VERSION = 1
ARCHS = ("pointnet", "dgcnn")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "pointnet"
    input_dim: int = 6
    embed_dim: int = 256
    proj_dim: int = 64
    knn_k: int = 10
    pointnet_widths: tuple = (64, 64, 128, 256)
    dgcnn_widths: tuple = (64, 64, 128)
    dgcnn_global: int = 256
    proj_layers: int = 1  # 2 gives the SimCLR linear-relu-linear head

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        if not self.embed_dim >= self.proj_dim >= 2:
            raise ValueError("need embed_dim >= proj_dim >= 2")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.proj_layers not in (1, 2):
            raise ValueError("proj_layers must be 1 or 2")
        object.__setattr__(self, "pointnet_widths", tuple(int(w) for w in self.pointnet_widths))
        object.__setattr__(self, "dgcnn_widths", tuple(int(w) for w in self.dgcnn_widths))

    def to_json(self):
        d = asdict(self)
        d["pointnet_widths"] = list(self.pointnet_widths)
        d["dgcnn_widths"] = list(self.dgcnn_widths)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class EncoderModel:
    def __init__(self, cfg=EncoderConfig(), seed=0):
        self.cfg = cfg
        self.params = {}
        self.buffers = {}
        rng = np.random.default_rng(seed)
        if cfg.arch == "pointnet":
            c_in = cfg.input_dim
            for i, w in enumerate(cfg.pointnet_widths):
                self._add_linear(f"mlp{i}", c_in, w, rng, bias=False)
                self._add_bn(f"mlp{i}.bn", w)
                c_in = w
            self._add_linear("embed", c_in, cfg.embed_dim, rng)
        else:
            c_in = cfg.input_dim
            for i, w in enumerate(cfg.dgcnn_widths):
                self._add_linear(f"edge{i}", 2 * c_in, w, rng, bias=False)
                self._add_bn(f"edge{i}.bn", w)
                c_in = w
            self._add_linear("fuse", sum(cfg.dgcnn_widths), cfg.dgcnn_global, rng, bias=False)
            self._add_bn("fuse.bn", cfg.dgcnn_global)
            self._add_linear("embed", cfg.dgcnn_global, cfg.embed_dim, rng)
        if cfg.proj_layers == 2:
            self._add_linear("proj_hidden", cfg.embed_dim, cfg.embed_dim, rng)
        self._add_linear("proj", cfg.embed_dim, cfg.proj_dim, rng)

    def _add_linear(self, name, c_in, c_out, rng, bias=True):
        bound = np.sqrt(6.0 / c_in)  # He-uniform
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (c_in, c_out)), requires_grad=True)
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _add_bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        """All named arrays (parameters then buffers) in a stable order."""
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self):
        other = EncoderModel.__new__(EncoderModel)
        other.cfg = self.cfg
        other.params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def load_state(self, state):
        for k, p in self.params.items():
            p.data[...] = state[k]
        for k, b in self.buffers.items():
            b[...] = state[k]

    # layers

    def _linear(self, name, x):
        return T.linear(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"))

    def _bn_relu(self, name, x, training):
        bn = f"{name}.bn"
        y = T.batch_norm(
            x,
            self.params[f"{bn}.gamma"],
            self.params[f"{bn}.beta"],
            self.buffers[f"{bn}.running_mean"],
            self.buffers[f"{bn}.running_var"],
            training,
        )
        return T.relu(y)


def _stack(clouds, dtype):
    arrays = [np.asarray(c.points if hasattr(c, "points") else c) for c in clouds]
    if not arrays:
        raise ValueError("empty batch")
    for a in arrays:
        if a.ndim != 2 or a.shape[1] != 6 or a.shape[0] == 0:
            raise ValueError(f"each cloud must be a non-empty N x 6 array, got {a.shape}")
    sizes = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return np.concatenate(arrays).astype(dtype), offsets, sizes


def knn_indices(features, offsets, sizes, k):
    """k nearest neighbours (self excluded) within each cloud, as global row indices.

    Squared Euclidean distances; neighbours are sorted by (distance, index).
    """
    out = np.empty((features.shape[0], k), dtype=np.int64)
    f64 = features.astype(np.float64)
    for start, n in zip(offsets, sizes):
        if n < k + 1:
            raise ValueError(f"too few points for k-NN graph: {n} points, k={k}")
        f = f64[start : start + n]
        sq = (f * f).sum(axis=1)
        d = sq[:, None] + sq[None, :] - 2.0 * (f @ f.T)
        np.fill_diagonal(d, np.inf)
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
        pd = np.take_along_axis(d, part, axis=1)
        order = np.lexsort((part, pd), axis=1)
        out[start : start + n] = np.take_along_axis(part, order, axis=1) + start
    return out


def _edge_conv(model, name, feats, idx, training):
    n, k = idx.shape
    centre = T.gather_rows(feats, np.repeat(np.arange(n), k))
    nbr = T.gather_rows(feats, idx.reshape(-1))
    edge = T.concat([centre, nbr - centre], axis=1)
    y = model._bn_relu(name, model._linear(name, edge), training)
    return T.max_reduce(y.reshape(n, k, y.shape[1]), axis=1)


def _folded(model, name, eps=1e-5):
    # eval-mode batch norm folded into the preceding bias-free linear layer
    w = model.params[f"{name}.weight"].data
    bn = f"{name}.bn"
    scale = model.params[f"{bn}.gamma"].data / np.sqrt(model.buffers[f"{bn}.running_var"] + eps).astype(w.dtype)
    shift = model.params[f"{bn}.beta"].data - model.buffers[f"{bn}.running_mean"].astype(w.dtype) * scale
    return w * scale, shift


def _pointnet_inference(model, x, offsets):
    feats = x
    for i in range(len(model.cfg.pointnet_widths)):
        w, b = _folded(model, f"mlp{i}")
        feats = feats @ w
        feats += b
        np.maximum(feats, 0, out=feats)
    ends = np.append(offsets[1:], feats.shape[0])
    pooled = np.stack([feats[a:e].max(axis=0) for a, e in zip(offsets, ends)])
    out = pooled @ model.params["embed.weight"].data
    if "embed.bias" in model.params:
        out += model.params["embed.bias"].data
    return Tensor(out, dtype=x.dtype)


def forward_h(model, clouds, training=False, dtype=np.float32):
    """Embeddings h for a batch of clouds -> Tensor of shape (B, embed_dim)."""
    cfg = model.cfg
    x, offsets, sizes = _stack(clouds, dtype)
    if cfg.arch == "pointnet" and not training and not T.grad_enabled() and dtype == np.float32:
        return _pointnet_inference(model, x, offsets)
    if dtype != np.float32:
        model = _cast(model, dtype)
    feats = Tensor(x, dtype=dtype)
    if cfg.arch == "pointnet":
        for i in range(len(cfg.pointnet_widths)):
            feats = model._bn_relu(f"mlp{i}", model._linear(f"mlp{i}", feats), training)
        pooled = T.segment_max(feats, offsets)
    else:
        layer_outputs = []
        graph_src = x[:, :3]
        for i in range(len(cfg.dgcnn_widths)):
            idx = knn_indices(graph_src, offsets, sizes, cfg.knn_k)
            feats = _edge_conv(model, f"edge{i}", feats, idx, training)
            layer_outputs.append(feats)
            graph_src = feats.data
        fused = model._bn_relu("fuse", model._linear("fuse", T.concat(layer_outputs, axis=1)), training)
        pooled = T.segment_max(fused, offsets)
    return model._linear("embed", pooled)


def project(model, h):
    if model.cfg.proj_layers == 2:
        h = T.relu(model._linear("proj_hidden", h))
    return model._linear("proj", h)


def forward_g(model, clouds, training=False, dtype=np.float32):
    """Projections g used by the contrastive loss -> Tensor (B, proj_dim)."""
    if dtype != np.float32:
        model = _cast(model, dtype)
    return project(model, forward_h(model, clouds, training, dtype))


def _cast(model, dtype):
    # Shares nothing with the original: used by finite-difference oracles only.
    if next(iter(model.params.values())).data.dtype == dtype:
        return model
    other = EncoderModel.__new__(EncoderModel)
    other.cfg = model.cfg
    other.params = {k: Tensor(v.data, dtype=dtype) for k, v in model.params.items()}
    other.buffers = {k: v.astype(dtype) for k, v in model.buffers.items()}
    return other


def embed(model, clouds, batch_size=64):
    """Eval-mode embeddings as a float32 numpy array."""
    out = []
    with T.no_grad():
        for i in range(0, len(clouds), batch_size):
            out.append(forward_h(model, clouds[i : i + batch_size], training=False).data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.embed_dim), dtype=np.float32)


# checkpoint I/O


def checkpoint_bytes(model):
    arch = model.cfg.arch.encode()
    cfg = model.cfg.to_json().encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(struct.pack("<I", len(arch)) + arch)
    parts.append(struct.pack("<I", len(cfg)) + cfg)
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_arch=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data, expected_arch)


def checkpoint_from_bytes(data, expected_arch=None):
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a BYE1 checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = r.take(r.u32()).decode()
    cfg = EncoderConfig.from_json(r.take(r.u32()).decode())
    if cfg.arch != arch:
        raise CheckpointError(f"architecture tag {arch!r} disagrees with config {cfg.arch!r}")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"config mismatch: checkpoint is {arch!r}, requested {expected_arch!r}")
    model = EncoderModel(cfg)
    expected = model.state()
    count = r.u32()
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} records, model expects {len(expected)}")
    state = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        if name not in expected:
            raise CheckpointError(f"unexpected record {name!r}")
        if tuple(shape) != expected[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {shape} vs {expected[name].shape}")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last record")
    model.load_state(state)
    return model
