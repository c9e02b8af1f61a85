import numpy as np
import pytest

from bye import encoder
from bye import tensor as T
from bye.encoder import (
    CheckpointError,
    EncoderConfig,
    EncoderModel,
    checkpoint_bytes,
    checkpoint_from_bytes,
    embed,
    forward_g,
    forward_h,
    knn_indices,
    load_checkpoint,
    save_checkpoint,
)
from bye.training import nt_xent_loss, pair_positions

from conftest import numeric_grad, rel_error

TINY = {
    "pointnet": EncoderConfig(embed_dim=16, proj_dim=8, pointnet_widths=(8, 8, 16, 16)),
    "dgcnn": EncoderConfig(arch="dgcnn", embed_dim=16, proj_dim=8, knn_k=4, dgcnn_widths=(8, 8, 8), dgcnn_global=16),
    "pointnet-mlp-head": EncoderConfig(embed_dim=16, proj_dim=8, pointnet_widths=(8, 8, 16, 16), proj_layers=2),
}


def clouds(rng, n, lo=12, hi=32):
    return [np.hstack([rng.normal(size=(m, 3)), rng.uniform(size=(m, 3))]) for m in rng.integers(lo, hi + 1, n)]


class FrozenGraphs:
    """Record the k-NN graphs of one forward pass and replay them afterwards.

    Neighbour selection is piecewise constant, so finite differences are
    only meaningful with the graph held fixed.
    """

    def __init__(self, monkeypatch):
        self.graphs, self.replay, self.mp = [], None, monkeypatch
        monkeypatch.setattr(encoder, "knn_indices", self)

    def __call__(self, features, offsets, sizes, k):
        if self.replay is None:
            self.graphs.append(knn_indices(features, offsets, sizes, k))
            return self.graphs[-1]
        return self.graphs[next(self.replay)]

    def start_replay(self):
        self.replay = iter(range(len(self.graphs)))


def composition_gradcheck(cfg, seed, coords_per_param=6, h=1e-6, graphs=None):
    """Encoder + projection + NT-Xent in training mode, checked on sampled parameter coordinates.

    The step is small (in float64) so that it rarely straddles a ReLU or max kink.
    """
    rng = np.random.default_rng(seed)
    model = EncoderModel(cfg, seed)
    batch = clouds(rng, 6)
    pairs = pair_positions(3)
    loss = nt_xent_loss(forward_g(model, batch, training=True), pairs, 0.5)
    loss.backward()
    names = list(model.params)
    picks = [rng.choice(model.params[k].data.size, min(coords_per_param, model.params[k].data.size), replace=False) for k in names]

    def f64(*arrays):
        m = model.copy()
        for k, a in zip(names, arrays):
            m.params[k] = T.Tensor(a, dtype=np.float64)
        m.buffers = {k: v.astype(np.float64) for k, v in m.buffers.items()}
        if graphs is not None:
            graphs.start_replay()
        with T.no_grad():
            return float(nt_xent_loss(forward_g(m, batch, training=True, dtype=np.float64), pairs, 0.5).data)

    num = numeric_grad(f64, [model.params[k].data for k in names], h, picks)
    ana = np.concatenate([model.params[k].grad.reshape(-1)[p] for k, p in zip(names, picks)])
    fd = np.concatenate([n.reshape(-1)[p] for n, p in zip(num, picks)])
    return rel_error(ana, fd)


@pytest.mark.parametrize("seed", range(20))
def test_pointnet_ntxent_composition_gradient(seed):
    assert composition_gradcheck(TINY["pointnet"], seed) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_dgcnn_composition_gradient(seed, monkeypatch):
    graphs = FrozenGraphs(monkeypatch)
    assert composition_gradcheck(TINY["dgcnn"], seed, coords_per_param=3, graphs=graphs) < 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_mlp_head_composition_gradient(seed):
    assert composition_gradcheck(TINY["pointnet-mlp-head"], seed) < 1e-3


def test_output_shapes():
    rng = np.random.default_rng(0)
    for cfg in TINY.values():
        m = EncoderModel(cfg)
        b = clouds(rng, 3)
        assert forward_h(m, b).shape == (3, 16)
        assert forward_g(m, b).shape == (3, 8)


def test_inference_path_matches_graph_path():
    rng = np.random.default_rng(1)
    m = EncoderModel(EncoderConfig(), 1)
    for k, b in m.buffers.items():  # non-trivial running statistics
        b[...] = rng.uniform(0.5, 1.5, b.shape) if k.endswith("var") else rng.normal(size=b.shape) * 0.1
    b = clouds(rng, 5, 50, 200)
    fast = embed(m, b)
    slow = forward_h(m, b, training=False).data  # grad enabled -> autodiff path
    np.testing.assert_allclose(fast, slow, rtol=1e-4, atol=1e-4)


def test_eval_embedding_does_not_depend_on_batch_composition():
    rng = np.random.default_rng(2)
    m = EncoderModel(EncoderConfig(), 2)
    b = clouds(rng, 8, 50, 100)
    together = embed(m, b, batch_size=8)
    alone = np.concatenate([embed(m, [c]) for c in b])
    np.testing.assert_allclose(together, alone, rtol=1e-5, atol=1e-6)


def test_knn_indices_match_sort_oracle():
    rng = np.random.default_rng(3)
    sizes = np.array([15, 20])
    offsets = np.array([0, 15])
    x = rng.normal(size=(35, 3))
    x[16] = x[17]  # exact tie inside the second cloud
    got = knn_indices(x, offsets, sizes, 5)
    for start, n in zip(offsets, sizes):
        f = x[start : start + n]
        for i in range(n):
            d = ((f - f[i]) ** 2).sum(1)
            order = sorted((d[j], j) for j in range(n) if j != i)
            # distances agree exactly; index order may only differ among equal distances
            np.testing.assert_allclose(d[got[start + i] - start], [o[0] for o in order[:5]], rtol=1e-9, atol=1e-12)
            assert start + i not in got[start + i]
    with pytest.raises(ValueError, match="too few points"):
        knn_indices(x[:4], np.array([0]), np.array([4]), 5)


def test_empty_or_malformed_batch():
    m = EncoderModel(TINY["pointnet"])
    with pytest.raises(ValueError, match="empty batch"):
        forward_h(m, [])
    with pytest.raises(ValueError, match="N x 6"):
        forward_h(m, [np.zeros((5, 3))])


def test_initialization_is_seeded():
    a, b, c = EncoderModel(EncoderConfig(), 0), EncoderModel(EncoderConfig(), 0), EncoderModel(EncoderConfig(), 1)
    assert checkpoint_bytes(a) == checkpoint_bytes(b) != checkpoint_bytes(c)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    for cfg in TINY.values():
        m = EncoderModel(cfg, 5)
        path = tmp_path / f"{cfg.arch}.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.cfg == cfg
        assert checkpoint_bytes(back) == path.read_bytes()
        b = clouds(rng, 2)
        np.testing.assert_array_equal(embed(m, b), embed(back, b))


def test_checkpoint_errors():
    data = checkpoint_bytes(EncoderModel(TINY["pointnet"]))
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_from_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="config mismatch"):
        checkpoint_from_bytes(data, expected_arch="dgcnn")
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint_from_bytes(data + b"\0")


def test_config_validation_and_json():
    cfg = EncoderConfig(arch="dgcnn", knn_k=7)
    assert EncoderConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError, match="unknown arch"):
        EncoderConfig(arch="transformer")
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=8, proj_dim=16)
