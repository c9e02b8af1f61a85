import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bye.encoder import EncoderConfig, checkpoint_bytes
from bye.tensor import Tensor
from bye.training import (
    NoPositivePairsError,
    TrainConfig,
    nt_xent_loss,
    pair_positions,
    sample_batch,
    stratified_split,
    train,
    validation_batches,
)

from conftest import gradcheck, random_samples

SMALL_ENC = EncoderConfig(embed_dim=16, proj_dim=8, pointnet_widths=(8, 8, 16, 16))


def ntxent_loop(z, pair, tau, labels=None, mask=False):
    # direct per-sample transcription of the contrastive objective
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    n = len(z)
    total = 0.0
    for i in range(n):
        den = 0.0
        for k in range(n):
            if k == i:
                continue
            if mask and k != pair[i] and labels[k] == labels[i]:
                continue
            den += np.exp(z[i] @ z[k] / tau)
        total += -np.log(np.exp(z[i] @ z[pair[i]] / tau) / den)
    return total / n


def test_hand_computed_four_sample_case():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss = nt_xent_loss(Tensor(z, dtype=np.float64), pair_positions(2), 1.0)
    assert abs(float(loss.data) - (-np.log(np.e / (np.e + 2)))) < 1e-6


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mask", [False, True])
def test_loss_matches_per_sample_loop(seed, mask):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(8, 5))
    labels = np.array([0, 0, 1, 1, 0, 0, 2, 2])
    got = nt_xent_loss(Tensor(z, dtype=np.float64), pair_positions(4), 0.07, labels, mask)
    assert np.isclose(float(got.data), ntxent_loop(z, pair_positions(4), 0.07, labels, mask), rtol=1e-10)


def test_label_mask_drops_same_label_negatives():
    z = np.array([[1.0, 0], [1.0, 0], [1.0, 0], [1.0, 0]])
    labels = np.array([3, 3, 3, 3])
    plain = float(nt_xent_loss(Tensor(z), pair_positions(2), 1.0, labels, False).data)
    masked = float(nt_xent_loss(Tensor(z), pair_positions(2), 1.0, labels, True).data)
    assert np.isclose(plain, np.log(3)) and np.isclose(masked, 0.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4))
    assert gradcheck(lambda t: nt_xent_loss(t, pair_positions(3), 0.5), [z]) < 1e-3


def test_pair_positions():
    np.testing.assert_array_equal(pair_positions(3), [1, 0, 3, 2, 5, 4])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.integers(0, 1000))
def test_stratified_split_rules(labels, seed):
    labels = np.array(labels)
    tr, va = stratified_split(labels, 0.1, np.random.default_rng(seed))
    assert not set(tr) & set(va)
    assert sorted(set(tr) | set(va)) == list(range(len(labels)))
    for lab in np.unique(labels):
        n = int((labels == lab).sum())
        n_tr = int((labels[tr] == lab).sum())
        n_va = int((labels[va] == lab).sum())
        if n == 1:
            assert (n_tr, n_va) == (1, 0)
        else:
            assert n_va >= 1 and n_tr >= 1
            if n >= 3:
                assert n_tr >= 2


def test_validation_pairs_share_labels():
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 2, 2])
    tr, va = stratified_split(labels, 0.5, np.random.default_rng(0))
    chunks = validation_batches(labels, tr, va, batch_anchors=2)
    pairs = [p for c in chunks for p in c]
    assert [a for a, _ in pairs] == list(va)
    for a, b in pairs:
        assert labels[a] == labels[b] and a != b
    assert all(len(c) >= 2 for c in chunks)


def test_sample_batch_pairs(samples):
    b = sample_batch(samples, np.random.default_rng(0), batch_anchors=5)
    assert len(b.clouds) == 10
    for i in range(0, 10, 2):
        assert b.labels[i] == b.labels[i + 1] and b.sources[i] != b.sources[i + 1]
    again = sample_batch(samples, np.random.default_rng(0), batch_anchors=5)
    for x, y in zip(b.clouds, again.clouds):
        np.testing.assert_array_equal(x, y)


def test_sample_batch_needs_positives(samples):
    singles = [samples[0], samples[6], samples[12]]
    with pytest.raises(NoPositivePairsError):
        sample_batch(singles, np.random.default_rng(0))
    with pytest.raises(NoPositivePairsError):
        train(singles, SMALL_ENC, TrainConfig(epochs=1))


def test_training_reduces_validation_loss(samples):
    res = train(samples, SMALL_ENC, TrainConfig(epochs=40, batch_anchors=8, val_every=10, temperature=0.2))
    val = [r["loss"] for r in res.log if r["split"] == "val"]
    assert [r["iteration"] for r in res.log if r["split"] == "val"][:2] == [0, 10]
    assert res.best_val_loss == min(val) < val[0]
    assert sum(r["split"] == "train" for r in res.log) == res.log[-1]["iteration"]


def test_training_is_deterministic(samples):
    cfg = TrainConfig(epochs=3, batch_anchors=8, val_every=4, seed=3)
    a, b = train(samples, SMALL_ENC, cfg), train(samples, SMALL_ENC, cfg)
    assert checkpoint_bytes(a.model) == checkpoint_bytes(b.model)
    assert a.log == b.log


def test_zero_learning_rate_leaves_parameters(samples):
    res = train(samples, SMALL_ENC, TrainConfig(epochs=2, batch_anchors=8, lr=0.0, val_every=1))
    init = train(samples, SMALL_ENC, TrainConfig(epochs=0, batch_anchors=8))
    for k, p in res.final_model.params.items():
        np.testing.assert_array_equal(p.data, init.final_model.params[k].data)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(temperature=0)
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
