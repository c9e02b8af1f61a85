"""Contrastive training of the per-scene encoder."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from bye import tensor as T
from bye.encoder import EncoderConfig, EncoderModel, forward_g
from bye.geometry import PointCloud
from bye.pointcloud import AugmentConfig, augment

log = logging.getLogger(__name__)


class NoPositivePairsError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_anchors: int = 64
    epochs: int = 300
    lr: float = 0.003
    val_fraction: float = 0.1
    val_every: int = 300
    temperature: float = 0.07
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    mask_same_label_negatives: bool = False

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.batch_anchors < 2:
            raise ValueError("batch_anchors must be >= 2")


@dataclass
class ContrastiveBatch:
    clouds: list  # 2B arrays ordered anchor_1, positive_1, anchor_2, ...
    labels: np.ndarray
    pair_index: np.ndarray  # pair_index[i] = position of i's positive
    sources: np.ndarray  # dataset indices


@dataclass
class TrainResult:
    model: EncoderModel  # best-validation snapshot
    log: list  # dicts with iteration, split, loss
    best_iteration: int
    best_val_loss: float
    final_model: EncoderModel = None


def _points(sample):
    c = sample.cloud if hasattr(sample, "cloud") else sample
    return c.points if isinstance(c, PointCloud) else np.asarray(c)


def _labels(dataset):
    return np.array([s.label for s in dataset], dtype=np.int64)


def _by_label(labels, indices):
    groups = {}
    for i in indices:
        groups.setdefault(int(labels[i]), []).append(int(i))
    return groups


def pair_positions(n_pairs):
    idx = np.arange(2 * n_pairs)
    return idx ^ 1


def sample_batch(dataset, rng, batch_anchors=64, augment_cfg=AugmentConfig(), anchors=None, pool=None):
    """Draw anchors plus one same-label positive each, then augment every sample.

    ``pool`` restricts anchors and positives to a subset of dataset indices.
    Labels with a single sample in the pool never anchor.  When ``anchors``
    is None they are drawn uniformly without replacement; the count is capped
    at the number of eligible samples.
    """
    labels = _labels(dataset)
    pool = np.arange(len(dataset)) if pool is None else np.asarray(pool)
    groups = _by_label(labels, pool)
    eligible = np.array([i for i in pool if len(groups[int(labels[i])]) >= 2], dtype=np.int64)
    if eligible.size == 0:
        raise NoPositivePairsError("no positive pairs available")
    if anchors is None:
        n = min(batch_anchors, eligible.size)
        anchors = rng.choice(eligible, size=n, replace=False)
    sources = []
    for a in anchors:
        others = [j for j in groups[int(labels[a])] if j != a]
        sources.extend([int(a), others[int(rng.integers(len(others)))]])
    sources = np.array(sources, dtype=np.int64)
    clouds = []
    for s in sources:
        pc = PointCloud(_points(dataset[s]))
        clouds.append(augment(pc, augment_cfg, rng).points.astype(np.float32))
    return ContrastiveBatch(clouds, labels[sources], pair_positions(len(anchors)), sources)


def nt_xent_loss(projections, pair_index, temperature, labels=None, mask_same_label=False):
    """Mean NT-Xent over all 2B samples.

    Cosine similarities divided by the temperature; every other sample in
    the batch (positive included) enters the denominator.  With
    ``mask_same_label`` the same-label non-pair samples are dropped from it.
    """
    n = projections.shape[0]
    if n < 2:
        raise ValueError("nt_xent_loss needs at least one pair")
    pair_index = np.asarray(pair_index)
    z = T.l2_normalize(projections, axis=1)
    sim = T.matmul(z, T.transpose(z)) * (1.0 / temperature)
    keep = ~np.eye(n, dtype=bool)
    if mask_same_label and labels is not None:
        labels = np.asarray(labels)
        same = labels[:, None] == labels[None, :]
        same[np.arange(n), pair_index] = False
        keep &= ~same
    pos = T.pick(sim, np.arange(n), pair_index)
    return T.mean(T.logsumexp(sim, axis=1, mask=keep) - pos)


def stratified_split(labels, val_fraction, rng):
    """Split indices per label; labels with >= 2 samples land in both splits."""
    train, val = [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(idx.size)]
        n = idx.size
        if n == 1:
            n_val = 0
        elif n == 2:
            n_val = 1
        else:
            n_val = min(max(1, int(round(val_fraction * n))), n - 2)
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def validation_batches(labels, train_idx, val_idx, batch_anchors):
    """Fixed (anchor, positive) pairs for validation, chunked into batches.

    A val sample's positive is the next val sample of its label (cyclic);
    when it is alone in the split, the first train sample of its label.
    """
    val_groups = _by_label(labels, val_idx)
    train_groups = _by_label(labels, train_idx)
    pairs = []
    for i in val_idx:
        lab = int(labels[i])
        g = val_groups[lab]
        if len(g) > 1:
            pairs.append((int(i), g[(g.index(int(i)) + 1) % len(g)]))
        elif lab in train_groups:
            pairs.append((int(i), train_groups[lab][0]))
    chunks = [pairs[k : k + batch_anchors] for k in range(0, len(pairs), batch_anchors)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2].extend(chunks.pop())
    return chunks


def evaluate_loss(model, dataset, chunks, temperature, mask_same_label=False):
    labels = _labels(dataset)
    total, count = 0.0, 0
    with T.no_grad():
        for chunk in chunks:
            sources = [s for pair in chunk for s in pair]
            clouds = [_points(dataset[s]).astype(np.float32) for s in sources]
            g = forward_g(model, clouds, training=False)
            loss = nt_xent_loss(g, pair_positions(len(chunk)), temperature, labels[sources], mask_same_label)
            total += float(loss.data) * len(sources)
            count += len(sources)
    return total / count if count else float("nan")


def train(dataset, encoder_cfg=EncoderConfig(), train_cfg=TrainConfig(), progress=None):
    """Train an encoder; returns the lowest-validation-loss snapshot and the log.

    Validation runs before the first step, every ``val_every`` iterations and
    after the last one.  Per-iteration randomness comes from
    ``default_rng([seed, 1, iteration])`` so runs are reproducible.
    """
    labels = _labels(dataset)
    split_rng = np.random.default_rng([train_cfg.seed, 0])
    train_idx, val_idx = stratified_split(labels, train_cfg.val_fraction, split_rng)
    groups = _by_label(labels, train_idx)
    eligible = np.array([i for i in train_idx if len(groups[int(labels[i])]) >= 2], dtype=np.int64)
    if eligible.size < 2:
        raise NoPositivePairsError("no positive pairs available")
    singles = sorted(lab for lab, g in groups.items() if len(g) < 2)
    if singles:
        log.warning("labels with a single training sample never anchor: %s", singles)
    chunks = validation_batches(labels, train_idx, val_idx, train_cfg.batch_anchors)

    model = EncoderModel(encoder_cfg, seed=train_cfg.seed)
    params = model.parameters()
    opt = T.AdamState(lr=train_cfg.lr)
    records = []

    def validate(it):
        loss = evaluate_loss(model, dataset, chunks, train_cfg.temperature, train_cfg.mask_same_label_negatives)
        records.append({"iteration": it, "split": "val", "loss": loss})
        return loss

    best_loss = validate(0) if chunks else float("inf")
    best_model, best_it = model.copy(), 0
    it = 0
    per_epoch = max(1, eligible.size // train_cfg.batch_anchors)
    for epoch in range(train_cfg.epochs):
        order = eligible[np.random.default_rng([train_cfg.seed, 2, epoch]).permutation(eligible.size)]
        for b in range(per_epoch):
            anchors = order[b * train_cfg.batch_anchors : (b + 1) * train_cfg.batch_anchors]
            rng = np.random.default_rng([train_cfg.seed, 1, it])
            batch = sample_batch(dataset, rng, augment_cfg=train_cfg.augment, anchors=anchors, pool=train_idx)
            model.zero_grad()
            g = forward_g(model, batch.clouds, training=True)
            loss = nt_xent_loss(
                g, batch.pair_index, train_cfg.temperature, batch.labels, train_cfg.mask_same_label_negatives
            )
            loss.backward()
            T.adam_step(params, [p.grad for p in params], opt)
            it += 1
            records.append({"iteration": it, "split": "train", "loss": float(loss.data)})
            if chunks and it % train_cfg.val_every == 0:
                v = validate(it)
                if v < best_loss:
                    best_loss, best_model, best_it = v, model.copy(), it
        if progress is not None:
            progress(epoch, it, records)
    if chunks and it % train_cfg.val_every != 0:
        v = validate(it)
        if v < best_loss:
            best_loss, best_model, best_it = v, model.copy(), it
    if not chunks:
        best_model, best_it = model.copy(), it
    return TrainResult(best_model, records, best_it, best_loss, model)
