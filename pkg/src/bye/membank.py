"""Reference-trial embedding memory bank and frequency-vote association."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from bye.encoder import embed
from bye.geometry import PointCloud
from bye.scores import ScoreMatrix

log = logging.getLogger(__name__)


class UnobservedInstanceError(ValueError):
    pass


@dataclass
class MemoryBank:
    embeddings: np.ndarray  # L x E, rows l2-normalized, float32
    labels: np.ndarray  # L reference instance ids
    ref_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.labels.shape[0]:
            raise ValueError("embeddings and labels are not aligned")
        if self.embeddings.shape[0] < 1:
            raise ValueError("memory bank needs at least one row")
        norms = np.linalg.norm(self.embeddings.astype(np.float64), axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError("memory bank rows must be finite and nonzero")
        off = np.abs(norms - 1.0) > 1e-6  # unit rows are kept bit-identical
        if np.any(off):
            self.embeddings = self.embeddings.copy()
            self.embeddings[off] = (self.embeddings[off] / norms[off, None]).astype(np.float32)
        if not self.ref_ids:
            self.ref_ids = sorted(set(self.labels.tolist()))
        missing = set(self.labels.tolist()) - set(self.ref_ids)
        if missing:
            raise ValueError(f"labels {sorted(missing)} missing from the reference id list")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]


@dataclass
class Neighbours:
    labels: np.ndarray
    similarities: np.ndarray
    rows: np.ndarray
    truncated: bool = False  # k exceeded the bank size


def _normalize(x):
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(x)):
        raise ValueError("embedding must be finite and nonzero")
    return x / n


def build_bank(dataset, model, batch_size=64):
    clouds = [s.cloud.points if isinstance(s.cloud, PointCloud) else s.cloud for s in dataset]
    if not clouds:
        raise ValueError("empty dataset")
    h = embed(model, clouds, batch_size)
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    return MemoryBank(_normalize(h).astype(np.float32), labels)


def knn_query(bank, query, k=10):
    """Exact cosine k-NN by linear scan; ties go to the lower row index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = _normalize(query)
    sims = bank.embeddings.astype(np.float64) @ q
    truncated = k > len(bank)
    k = min(k, len(bank))
    order = np.lexsort((np.arange(len(bank)), -sims))[:k]
    return Neighbours(bank.labels[order], sims[order], order, truncated)


def knn_query_batch(bank, queries, k=10):
    """knn_query for each row of ``queries``; returns a list of Neighbours."""
    q = _normalize(queries)
    sims = q @ bank.embeddings.astype(np.float64).T
    truncated = k > len(bank)
    kk = min(k, len(bank))
    rows = np.arange(len(bank))
    out = []
    for s in sims:
        order = np.lexsort((rows, -s))[:kk]
        out.append(Neighbours(bank.labels[order], s[order], order, truncated))
    return out


class AssociationTracker:
    """Counts of retrieved reference labels per new instance id."""

    def __init__(self):
        self.counts = {}
        self.observations = {}

    def update(self, new_id, neighbour_labels):
        c = self.counts.setdefault(int(new_id), Counter())
        for lab in np.asarray(neighbour_labels).tolist():
            c[int(lab)] += 1
        self.observations[int(new_id)] = self.observations.get(int(new_id), 0) + 1

    def new_ids(self):
        return sorted(self.counts)

    def probabilities(self, new_id):
        c = self.counts.get(int(new_id))
        if not c:
            return {}
        total = sum(c.values())
        return {ref: n / total for ref, n in sorted(c.items())}


def update_tracker(tracker, new_id, neighbour_labels):
    tracker.update(new_id, neighbour_labels)


def score_matrix(tracker, new_ids, ref_ids):
    """Frequency-vote probabilities P(f(j) = i); rows without evidence stay zero."""
    vals = np.zeros((len(new_ids), len(ref_ids)))
    col = {int(r): c for c, r in enumerate(ref_ids)}
    empty = []
    for r, j in enumerate(new_ids):
        c = tracker.counts.get(int(j))
        if not c:
            empty.append(int(j))
            continue
        total = sum(c.values())
        for ref, n in c.items():
            if ref in col:
                vals[r, col[ref]] = n / total
    if empty:
        log.warning("new instances without retrieval evidence: %s", empty)
    return ScoreMatrix(vals, list(new_ids), list(ref_ids), empty)


def associate_majority(tracker, new_ids=None):
    """Most frequently retrieved reference id per new id (ties -> lowest ref id)."""
    new_ids = tracker.new_ids() if new_ids is None else list(new_ids)
    missing = [int(j) for j in new_ids if not tracker.counts.get(int(j))]
    if missing:
        raise UnobservedInstanceError(f"new instances never observed: {missing}")
    out = {}
    for j in new_ids:
        c = tracker.counts[int(j)]
        best = max(c.values())
        out[int(j)] = min(ref for ref, n in c.items() if n == best)
    return out
