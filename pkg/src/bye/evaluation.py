"""Association success rate and the encoder runtime benchmark."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from bye import tensor as T
from bye.encoder import forward_h
from bye.geometry import PointCloud
from bye.pointcloud import PreprocessConfig, prepare_observation


@dataclass
class EvalReport:
    overall: float
    correct: int
    total: int
    per_category: dict = field(default_factory=dict)  # category -> {"correct", "total", "rate"}
    per_object: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def evaluate_association(pred, gt, categories=None, probabilities=None):
    """Correctly associated objects divided by all objects, overall and per category.

    ``categories`` maps reference id -> category; ``probabilities`` optionally
    maps new id -> final probability of the predicted match.
    """
    pred = {int(k): int(v) for k, v in pred.items()}
    gt = {int(k): int(v) for k, v in gt.items()}
    if set(pred) != set(gt):
        diff = sorted(set(pred) ^ set(gt))
        raise ValueError(f"prediction and ground truth cover different new ids: {diff}")
    categories = categories or {}
    per_obj, per_cat = [], {}
    for j in sorted(gt):
        ok = pred[j] == gt[j]
        cat = categories.get(gt[j])
        row = {"new_id": j, "predicted_ref_id": pred[j], "true_ref_id": gt[j], "correct": ok, "category": cat}
        if probabilities is not None:
            row["probability"] = probabilities.get(j)
        per_obj.append(row)
        if cat is not None:
            c = per_cat.setdefault(str(cat), {"correct": 0, "total": 0})
            c["correct"] += int(ok)
            c["total"] += 1
    for c in per_cat.values():
        c["rate"] = c["correct"] / c["total"]
    correct = sum(r["correct"] for r in per_obj)
    total = len(per_obj)
    return EvalReport(correct / total if total else 0.0, correct, total, dict(sorted(per_cat.items())), per_obj)


@dataclass
class BenchResult:
    batch_size: int
    samples: int
    total_seconds: float
    ms_per_sample: float
    samples_per_second: float


def bench(model, clouds, batch_size=1, preprocess=PreprocessConfig(min_points=1), repeats=1):
    """Time preprocessing plus eval-mode embedding of every cloud.

    Clouds must already be in memory; the total time is divided by the
    number of observations.  With ``repeats`` > 1 the fastest pass is kept.
    """
    clouds = [c if isinstance(c, PointCloud) else PointCloud(np.asarray(c)) for c in clouds]
    best = np.inf
    for _ in range(repeats):
        start = time.perf_counter()
        with T.no_grad():
            for i in range(0, len(clouds), batch_size):
                batch = [prepare_observation(c, preprocess)[0].points for c in clouds[i : i + batch_size]]
                forward_h(model, batch, training=False)
        best = min(best, time.perf_counter() - start)
    n = len(clouds)
    return BenchResult(batch_size, n, best, 1000.0 * best / n, n / best)
