"""End-to-end association: retrieval, optional semantic ensembling, assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bye.assignment import associate_ensemble, hungarian_assign
from bye.encoder import embed
from bye.mapping import build_instance_map, generate_dataset
from bye.membank import AssociationTracker, associate_majority, knn_query_batch, score_matrix
from bye.pointcloud import PreprocessConfig
from bye.semantic import DbscanConfig, fuse_voxel_features, object_features, vlm_score_matrix

METHODS = ("bye", "bye-hungarian", "semantic", "ensemble")


@dataclass
class AssociationResult:
    method: str
    mapping: dict  # new id -> ref id
    new_ids: list
    ref_ids: list
    probabilities: np.ndarray  # A_bye rows (new) x cols (ref)
    vlm_scores: np.ndarray = None
    total_score: float = None
    report: list = field(default_factory=list)
    observations: dict = field(default_factory=dict)


def retrieve(samples, model, bank, k=10, batch_size=64):
    """Vote every new observation's k nearest bank labels into a tracker."""
    tracker = AssociationTracker()
    h = embed(model, [s.cloud.points for s in samples], batch_size)
    for s, nb in zip(samples, knn_query_batch(bank, h, k)):
        tracker.update(s.label, nb.labels)
    return tracker


def semantic_features(trial, features, preprocess=PreprocessConfig(), dbscan=DbscanConfig(), resolution=0.05):
    """{instance id: feature vector} for a trial via voxel fusion and DBSCAN selection."""
    vmap = fuse_voxel_features(trial, features, resolution)
    imap = build_instance_map(trial, preprocess)
    return {i: f.vector for i, f in object_features(imap, vmap, dbscan).items()}


def associate(
    new_trial,
    model,
    bank,
    k=10,
    method="bye",
    ref_semantic=None,
    new_semantic=None,
    preprocess=PreprocessConfig(),
    new_samples=None,
):
    """Associate the instances of ``new_trial`` to the bank's reference ids.

    ``ref_semantic`` / ``new_semantic`` are {id: vector} maps, required for
    the ``semantic`` and ``ensemble`` methods.  ``bye`` takes the most
    voted reference id per object; ``bye-hungarian`` solves the bijection on
    the vote probabilities alone.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if new_samples is None:
        new_samples = generate_dataset(new_trial, preprocess)
    tracker = retrieve(new_samples, model, bank, k)
    ref_ids = list(bank.ref_ids)
    if method in ("semantic", "ensemble"):
        if ref_semantic is None or new_semantic is None:
            raise ValueError(f"method {method!r} needs semantic features for both trials")
        ref_ids = sorted(ref_semantic)
        new_ids = sorted(new_semantic)
    else:
        new_ids = tracker.new_ids()
    a_bye = score_matrix(tracker, new_ids, ref_ids)
    result = AssociationResult(method, {}, new_ids, ref_ids, a_bye.values, observations=dict(tracker.observations))
    if method == "bye":
        result.mapping = associate_majority(tracker, new_ids)
    elif method == "bye-hungarian":
        asg = hungarian_assign(a_bye)
        result.mapping, result.total_score = asg.mapping, asg.total_score
    elif method == "semantic":
        a_vlm = vlm_score_matrix([ref_semantic[i] for i in ref_ids], [new_semantic[j] for j in new_ids], ref_ids, new_ids)
        asg = hungarian_assign(a_vlm)
        result.mapping, result.total_score, result.vlm_scores = asg.mapping, asg.total_score, a_vlm.values
    else:
        asg, _, a_vlm = associate_ensemble(tracker, ref_semantic, new_semantic)
        result.mapping, result.total_score, result.vlm_scores = asg.mapping, asg.total_score, a_vlm.values
        result.report = asg.report
    return result
