"""Seeded desk-scale association experiment shared by scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from bye.encoder import EncoderConfig
from bye.evaluation import evaluate_association
from bye.mapping import generate_dataset
from bye.membank import build_bank
from bye.pipeline import METHODS, associate, semantic_features
from bye.simulator import TrajectorySpec, simulate_pair
from bye.training import TrainConfig, train


@dataclass(frozen=True)
class DeskSceneConfig:
    n_objects: int = 15
    n_duplicates: int = 3
    frames: int = 60
    width: int = 160
    height: int = 120
    epochs: int = 50
    temperature: float = 0.07
    arch: str = "pointnet"
    k: int = 10
    val_every: int = 300
    methods: tuple = METHODS


@dataclass
class SceneResult:
    seed: int
    success: dict  # method -> overall success rate
    duplicates_correct: dict  # method -> correctly associated duplicates
    n_duplicates: int
    best_iteration: int
    best_val_loss: float
    seconds: float
    reports: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def run_scene(seed, cfg=DeskSceneConfig()):
    """Simulate, train on the reference trial, and associate the relocated trial with every method."""
    start = time.perf_counter()
    traj = TrajectorySpec(frames=cfg.frames, width=cfg.width, height=cfg.height)
    pair = simulate_pair(cfg.n_objects, cfg.n_duplicates, seed=seed, traj=traj)
    ref = generate_dataset(pair.ref_trial)
    new = generate_dataset(pair.new_trial)
    res = train(ref, EncoderConfig(arch=cfg.arch), TrainConfig(epochs=cfg.epochs, temperature=cfg.temperature, val_every=cfg.val_every, seed=seed))
    bank = build_bank(ref, res.model)
    ref_sem = new_sem = None
    if {"semantic", "ensemble"} & set(cfg.methods):
        ref_sem = semantic_features(pair.ref_trial, pair.ref_features)
        new_sem = semantic_features(pair.new_trial, pair.new_features)
    dup_cat = 0
    n_dup = sum(1 for c in pair.categories.values() if c == dup_cat)
    success, dups, reports = {}, {}, {}
    for method in cfg.methods:
        out = associate(pair.new_trial, res.model, bank, cfg.k, method, ref_sem, new_sem, new_samples=new)
        ev = evaluate_association(out.mapping, pair.ground_truth, pair.categories)
        success[method] = ev.overall
        dups[method] = ev.per_category.get(str(dup_cat), {}).get("correct", 0)
        reports[method] = ev.to_dict()
    return SceneResult(seed, success, dups, n_dup, res.best_iteration, res.best_val_loss, time.perf_counter() - start, reports)
