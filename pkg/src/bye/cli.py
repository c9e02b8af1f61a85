"""Command-line entry point: ``bye <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from bye import formats
from bye.encoder import EncoderConfig, load_checkpoint, save_checkpoint
from bye.evaluation import bench, evaluate_association
from bye.mapping import build_instance_map, generate_dataset
from bye.membank import build_bank
from bye.pipeline import METHODS, associate, semantic_features
from bye.pointcloud import PreprocessConfig
from bye.simulator import RelocationSpec, TrajectorySpec, emit_semantic_features, generate_scene, relocate, render_trial
from bye.training import TrainConfig, train

log = logging.getLogger("bye")


def cmd_sim_gen(args):
    traj = TrajectorySpec(frames=args.frames, width=args.width, height=args.height)
    ref = generate_scene(args.objects, args.duplicates, args.seed)
    new, gt = relocate(ref, RelocationSpec(fraction=args.fraction, seed=args.seed))
    for scene, out, tid in ((ref, args.out, f"ref-{args.seed}"), (new, args.out_new, f"new-{args.seed}")):
        trial = render_trial(scene, traj, tid)
        formats.write_trial(trial, out)
        formats.write_json(os.path.join(out, "scene.json"), scene.to_dict())
        feats = emit_semantic_features(scene, trial, args.feature_dim, args.sigma, args.seed)
        formats.write_features(feats, os.path.join(out, "features.byef"))
    formats.write_json(
        os.path.join(args.out_new, "mapping.json"),
        {
            "format_version": formats.FORMAT_VERSION,
            "new_to_ref": {str(k): v for k, v in gt.items()},
            "ref_categories": {str(k): v for k, v in ref.categories().items()},
        },
    )
    print(f"wrote {args.out} and {args.out_new} ({len(ref.objects)} objects, {args.frames} frames)")


def cmd_map_build(args):
    imap = build_instance_map(formats.read_trial(args.trial), PreprocessConfig(min_points=args.min_points))
    formats.write_instance_map(imap, args.out)
    print(f"{len(imap.instances)} instances -> {args.out}")


def cmd_dataset_make(args):
    trial = formats.read_trial(args.trial)
    samples = generate_dataset(trial, PreprocessConfig(max_points=args.max_points, min_points=args.min_points))
    formats.write_dataset(samples, args.out, trial.trial_id)
    print(f"{len(samples)} samples -> {args.out}")


def cmd_train(args):
    samples = formats.read_dataset(args.dataset)
    enc = EncoderConfig(arch=args.arch, embed_dim=args.embed_dim, proj_dim=args.proj_dim, knn_k=args.knn_k)
    cfg = TrainConfig(
        batch_anchors=args.batch,
        epochs=args.epochs,
        lr=args.lr,
        temperature=args.temp,
        seed=args.seed,
        val_every=args.val_every,
    )

    def progress(epoch, it, records):
        log.info("epoch %d  iteration %d  train loss %.4f", epoch + 1, it, records[-1]["loss"])

    result = train(samples, enc, cfg, progress)
    save_checkpoint(result.model, args.out)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"best val loss {result.best_val_loss:.6f} at iteration {result.best_iteration} -> {args.out}")


def cmd_membank_build(args):
    bank = build_bank(formats.read_dataset(args.dataset), load_checkpoint(args.ckpt))
    formats.write_bank(bank, args.out)
    print(f"bank with {len(bank)} rows, {len(bank.ref_ids)} reference ids -> {args.out}")


def cmd_associate(args):
    model = load_checkpoint(args.ckpt)
    bank = formats.read_bank(args.bank)
    new_trial = formats.read_trial(args.trial)
    method = args.method
    ref_sem = new_sem = None
    if args.semantic_ref or args.semantic_new:
        if not (args.semantic_ref and args.semantic_new and args.ref_trial):
            raise ValueError("semantic ensembling needs --semantic-ref, --semantic-new and --ref-trial")
        ref_sem = semantic_features(formats.read_trial(args.ref_trial), formats.read_features(args.semantic_ref))
        new_sem = semantic_features(new_trial, formats.read_features(args.semantic_new))
        method = method or "ensemble"
    method = method or "bye"
    res = associate(new_trial, model, bank, args.k, method, ref_sem, new_sem)
    out = {
        "format_version": formats.FORMAT_VERSION,
        "method": res.method,
        "k": args.k,
        "mapping": {str(k): v for k, v in sorted(res.mapping.items())},
        "new_ids": res.new_ids,
        "ref_ids": res.ref_ids,
        "probabilities": res.probabilities.tolist(),
        "observations": {str(k): v for k, v in sorted(res.observations.items())},
        "total_score": res.total_score,
        "report": res.report,
    }
    if res.vlm_scores is not None:
        out["vlm_scores"] = res.vlm_scores.tolist()
    formats.write_json(args.out, out)
    print(f"{method}: associated {len(res.mapping)} objects -> {args.out}")


def cmd_evaluate(args):
    assoc = formats.read_json(args.assoc)
    gt = formats.read_json(args.gt)
    cats = {int(k): v for k, v in gt.get("ref_categories", {}).items()}
    probs = {}
    ref_ids = assoc["ref_ids"]
    for j, row in zip(assoc["new_ids"], assoc["probabilities"]):
        pred = assoc["mapping"].get(str(j))
        if pred is not None and pred in ref_ids:
            probs[int(j)] = row[ref_ids.index(pred)]
    report = evaluate_association(assoc["mapping"], gt["new_to_ref"], cats, probs)
    out = {"format_version": formats.FORMAT_VERSION, "method": assoc.get("method"), **report.to_dict()}
    formats.write_json(args.out, out)
    print(f"success rate {report.overall:.4f} ({report.correct}/{report.total}) -> {args.out}")


def cmd_bench(args):
    model = load_checkpoint(args.ckpt)
    if args.trial:
        from bye.mapping import frame_observations

        trial = formats.read_trial(args.trial)
        clouds = [c for f in trial.frames for _, c in frame_observations(f, trial.intrinsics)]
    else:
        clouds = [s.cloud for s in formats.read_dataset(args.dataset)]
    res = bench(model, clouds, args.batch, repeats=args.repeats)
    out = {
        "batch_size": res.batch_size,
        "samples": res.samples,
        "total_runtime_s": res.total_seconds,
        "ms_per_sample": res.ms_per_sample,
        "samples_per_s": res.samples_per_second,
    }
    if args.out:
        formats.write_json(args.out, out)
    print(
        f"batch {res.batch_size}: {res.samples} samples in {res.total_seconds:.3f} s, "
        f"{res.ms_per_sample:.3f} ms/sample, {res.samples_per_second:.1f} samples/s"
    )


def build_parser():
    p = argparse.ArgumentParser(prog="bye", description="Per-scene point-cloud encoder toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim").add_subparsers(dest="sim_command", required=True)
    g = sim.add_parser("gen", help="simulate a reference and a relocated trial")
    g.add_argument("--objects", type=int, default=15)
    g.add_argument("--duplicates", type=int, default=3)
    g.add_argument("--frames", type=int, default=60)
    g.add_argument("--width", type=int, default=160)
    g.add_argument("--height", type=int, default=120)
    g.add_argument("--fraction", type=float, default=0.5)
    g.add_argument("--feature-dim", type=int, default=32)
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--out-new", required=True)
    g.set_defaults(func=cmd_sim_gen)

    m = sub.add_parser("map").add_subparsers(dest="map_command", required=True)
    mb = m.add_parser("build", help="build the instance-level map of a trial")
    mb.add_argument("--trial", required=True)
    mb.add_argument("--out", required=True)
    mb.add_argument("--min-points", type=int, default=50)
    mb.set_defaults(func=cmd_map_build)

    d = sub.add_parser("dataset").add_subparsers(dest="dataset_command", required=True)
    dm = d.add_parser("make", help="write the partial-observation dataset of a trial")
    dm.add_argument("--trial", required=True)
    dm.add_argument("--out", required=True)
    dm.add_argument("--max-points", type=int, default=1024)
    dm.add_argument("--min-points", type=int, default=50)
    dm.set_defaults(func=cmd_dataset_make)

    t = sub.add_parser("train", help="train a per-scene encoder")
    t.add_argument("--dataset", required=True)
    t.add_argument("--arch", choices=("pointnet", "dgcnn"), default="pointnet")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=0.003)
    t.add_argument("--temp", type=float, default=0.07)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--val-every", type=int, default=300)
    t.add_argument("--embed-dim", type=int, default=256)
    t.add_argument("--proj-dim", type=int, default=64)
    t.add_argument("--knn-k", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="training log path (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    mem = sub.add_parser("membank").add_subparsers(dest="membank_command", required=True)
    mbb = mem.add_parser("build", help="embed a reference dataset into a memory bank")
    mbb.add_argument("--dataset", required=True)
    mbb.add_argument("--ckpt", required=True)
    mbb.add_argument("--out", required=True)
    mbb.set_defaults(func=cmd_membank_build)

    a = sub.add_parser("associate", help="associate a new trial to the reference bank")
    a.add_argument("--trial", required=True)
    a.add_argument("--ckpt", required=True)
    a.add_argument("--bank", required=True)
    a.add_argument("--semantic-ref")
    a.add_argument("--semantic-new")
    a.add_argument("--ref-trial", help="reference trial directory (needed for semantic ensembling)")
    a.add_argument("--method", choices=METHODS)
    a.add_argument("--k", type=int, default=10)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_associate)

    e = sub.add_parser("evaluate", help="score an association against ground truth")
    e.add_argument("--assoc", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="encoder runtime per observation")
    b.add_argument("--ckpt", required=True)
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--trial")
    b.add_argument("--batch", type=int, choices=(1, 32), default=32)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"bye: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
