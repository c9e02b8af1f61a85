"""Per-observation encoder runtime at batch sizes 1 and 32 on a simulated trial.

    python scripts/bench_encoder.py [--ckpt model.ckpt] [--arch dgcnn] [--frames 60]

Each observation is preprocessed and embedded; the total wall time is divided
by the number of observations.  The fastest of ``--repeats`` passes is kept.
"""
import argparse

from bye.encoder import EncoderConfig, EncoderModel, load_checkpoint
from bye.evaluation import bench
from bye.mapping import frame_observations
from bye.simulator import TrajectorySpec, generate_scene, render_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt")
    ap.add_argument("--arch", choices=("pointnet", "dgcnn"), default="pointnet")
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    model = load_checkpoint(args.ckpt) if args.ckpt else EncoderModel(EncoderConfig(arch=args.arch), args.seed)
    trial = render_trial(generate_scene(seed=args.seed), TrajectorySpec(frames=args.frames))
    clouds = [c for f in trial.frames for _, c in frame_observations(f, trial.intrinsics, 50)]
    print(f"{model.cfg.arch}, {len(clouds)} observations")
    print(f"{'batch':>5}  {'total s':>8}  {'ms/sample':>9}  {'samples/s':>9}")
    for b in (1, 32):
        r = bench(model, clouds, b, repeats=args.repeats)
        print(f"{b:>5}  {r.total_seconds:8.3f}  {r.ms_per_sample:9.3f}  {r.samples_per_second:9.1f}")


if __name__ == "__main__":
    main()
