"""Train and associate on seeded desk-scale scenes; prints a success-rate table.

    python scripts/run_desk_scenes.py --seeds 0 1 2 3 4 --out results/desk.json
"""
import argparse
import json
import os
import time

from bye.experiment import DeskSceneConfig, run_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--arch", choices=("pointnet", "dgcnn"), default="pointnet")
    ap.add_argument("--temp", type=float, default=0.07)
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = DeskSceneConfig(epochs=args.epochs, arch=args.arch, temperature=args.temp)
    start = time.perf_counter()
    results = []
    print(f"{'seed':>4}  {'bye':>5}  {'bye-h':>5}  {'sem':>5}  {'ens':>5}  dup(sem)  best it  secs")
    for seed in args.seeds:
        r = run_scene(seed, cfg)
        s = r.success
        print(
            f"{seed:>4}  {s['bye']:5.3f}  {s['bye-hungarian']:5.3f}  {s['semantic']:5.3f}  {s['ensemble']:5.3f}"
            f"  {r.duplicates_correct['semantic']}/{r.n_duplicates}       {r.best_iteration:>7}  {r.seconds:5.0f}",
            flush=True,
        )
        results.append(r.to_dict())
    total = time.perf_counter() - start
    means = {m: sum(r["success"][m] for r in results) / len(results) for m in cfg.methods}
    print("mean  " + "  ".join(f"{means[m]:5.3f}" for m in cfg.methods) + f"   total {total / 60:.1f} min")
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump({"config": {**cfg.__dict__, "methods": list(cfg.methods)}, "scenes": results, "mean": means, "seconds": total}, fh, indent=2)


if __name__ == "__main__":
    main()
