"""Desk-scale method comparison and ablation sweep on the synthetic scene suite.

    python scripts/run_ablation.py --iters 80 --out runs/ablation
"""
import argparse
import json
import logging
import time

from holochroma import harness as hz


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=80)
    ap.add_argument("--scenes", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--camera", choices=("inverse_mlp", "synthetic"), default="inverse_mlp")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--with-ccm", action="store_true", help="also run the CITL+CCM baseline")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    display = hz.build_desk_display(hz.DeskConfig(camera_mode=args.camera, epochs=args.epochs, seed=args.seed))
    logging.info("display ready in %.1fs", time.perf_counter() - t0)
    methods = ["citl"] + (["citl_ccm"] if args.with_ccm else []) + hz.ablation_specs()
    cfg = hz.ExperimentConfig(iterations=args.iters, seed=args.seed)
    report = hz.run_experiment(hz.desk_scenes(seed=args.seed)[: args.scenes], methods, cfg, display, out_dir=args.out)
    print(json.dumps(report["aggregate"], indent=2))
    logging.info("total %.1fs", time.perf_counter() - t0)


if __name__ == "__main__":
    main()
