"""Train the restoration MLP and compare it with the baseline raw->XYZ mappers.

    python scripts/train_camera_model.py --epochs 300 --out runs/camera
"""
import argparse
import json
import logging
import time
from pathlib import Path

from holochroma import camera_model as cm
from holochroma.colorimetry import holo


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="32x36x39")
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    ap.add_argument("--out", default="runs/camera")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    grid = tuple(int(v) for v in args.grid.split("x"))
    data = cm.make_synthetic_dataset(cm.SyntheticCamera(), grid, seed=args.seed)
    data.to_csv(out / "dataset.csv")
    logging.info("%d samples, %d monochromatic", len(data), int(data.mono.sum()))
    cfg = cm.TrainConfig(epochs=args.epochs, seed=args.seed, dtype=args.dtype)

    raw, xyz, _ = data.subset(data.val_idx)
    scores = {"uncorrected": cm.mean_de2000(raw, xyz @ holo().m_xyz_to_rgb.T, kind="holo")}
    for name in ("restore", "inverse"):
        t0 = time.perf_counter()
        rows = []
        net = cm.train_mlp(data, cfg, name, log_rows=rows)
        net.save(out / f"{name}_mlp.json")
        cm.write_training_log(rows, out / f"{name}_log.csv")
        logging.info("%s MLP trained in %.1fs", name, time.perf_counter() - t0)
        if name == "restore":
            scores["deep_mlp"] = cm.mean_de2000(net(raw), xyz)
    for method in ("shallow_mlp", "poly3", "root_poly"):
        scores[method] = cm.mean_de2000(cm.fit_polynomial_map(data, method, cfg)(raw), xyz)

    with open(out / "scores.json", "w") as fh:
        json.dump(scores, fh, indent=2)
    for k, v in scores.items():
        print(f"{k:12s} val mean dE2000 {v:.3f}")


if __name__ == "__main__":
    main()
