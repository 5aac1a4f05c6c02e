"""``holochroma`` command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import camera_model as cm
from . import color_balance as cb
from . import harness as hz
from .colorimetry import ColorimetryError, ColorSpace, Spectrum, build_color_space, white_point
from .imageio import read_pfm, write_pfm, write_png
from .optimizers import CCMModel, OptimizationConfig, OptimizationError, fit_ccm, optimize
from .wavefield import WavefieldError, phase_to_uint8

log = logging.getLogger("holochroma")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _seed(arg_seed):
    env = os.environ.get("HOLOCHROMA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"HOLOCHROMA_SEED must be an integer, got {env!r}") from None
    return arg_seed


def _grid(text: str) -> tuple:
    try:
        grid = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"grid must look like 32x36x39, got {text!r}") from None
    if len(grid) != 3 or min(grid) < 2:
        raise ValueError("grid needs three sizes >= 2")
    return grid


def _write_json(path, blob) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2)


def _read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _read_rgb_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 3:
        raise ValueError(f"{path}: expected at least three columns")
    return data[:, -3:]


# ---------------------------------------------------------------------------
# commands


def cmd_build_colorspace(args) -> None:
    spds = [Spectrum.from_csv(p) for p in (args.spd_r, args.spd_g, args.spd_b)]
    space = build_color_space(spds, white_point(args.white), args.name)
    space.save(args.out)
    print(json.dumps(space.to_json()["m_rgb_to_xyz"]))


def cmd_build_system(args) -> None:
    blob = _read_json(args.config) if args.config else {}
    blob["seed"] = _seed(blob.get("seed", 0))
    display = hz.build_desk_display(hz.DeskConfig(**blob))
    display.save(args.out)


def cmd_make_synth_dataset(args) -> None:
    camera = cm.SyntheticCamera() if args.camera == "default" else cm.SyntheticCamera.from_json(_read_json(args.camera))
    data = cm.make_synthetic_dataset(camera, _grid(args.grid), seed=_seed(args.seed))
    data.to_csv(args.out)
    print(f"{len(data)} samples ({int(data.mono.sum())} monochromatic)")


def cmd_train_mlp(args) -> None:
    blob = _read_json(args.config) if args.config else {}
    blob["seed"] = _seed(blob.get("seed", 0))
    cfg = cm.TrainConfig(**blob)
    data = cm.ColorDataset.from_csv(args.data, seed=cfg.seed)
    rows = []
    net = cm.train_mlp(data, cfg, args.direction, log_rows=rows)
    net.save(args.out)
    cm.write_training_log(rows, args.log or Path(args.out).with_suffix(".log.csv"))
    best = min(rows, key=lambda r: r[2])
    print(f"best epoch {best[0]}: val_l1={best[2]:.6g} val_de2000={best[3]:.4g}")


def cmd_fit_ccm(args) -> None:
    model = fit_ccm(_read_rgb_csv(args.captured), _read_rgb_csv(args.reference), k1=args.k1, k2=args.k2,
                    seed=_seed(args.seed))
    _write_json(args.out, model.to_json())


def cmd_prepare_target(args) -> None:
    space = ColorSpace.load(args.colorspace) if args.colorspace else None
    target, source = hz.prepare_target(args.input, args.encoding, space)
    write_pfm(args.out, target)
    out = Path(args.out)
    write_pfm(out.with_name(out.stem + "_source.pfm"), source)


def cmd_optimize(args) -> None:
    display = hz.SimulatedDisplay.load(args.system)
    if args.perturbation:
        display = display.with_perturbation([float(v) for v in args.perturbation.split(",")])
    target = read_pfm(args.target).astype(float)
    src_path = Path(args.target_source) if args.target_source else Path(args.target).with_name(Path(args.target).stem + "_source.pfm")
    source = read_pfm(src_path).astype(float) if src_path.exists() else None
    off = [f for f in (args.ablate.split(",") if args.ablate else []) if f]
    bad = set(off) - set(hz.FLAGS)
    if bad:
        raise ValueError(f"unknown ablation flags {sorted(bad)}")
    method = args.method.replace("-", "_")
    cfg = OptimizationConfig(method, args.iters, args.lr_phase, args.lr_scale, _seed(args.seed),
                             cbc_mean=args.cbc_mean, **{f: f not in off for f in hz.FLAGS})
    ccm = None
    if method == "citl_ccm":
        ccm = CCMModel.from_json(_read_json(args.ccm)) if args.ccm else hz.fit_display_ccm(display)
    run = optimize(target, cfg, display, target_source=source, ccm=ccm)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {"optimization": cfg.to_json(), "system": str(args.system),
                                      "target": str(args.target), "perturbation": display.perturbation.tolist()})
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "s", "T_r", "T_g", "T_b"])
        for k, (loss, s, t) in enumerate(zip(run.loss, run.scales, run.duration_trace), start=1):
            w.writerow([k, repr(loss), repr(s), *(repr(float(v)) for v in t)])
    for c, name in enumerate("rgb"):
        write_png(out / f"phase_{name}.png", phase_to_uint8(run.phase[c]) / 255.0)
    write_pfm(out / "captured_raw.pfm", run.captured_raw)
    write_pfm(out / "restored_holo.pfm", run.restored_holo)
    write_pfm(out / "target_holo.pfm", target)
    _write_json(out / "result.json", {"scale": run.scale, "durations": run.durations.tolist(),
                                      "laser_updates": run.laser_updates, **hz.evaluate_run(run, target)})
    print(f"final loss {run.loss[-1]:.6g}, s = {run.scale:.6g}")


def cmd_evaluate(args) -> None:
    rows = []
    for d in args.runs:
        d = Path(d)
        result = _read_json(d / "result.json")
        cfg = _read_json(d / "config.json")["optimization"]
        pred = result["scale"] * read_pfm(d / "restored_holo.pfm").astype(float)
        target = read_pfm(d / "target_holo.pfm").astype(float)
        spec = cfg["method"] + "".join(f"-no-{f}" for f in hz.FLAGS if cfg["method"] == "pacolorholo" and not cfg[f])
        rows.append({"run": d.name, "method": spec,
                     "psnr_db": hz.psnr(pred, target), "mean_de2000": hz.mean_delta_e(pred, target), "fsimc": None})
    report = {"rows": rows, "aggregate": hz.aggregate(rows)}
    _write_json(args.out, report)
    for r in rows:
        print(f"{r['run']}: psnr {r['psnr_db']:.3f} dB, dE2000 {r['mean_de2000']:.3f}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holochroma", description="Colour-managed holographic display simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-colorspace", help="RGB colour space from three primary SPD files")
    s.add_argument("--spd-r", required=True)
    s.add_argument("--spd-g", required=True)
    s.add_argument("--spd-b", required=True)
    s.add_argument("--white", default="d65")
    s.add_argument("--name", default="holo")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_colorspace)

    s = sub.add_parser("build-system", help="train camera models and write a simulated display")
    s.add_argument("--config", help="JSON with DeskConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_system)

    s = sub.add_parser("make-synth-dataset", help="simulated camera calibration captures")
    s.add_argument("--camera", default="default", help="SyntheticCamera JSON or 'default'")
    s.add_argument("--grid", default="32x36x39")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synth_dataset)

    s = sub.add_parser("train-mlp", help="fit the restoration or inverse camera MLP")
    s.add_argument("--data", required=True)
    s.add_argument("--direction", choices=("restore", "inverse"), default="restore")
    s.add_argument("--config")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_mlp)

    s = sub.add_parser("fit-ccm", help="white balance + 3x3 colour correction from patch CSVs")
    s.add_argument("--captured", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--k1", type=int, default=2000)
    s.add_argument("--k2", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_ccm)

    s = sub.add_parser("prepare-target", help="decode, linearise and gamut-map an image into Holo RGB")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--encoding", choices=("srgb", "prophoto", "linear"), required=True)
    s.add_argument("--colorspace")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_target)

    s = sub.add_parser("optimize", help="optimise SLM phases against the simulated display")
    s.add_argument("--method", choices=("pacolorholo", "citl", "citl-ccm", "citl_ccm"), default="pacolorholo")
    s.add_argument("--target", required=True)
    s.add_argument("--target-source")
    s.add_argument("--system", required=True)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ablate", default="", help="comma list of stages to disable: cst,mlp,cbc")
    s.add_argument("--lr-phase", type=float, default=0.1)
    s.add_argument("--lr-scale", type=float, default=0.01)
    s.add_argument("--cbc-mean", choices=("all", "nonzero"), default="all",
                   help="pixels averaged for the colour balance: all, or nonzero target pixels only")
    s.add_argument("--perturbation", help="per-channel laser gains, e.g. 1.1,1,1")
    s.add_argument("--ccm")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("evaluate", help="score optimisation runs")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (OptimizationError, cm.TrainingError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError, ColorimetryError, WavefieldError, cb.ColorBalanceError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
