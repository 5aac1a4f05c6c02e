"""Simulated holographic display, target preparation, metrics and the batch runner."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import camera_model as cm
from . import color_balance as cb
from .colorimetry import (XYZ, ColorSpace, delta_e_2000, gamut_map_chroma, holo, linearize, named_space, srgb,
                          white_point, xyz_to_lab, cst)
from .imageio import read_image
from .optimizers import CCMModel, OptimizationConfig, OptimizationError, fit_ccm, optimize
from .wavefield import PropagationModel, synthetic_homography

log = logging.getLogger(__name__)

FLAGS = ("cst", "mlp", "cbc")
ENCODING_SPACES = {"srgb": "srgb", "prophoto": "prophoto", "linear": "srgb"}


# ---------------------------------------------------------------------------
# simulated display


def perturb_illumination(factors: Optional[Sequence[float]] = None, seed: Optional[int] = None,
                         spread: float = 0.1) -> np.ndarray:
    """Per-channel laser gain errors: explicit ``factors`` or uniform in 1 +- spread."""
    if factors is not None:
        f = np.asarray(factors, dtype=float)
        if f.shape != (3,) or np.any(f <= 0) or not np.all(np.isfinite(f)):
            raise ValueError(f"perturbation factors must be three positive numbers, got {factors}")
        return f
    if not 0 <= spread < 1:
        raise ValueError("spread must lie in [0, 1)")
    return np.random.default_rng(seed).uniform(1 - spread, 1 + spread, size=3)


@dataclass
class SimulatedDisplay:
    """Laser CFS display imaged by a camera surrogate.

    ``camera`` maps XYZ to raw: either an inverse MLP (predicting dark-free
    raw) or a :class:`SyntheticCamera`. ``restoration`` maps dark-corrected
    raw back to XYZ. ``exposure`` converts laser power to camera-side XYZ.
    """

    propagation: PropagationModel
    laser: cb.LaserModel
    camera: Union[cm.MLPParams, cm.SyntheticCamera]
    restoration: cm.MLPParams
    perturbation: np.ndarray = field(default_factory=lambda: np.ones(3))
    exposure: float = 0.4
    dark: float = cm.DARK_OFFSET_8BIT / 255
    holo: ColorSpace = field(default_factory=holo)
    cmf_matrix: np.ndarray = field(default_factory=cb.cmfs_matrix)

    def __post_init__(self):
        self.perturbation = perturb_illumination(self.perturbation)
        if self.exposure <= 0:
            raise ValueError("exposure must be positive")

    def with_perturbation(self, factors) -> "SimulatedDisplay":
        d = SimulatedDisplay(**{f: getattr(self, f) for f in self.__dataclass_fields__})
        d.perturbation = perturb_illumination(factors)
        return d

    def camera_xyz(self, intensity: np.ndarray, laser: cb.LaserModel) -> np.ndarray:
        """XYZ reaching the sensor, (H, W, 3), from per-channel intensity (3, H, W)."""
        power = laser.max_intensity * self.perturbation * laser.durations
        weighted = np.asarray(intensity, dtype=float) * power[:, None, None]
        return self.exposure * np.einsum("ij,jhw->hwi", self.cmf_matrix, weighted)

    def sensor(self, xyz: np.ndarray) -> np.ndarray:
        if isinstance(self.camera, cm.SyntheticCamera):
            return self.camera.capture(xyz)
        return np.clip(self.camera.predict(xyz) + self.dark, 0.0, 1.0)

    def capture(self, intensity: np.ndarray, laser: cb.LaserModel) -> np.ndarray:
        return self.sensor(self.camera_xyz(intensity, laser))

    def restore(self, raw: np.ndarray) -> np.ndarray:
        return self.restoration.predict(cm.dark_correct_float(raw, round(self.dark * 255)))

    def to_json(self) -> dict:
        if isinstance(self.camera, cm.SyntheticCamera):
            camera = {"kind": "synthetic", **self.camera.to_json()}
        else:
            camera = {"kind": "mlp", **self.camera.to_json()}
        return {
            "propagation": self.propagation.to_json(),
            "laser": self.laser.to_json(),
            "camera": camera,
            "restoration": self.restoration.to_json(),
            "perturbation": self.perturbation.tolist(),
            "exposure": self.exposure,
            "dark": self.dark,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, blob: dict, dtype=np.float32) -> "SimulatedDisplay":
        cam = dict(blob["camera"])
        kind = cam.pop("kind")
        camera = cm.SyntheticCamera.from_json(cam) if kind == "synthetic" else cm.MLPParams.from_json(cam, dtype)
        return cls(
            PropagationModel.from_json(blob["propagation"]),
            cb.LaserModel.from_json(blob["laser"]),
            camera,
            cm.MLPParams.from_json(blob["restoration"], dtype),
            np.asarray(blob.get("perturbation", [1, 1, 1]), float),
            blob.get("exposure", 0.4),
            blob.get("dark", cm.DARK_OFFSET_8BIT / 255),
        )

    @classmethod
    def load(cls, path) -> "SimulatedDisplay":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def simulate_capture(d: SimulatedDisplay, phase: np.ndarray, laser: Optional[cb.LaserModel] = None) -> np.ndarray:
    return d.capture(d.propagation.intensity(phase), laser or d.laser)


@dataclass
class DeskConfig:
    """Everything needed to rebuild the desk-scale simulated display."""

    size: int = 256
    camera_mode: str = "inverse_mlp"
    grid: tuple = (24, 24, 24)
    epochs: int = 80
    exposure: float = 0.4
    aberrations: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.camera_mode not in ("inverse_mlp", "synthetic"):
            raise ValueError(f"unknown camera mode {self.camera_mode!r}")
        self.grid = tuple(self.grid)


def desk_propagation(size: int, aberrations: bool = True, seed: int = 0) -> PropagationModel:
    if not aberrations:
        return PropagationModel(size, size)
    rng = np.random.default_rng(seed)
    zern = [list(rng.normal(0, 0.3, size=8)) for _ in range(3)]
    homs = [None, synthetic_homography(rng, size, size), synthetic_homography(rng, size, size)]
    return PropagationModel(size, size, zernike=zern, homographies=homs)


def build_desk_display(cfg: DeskConfig = DeskConfig(), log_rows: Optional[dict] = None) -> SimulatedDisplay:
    """Train restoration (and inverse) MLPs on the synthetic camera and assemble a display."""
    m_cmfs = cb.cmfs_matrix()
    laser = cb.LaserModel.balanced_to(white_point("d65"), m_cmfs)
    sensor = cm.SyntheticCamera()
    data = cm.make_synthetic_dataset(sensor, cfg.grid, m_cmfs, laser.max_intensity, seed=cfg.seed)
    tcfg = cm.TrainConfig(epochs=cfg.epochs, seed=cfg.seed)
    rows_r, rows_i = [], []
    restoration = cm.train_mlp(data, tcfg, "restore", log_rows=rows_r)
    if cfg.camera_mode == "inverse_mlp":
        camera = cm.train_mlp(data, tcfg, "inverse", log_rows=rows_i)
    else:
        camera = sensor
    if log_rows is not None:
        log_rows.update(restore=rows_r, inverse=rows_i)
    return SimulatedDisplay(desk_propagation(cfg.size, cfg.aberrations, cfg.seed), laser, camera, restoration,
                            exposure=cfg.exposure)


# ---------------------------------------------------------------------------
# targets and scenes


def prepare_target_array(img: np.ndarray, encoding: str, holo_space: Optional[ColorSpace] = None,
                         source: Optional[ColorSpace] = None):
    """Encoded image -> (gamut-mapped Holo target, linear source-space image)."""
    if encoding not in ENCODING_SPACES:
        raise ValueError(f"unknown encoding {encoding!r}")
    holo_space = holo_space or holo()
    source = source or named_space(ENCODING_SPACES[encoding])
    lin = np.clip(linearize(np.asarray(img, dtype=float), encoding), 0.0, 1.0)
    # route through Holo RGB so a D50 source is adapted to the D65 Holo white
    xyz = cst(cst(lin, source, holo_space), holo_space, XYZ)
    return gamut_map_chroma(xyz, holo_space), lin


def prepare_target(path, encoding: str, holo_space: Optional[ColorSpace] = None, source: Optional[ColorSpace] = None):
    return prepare_target_array(read_image(path), encoding, holo_space, source)


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        m = i == k
        out[m] = np.stack([np.broadcast_to(c, h.shape)[m] for c in (r, g, b)], axis=-1)
    return out


def _blobs(rng, size, n, palette):
    yy, xx = np.mgrid[0:size, 0:size] / size
    acc = np.zeros((size, size, 3))
    wsum = np.full((size, size), 1e-6)
    for _ in range(n):
        cx, cy, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.08, 0.25)
        w = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        acc += w[..., None] * palette(rng)
        wsum += w
    return acc / wsum[..., None]


def desk_scenes(size: int = 256, seed: int = 0) -> list:
    """Ten sRGB-encoded test scenes: ramps, hue sweeps, patches and smooth blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    scenes = []
    scenes.append(("gray_ramp", np.repeat((0.15 + 0.7 * xx)[..., None], 3, axis=-1)))
    scenes.append(("hue_sweep", _hsv_to_rgb(xx * 0.999, 0.6 + 0.0 * yy, 0.5 + 0.4 * yy)))
    cells = rng.uniform(0.15, 0.9, size=(4, 6, 3))
    scenes.append(("patches", cells[np.minimum((yy * 4).astype(int), 3), np.minimum((xx * 6).astype(int), 5)]))
    scenes.append(("warm_gradient", np.stack([0.85 + 0 * xx, 0.35 + 0.45 * xx, 0.15 + 0.2 * yy], axis=-1)))
    scenes.append(("cool_gradient", np.stack([0.15 + 0.2 * yy, 0.35 + 0.45 * xx, 0.85 + 0 * xx], axis=-1)))
    scenes.append(("color_blobs", _blobs(rng, size, 12, lambda r: r.uniform(0.1, 0.95, 3))))
    skin = np.array([[0.87, 0.67, 0.55], [0.62, 0.42, 0.30], [0.45, 0.30, 0.20], [0.95, 0.80, 0.70]])
    scenes.append(("earth_tones", _blobs(rng, size, 10, lambda r: skin[r.integers(len(skin))])))
    bars = np.array([[0.85, 0.2, 0.2], [0.2, 0.8, 0.25], [0.2, 0.3, 0.85], [0.85, 0.8, 0.2], [0.8, 0.25, 0.8], [0.2, 0.8, 0.8]])
    scenes.append(("primary_bars", bars[np.minimum((xx * 6).astype(int), 5)] * (0.6 + 0.4 * yy[..., None])))
    scenes.append(("pastel_blobs", _blobs(rng, size, 12, lambda r: 0.55 + 0.4 * r.uniform(0, 1, 3))))
    disc = ((xx - 0.5) ** 2 + (yy - 0.5) ** 2) < 0.08
    gray = np.repeat((0.4 + 0.2 * yy)[..., None], 3, axis=-1)
    gray[disc] = [0.75, 0.45, 0.3]
    scenes.append(("gray_disc", gray))
    return [(name, np.clip(img, 0.0, 1.0)) for name, img in scenes]


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mean_delta_e(a, b, space: Optional[ColorSpace] = None) -> float:
    """Mean CIEDE2000 between two linear images in the same RGB space (Lab under D65)."""
    space = space or holo()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"mean_delta_e: shape mismatch {a.shape} vs {b.shape}")
    white = white_point("d65")
    lab_a = xyz_to_lab(a.reshape(-1, 3) @ space.m_rgb_to_xyz.T, white)
    lab_b = xyz_to_lab(b.reshape(-1, 3) @ space.m_rgb_to_xyz.T, white)
    return float(np.mean(delta_e_2000(lab_a, lab_b)))


# ---------------------------------------------------------------------------
# colour checker CCM for the CITL+CCM baseline


def checker_patches(n: int = 48, seed: int = 7) -> np.ndarray:
    """Linear sRGB reference patches: a neutral row plus seeded random colours."""
    grays = np.repeat(np.linspace(0.05, 0.9, 8)[:, None], 3, axis=1)
    colours = linearize(np.random.default_rng(seed).uniform(0.1, 0.95, size=(n - 8, 3)), "srgb")
    return np.vstack([grays, colours])


def fit_display_ccm(d: SimulatedDisplay, brightness: float = 0.8, **kw) -> CCMModel:
    """Photograph the checker under broadband light and fit raw -> linear sRGB."""
    ref = checker_patches()
    xyz = brightness * (ref @ srgb().m_rgb_to_xyz.T)
    raw = cm.dark_correct_float(d.sensor(xyz.reshape(-1, 1, 3)).reshape(-1, 3), round(d.dark * 255))
    return fit_ccm(raw, ref, **kw)


# ---------------------------------------------------------------------------
# experiment runner


def parse_method(spec: str):
    """``"pacolorholo"``, ``"citl"``, ``"citl_ccm"`` or ``"pacolorholo-no-cst-no-cbc"``."""
    name, *off = spec.replace("citl-ccm", "citl_ccm").split("-no-")
    flags = {f: True for f in FLAGS}
    for f in off:
        if f not in FLAGS:
            raise ValueError(f"unknown ablation flag {f!r} in {spec!r}")
        if name != "pacolorholo":
            raise ValueError("ablations apply to pacolorholo only")
        flags[f] = False
    return name, flags


def ablation_specs() -> list:
    """All eight on/off combinations of the cst, mlp and cbc stages."""
    out = []
    for bits in product((True, False), repeat=3):
        out.append("pacolorholo" + "".join(f"-no-{f}" for f, on in zip(FLAGS, bits) if not on))
    return out


@dataclass
class ExperimentConfig:
    iterations: int = 100
    lr_phase: float = 0.1
    lr_scale: float = 0.01
    seed: int = 0
    perturbation_spread: float = 0.1
    perturbation: Optional[tuple] = None

    def optimization(self, spec: str, seed: int) -> OptimizationConfig:
        name, flags = parse_method(spec)
        return OptimizationConfig(name, self.iterations, self.lr_phase, self.lr_scale, seed, **flags)


def config_digest(blob) -> str:
    return hashlib.sha256(json.dumps(blob, sort_keys=True, default=str).encode()).hexdigest()[:16]


def evaluate_run(run, target_holo) -> dict:
    pred = run.scale * run.restored_holo
    return {"psnr_db": psnr(pred, target_holo), "mean_de2000": mean_delta_e(pred, target_holo), "fsimc": None}


def run_experiment(scenes: Sequence, methods: Sequence[str], cfg: ExperimentConfig, display: SimulatedDisplay,
                   out_dir=None, ccm: Optional[CCMModel] = None) -> dict:
    """Optimise every (scene, method) pair and score s * restored capture against the Holo target.

    ``scenes`` holds ``(name, encoded sRGB image)`` pairs. Each scene gets its
    own seeded illumination perturbation shared by all methods. A failing job
    is recorded with its error and the batch moves on.
    """
    if any(parse_method(m)[0] == "citl_ccm" for m in methods) and ccm is None:
        ccm = fit_display_ccm(display)
    rows = []
    for i, (name, img) in enumerate(scenes):
        target_holo, target_src = prepare_target_array(img, "srgb", display.holo)
        factors = perturb_illumination(cfg.perturbation, seed=cfg.seed + 1000 + i, spread=cfg.perturbation_spread)
        disp = display.with_perturbation(factors)
        for spec in methods:
            row = {"scene": name, "method": spec, "perturbation": factors.tolist()}
            t0 = time.perf_counter()
            try:
                ocfg = cfg.optimization(spec, cfg.seed + i)
                run = optimize(target_holo, ocfg, disp, target_source=target_src,
                               ccm=ccm if ocfg.method == "citl_ccm" else None)
                row.update(evaluate_run(run, target_holo))
                row["final_loss"] = run.loss[-1]
                row["scale"] = run.scale
                row["durations"] = run.durations.tolist()
            except (OptimizationError, ValueError, cb.ColorBalanceError, np.linalg.LinAlgError) as exc:
                log.warning("%s/%s failed: %s", name, spec, exc)
                row.update(psnr_db=None, mean_de2000=None, fsimc=None, error=str(exc))
            row["seconds"] = time.perf_counter() - t0
            log.info("%s %s psnr=%s de=%s", name, spec, row.get("psnr_db"), row.get("mean_de2000"))
            rows.append(row)
    report = {
        "config": asdict(cfg),
        "config_digest": config_digest({"experiment": asdict(cfg), "display": display.to_json()}),
        "rows": rows,
        "aggregate": aggregate(rows),
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def aggregate(rows) -> dict:
    out = {}
    for spec in dict.fromkeys(r["method"] for r in rows):
        ok = [r for r in rows if r["method"] == spec and r.get("mean_de2000") is not None]
        out[spec] = {
            "n": len(ok),
            "mean_de2000": float(np.mean([r["mean_de2000"] for r in ok])) if ok else None,
            "mean_psnr_db": float(np.mean([r["psnr_db"] for r in ok])) if ok else None,
            "fsimc": None,
        }
    return out


TIMING_KEYS = ("seconds",)


def write_report(report: dict, out_dir) -> None:
    """report.json (timings stripped) plus a flat report.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stable = dict(report, rows=[{k: v for k, v in r.items() if k not in TIMING_KEYS} for r in report["rows"]])
    with open(out / "report.json", "w") as fh:
        json.dump(stable, fh, indent=2, sort_keys=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "method", "psnr_db", "mean_de2000", "fsimc", "error"])
        for r in report["rows"]:
            w.writerow([r["scene"], r["method"], r.get("psnr_db"), r.get("mean_de2000"), "", r.get("error", "")])
