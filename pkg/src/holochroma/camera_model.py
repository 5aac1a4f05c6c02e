"""Camera colour restoration: a from-scratch MLP (raw RGB <-> XYZ), the synthetic
camera used as ground truth, dataset preparation and the baseline mappers."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from . import color_balance as cb
from .colorimetry import delta_e_2000, holo, white_point, xyz_to_lab
from .optimizers import AdamState, adam_step

log = logging.getLogger(__name__)

DEFAULT_DIMS = (3, 256, 128, 64, 32, 3)
DARK_OFFSET_8BIT = 15
SATURATION_8BIT = 235
PAPER_GRID = (32, 36, 39)
LEAKY_SLOPE = 0.01


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# network


@dataclass
class MLPParams:
    layer_dims: tuple
    weights: list  # (in, out) per layer
    biases: list
    activation: str = "relu"
    direction: str = "restore"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1:
            raise ValueError("one weight matrix per layer transition")
        for (a, b), w, bias in zip(zip(self.layer_dims[:-1], self.layer_dims[1:]), self.weights, self.biases):
            if w.shape != (a, b) or bias.shape != (b,):
                raise ValueError(f"layer shape mismatch: {w.shape}/{bias.shape} vs {a}->{b}")

    @classmethod
    def init(cls, layer_dims=DEFAULT_DIMS, seed: int = 0, activation: str = "relu",
             direction: str = "restore", dtype=np.float64) -> "MLPParams":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for a, b in zip(layer_dims[:-1], layer_dims[1:]):
            bound = math.sqrt(6.0 / a)
            ws.append(rng.uniform(-bound, bound, size=(a, b)).astype(dtype))
            bs.append(np.zeros(b, dtype=dtype))
        return cls(tuple(layer_dims), ws, bs, activation, direction)

    def astype(self, dtype) -> "MLPParams":
        return MLPParams(self.layer_dims, [w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases], self.activation, self.direction)

    def copy(self) -> "MLPParams":
        return self.astype(self.weights[0].dtype)

    @property
    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0)
        return np.where(z > 0, z, LEAKY_SLOPE * z)

    def _act_grad(self, z):
        if self.activation == "relu":
            return (z > 0).astype(z.dtype)
        return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)

    def forward(self, x, cache: bool = False):
        x = np.asarray(x, dtype=self.weights[0].dtype)
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.layer_dims[0]}")
        pre = []
        h = x
        acts = [x]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i == last:
                h = z
            else:
                pre.append(z)
                h = self._act(z)
                acts.append(h)
        return (h, (acts, pre)) if cache else h

    def backward(self, cache, grad_out) -> list:
        """Parameter gradients, ordered like :attr:`params`."""
        acts, pre = cache
        grads = []
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            if i > 0:
                g = (g @ self.weights[i].T) * self._act_grad(pre[i - 1])
        grads.reverse()  # -> [w0, b0, w1, b1, ...]
        return grads

    def predict(self, x, chunk: int = 4096) -> np.ndarray:
        """Row-chunked forward pass for large pixel batches."""
        x = np.asarray(x)
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        dtype = self.weights[0].dtype
        out = np.empty((flat.shape[0], self.layer_dims[-1]), dtype=dtype)
        last = len(self.weights) - 1
        for i in range(0, flat.shape[0], chunk):
            h = flat[i:i + chunk].astype(dtype)
            for j, (w, b) in enumerate(zip(self.weights, self.biases)):
                h = h @ w
                h += b
                if j < last:
                    # in-place activations; same values as forward()
                    if self.activation == "relu":
                        np.maximum(h, 0, out=h)
                    else:
                        np.maximum(h, LEAKY_SLOPE * h, out=h)
            out[i:i + chunk] = h
        return out.reshape(shape[:-1] + (self.layer_dims[-1],)).astype(float)

    __call__ = predict

    def to_json(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "direction": self.direction,
            "layers": [{"w": w.T.astype(float).ravel().tolist(), "b": b.astype(float).tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_json(cls, blob: dict, dtype=np.float64) -> "MLPParams":
        dims = blob["layer_dims"]
        ws, bs = [], []
        for (a, b), layer in zip(zip(dims[:-1], dims[1:]), blob["layers"]):
            ws.append(np.asarray(layer["w"], dtype=dtype).reshape(b, a).T.copy())
            bs.append(np.asarray(layer["b"], dtype=dtype))
        return cls(tuple(dims), ws, bs, blob.get("activation", "relu"), blob.get("direction", "restore"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path, dtype=np.float64) -> "MLPParams":
        with open(path) as fh:
            return cls.from_json(json.load(fh), dtype)


def mlp_forward(p: MLPParams, rgb) -> np.ndarray:
    return p.forward(rgb)


def l1_loss_and_grad(pred, target):
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ---------------------------------------------------------------------------
# synthetic camera and dataset


@dataclass
class SyntheticCamera:
    """raw = clip(softsat(gamma(crosstalk @ xyz)) + dark, 0, 1)."""

    crosstalk: np.ndarray = field(default_factory=lambda: leakage_matrix(0.1))
    gammas: np.ndarray = field(default_factory=lambda: np.array([0.9, 1.1, 1.05]))
    shoulder: Optional[float] = 0.9
    dark: float = DARK_OFFSET_8BIT / 255

    def __post_init__(self):
        self.crosstalk = np.asarray(self.crosstalk, dtype=float)
        self.gammas = np.asarray(self.gammas, dtype=float)
        if abs(np.linalg.det(self.crosstalk)) <= 1e-9:
            raise ValueError("crosstalk matrix must be invertible")
        if np.any(self.gammas <= 0):
            raise ValueError("gammas must be positive")

    def response(self, xyz) -> np.ndarray:
        """Dark-free sensor response before clipping."""
        lin = np.clip(np.asarray(xyz, dtype=float) @ self.crosstalk.T, 0.0, None)
        v = lin ** self.gammas
        if self.shoulder is not None:
            s = self.shoulder
            v = np.where(v > s, s + (1 - s) * np.tanh((v - s) / (1 - s)), v)
        return v

    def capture(self, xyz) -> np.ndarray:
        return np.clip(self.response(xyz) + self.dark, 0.0, 1.0)

    def to_json(self) -> dict:
        return {"crosstalk": self.crosstalk.ravel().tolist(), "gammas": self.gammas.tolist(),
                "shoulder": self.shoulder, "dark": self.dark}

    @classmethod
    def from_json(cls, blob: dict) -> "SyntheticCamera":
        return cls(np.asarray(blob["crosstalk"], float).reshape(3, 3), np.asarray(blob["gammas"], float),
                   blob.get("shoulder"), blob.get("dark", 0.0))

    @classmethod
    def passthrough(cls) -> "SyntheticCamera":
        return cls(np.eye(3), np.ones(3), None, 0.0)


def leakage_matrix(leak: float) -> np.ndarray:
    """Row-normalised mixing with ``leak`` total off-diagonal weight per row."""
    m = np.full((3, 3), leak / 2)
    np.fill_diagonal(m, 1 - leak)
    return m


def synth_capture(cam: SyntheticCamera, xyz) -> np.ndarray:
    return cam.capture(xyz)


def dark_field_correct(raw8, offset: int = DARK_OFFSET_8BIT) -> np.ndarray:
    """Subtract the fixed 8-bit sensor offset and normalise to [0, 1]."""
    return np.maximum(np.asarray(raw8, dtype=float) - offset, 0.0) / 255.0


def dark_correct_float(raw, offset: int = DARK_OFFSET_8BIT) -> np.ndarray:
    return np.maximum(np.asarray(raw, dtype=float) - offset / 255.0, 0.0)


@dataclass
class ColorDataset:
    raw: np.ndarray  # dark-corrected, normalised
    xyz: np.ndarray
    mono: np.ndarray  # bool
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __post_init__(self):
        n = len(self.raw)
        if n == 0:
            raise ValueError("empty colour dataset")
        both = np.concatenate([self.train_idx, self.val_idx])
        if len(both) != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ValueError("train/validation split must partition the samples")

    def __len__(self):
        return len(self.raw)

    def subset(self, idx) -> tuple:
        return self.raw[idx], self.xyz[idx], self.mono[idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["raw_r", "raw_g", "raw_b", "X", "Y", "Z", "subset"])
            for r, x, m in zip(self.raw, self.xyz, self.mono):
                w.writerow([*(f"{v:.10g}" for v in r), *(f"{v:.10g}" for v in x), "mono" if m else "poly"])

    @classmethod
    def from_csv(cls, path, seed: int = 0, val_fraction: float = 0.1) -> "ColorDataset":
        raw, xyz, mono = [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                raw.append([float(row["raw_r"]), float(row["raw_g"]), float(row["raw_b"])])
                xyz.append([float(row["X"]), float(row["Y"]), float(row["Z"])])
                mono.append(row["subset"] == "mono")
        train, val = split_indices(len(raw), seed, val_fraction)
        return cls(np.array(raw), np.array(xyz), np.array(mono, dtype=bool), train, val)


def split_indices(n: int, seed: int = 0, val_fraction: float = 0.1):
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def filter_dataset(raw8, levels, xyz, seed: int = 0, val_fraction: float = 0.1,
                   threshold: int = SATURATION_8BIT) -> ColorDataset:
    """Drop saturated and black samples, dark-correct, tag mono/poly and split."""
    raw8 = np.asarray(raw8)
    levels = np.asarray(levels)
    xyz = np.asarray(xyz, dtype=float)
    nonzero = np.count_nonzero(levels, axis=1)
    keep = (np.max(raw8, axis=1) <= threshold) & (nonzero > 0)
    if not keep.any():
        raise ValueError("no samples survive filtering")
    train, val = split_indices(int(keep.sum()), seed, val_fraction)
    return ColorDataset(dark_field_correct(raw8[keep]), xyz[keep], nonzero[keep] == 1, train, val)


def illumination_grid(grid=PAPER_GRID) -> np.ndarray:
    """All integer level triples of an (nR, nG, nB) grid, shape (N, 3)."""
    axes = [np.arange(n) for n in grid]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def make_synthetic_dataset(cam: SyntheticCamera, grid=PAPER_GRID, m_cmfs: Optional[np.ndarray] = None,
                           max_intensity: Optional[np.ndarray] = None, seed: int = 0,
                           val_fraction: float = 0.1) -> ColorDataset:
    """Simulated capture campaign over a grid of laser illumination levels.

    XYZ is normalised by the grid's maximum Y, and camera raw values are
    quantised to 8 bits before filtering and dark correction.
    """
    m_cmfs = cb.cmfs_matrix() if m_cmfs is None else m_cmfs
    if max_intensity is None:
        max_intensity = np.linalg.solve(m_cmfs, white_point("d65"))
    levels = illumination_grid(grid)
    frac = levels / (np.asarray(grid) - 1)
    xyz = (frac * max_intensity) @ m_cmfs.T
    xyz = xyz / xyz[:, 1].max()
    raw8 = np.rint(cam.capture(xyz) * 255).astype(int)
    return filter_dataset(raw8, levels, xyz, seed, val_fraction)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 0.0015
    weight_decay: float = 1e-5
    epochs: int = 2000
    batch_size: int = 512
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls(**json.load(fh))


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``cfg.lr`` at epoch 0 to zero at the last epoch."""
    if cfg.epochs == 1:
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


def _as_lab(v, kind: str):
    white = white_point("d65")
    xyz = v if kind == "xyz" else v @ holo().m_rgb_to_xyz.T
    return xyz_to_lab(xyz, white)


def mean_de2000(pred, target, kind: str = "xyz") -> float:
    """Mean CIEDE2000 between predictions and targets given as XYZ or Holo RGB."""
    return float(np.mean(delta_e_2000(_as_lab(np.asarray(pred, float), kind), _as_lab(np.asarray(target, float), kind))))


def _pairs(data: ColorDataset, direction: str):
    if direction == "restore":
        return data.raw, data.xyz
    if direction == "inverse":
        return data.xyz, data.raw
    raise ValueError(f"unknown direction {direction!r}")


def train_mlp(data: ColorDataset, cfg: TrainConfig, direction: str = "restore", layer_dims=DEFAULT_DIMS,
              activation: str = "relu", log_rows: Optional[list] = None) -> MLPParams:
    """AdamW + cosine schedule on L1, with half of every batch from each subset.

    The parameters with the lowest validation L1 are returned. ``log_rows``
    (if given) receives ``(epoch, train_l1, val_l1, val_de2000, lr)`` tuples.
    """
    x, y = _pairs(data, direction)
    dtype = np.dtype(cfg.dtype)
    x = x.astype(dtype)
    y = y.astype(dtype)
    train = data.train_idx
    if train.size == 0:
        raise TrainingError("empty training split")
    mono = train[data.mono[train]]
    poly = train[~data.mono[train]]
    if mono.size == 0 or poly.size == 0:
        raise TrainingError("both monochromatic and polychromatic training samples are required")
    xv, yv = x[data.val_idx], y[data.val_idx]
    kind = "xyz" if direction == "restore" else "holo"

    rng = np.random.default_rng(cfg.seed)
    net = MLPParams.init(layer_dims, seed=cfg.seed, activation=activation, direction=direction, dtype=dtype)
    states = [AdamState.zeros_like(p) for p in net.params]
    half = max(1, cfg.batch_size // 2)
    steps = math.ceil(poly.size / half)
    best, best_val = net.copy(), math.inf

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        poly_order = rng.permutation(poly)
        mono_order = np.resize(rng.permutation(mono), steps * half)
        running = 0.0
        for it in range(steps):
            pb = poly_order[it * half:(it + 1) * half]
            mb = mono_order[it * half:(it + 1) * half]
            grads = None
            loss = 0.0
            for idx in (mb, pb):
                pred, cache = net.forward(x[idx], cache=True)
                l, g = l1_loss_and_grad(pred, y[idx])
                loss += l
                gi = net.backward(cache, g)
                grads = gi if grads is None else [a + b for a, b in zip(grads, gi)]
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, step {it}")
            running += loss
            new = [adam_step(p, g, s, lr, cfg.weight_decay) for p, g, s in zip(net.params, grads, states)]
            net.weights, net.biases = new[0::2], new[1::2]
        pred_v = net.forward(xv) if len(xv) else np.empty((0, 3))
        val_l1 = float(np.mean(np.abs(pred_v - yv))) if len(xv) else running / steps
        if not math.isfinite(val_l1):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        if val_l1 < best_val:
            best_val, best = val_l1, net.copy()
        if log_rows is not None:
            de = mean_de2000(pred_v, yv, kind) if len(xv) else float("nan")
            log_rows.append((epoch, running / steps, val_l1, de, lr))
    return best


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_l1", "val_l1", "val_de2000", "lr"])
        for r in rows:
            w.writerow([r[0], *(f"{v:.8g}" for v in r[1:])])


def restore_image(p: MLPParams, raw) -> np.ndarray:
    """Per-pixel restoration of a (..., 3) raw image to XYZ."""
    raw = np.asarray(raw)
    if raw.shape[-1] != 3:
        raise ValueError("raw image must have three channels")
    return p.predict(raw)


# ---------------------------------------------------------------------------
# baseline mappers


def poly3_features(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    cols = [np.ones(rgb.shape[:-1])]
    for deg in (1, 2, 3):
        for combo in combinations_with_replacement(range(3), deg):
            cols.append(np.prod(rgb[..., list(combo)], axis=-1))
    return np.stack(cols, axis=-1)


def root_poly3_features(rgb) -> np.ndarray:
    """Degree-3 root-polynomial terms (all homogeneous of degree one)."""
    v = np.clip(np.asarray(rgb, dtype=float), 0.0, None)
    r, g, b = v[..., 0], v[..., 1], v[..., 2]
    cols = [r, g, b, np.sqrt(r * g), np.sqrt(g * b), np.sqrt(r * b)]
    for a, c in ((r, g), (g, b), (r, b)):
        cols += [np.cbrt(a * a * c), np.cbrt(a * c * c)]
    cols.append(np.cbrt(r * g * b))
    return np.stack(cols, axis=-1)


@dataclass
class LinearFeatureMap:
    method: str
    coef: np.ndarray

    def predict(self, rgb) -> np.ndarray:
        feats = poly3_features(rgb) if self.method == "poly3" else root_poly3_features(rgb)
        return feats @ self.coef

    __call__ = predict


def fit_polynomial_map(data: ColorDataset, method: str = "poly3", cfg: Optional[TrainConfig] = None):
    """Baseline raw->XYZ mappers: least-squares polynomials or a 3-64-3 LeakyReLU net."""
    raw, xyz = data.raw[data.train_idx], data.xyz[data.train_idx]
    if len(raw) == 0:
        raise ValueError("empty training data")
    if method == "shallow_mlp":
        return train_mlp(data, cfg or TrainConfig(), "restore", (3, 64, 3), activation="leaky_relu")
    if method == "poly3":
        a = poly3_features(raw)
    elif method == "root_poly":
        a = root_poly3_features(raw)
    else:
        raise ValueError(f"unknown mapper {method!r}")
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise np.linalg.LinAlgError(f"{method}: design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(a, xyz, rcond=None)
    return LinearFeatureMap(method, coef)
