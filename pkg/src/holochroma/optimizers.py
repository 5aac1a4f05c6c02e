"""Hologram optimisation: straight-through replacement, MSE, Adam, CCM fitting and
the optimisation loops for the ``pacolorholo``, ``citl`` and ``citl_ccm`` methods."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import color_balance as cb
from .colorimetry import XYZ, cst

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
METHODS = ("pacolorholo", "citl", "citl_ccm")


class OptimizationError(RuntimeError):
    """Numerical failure inside an optimisation loop."""


# ---------------------------------------------------------------------------
# building blocks


def replace(u, v):
    """Straight-through swap R(u, v).

    Returns ``(value, backward)``: the forward value is a copy of ``v`` and
    ``backward`` hands the gradient w.r.t. the output straight to ``u``.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"replace: shape mismatch {u.shape} vs {v.shape}")
    value = np.array(v, dtype=float, copy=True)

    def backward(grad_out):
        grad_out = np.asarray(grad_out, dtype=float)
        if grad_out.shape != u.shape:
            raise ValueError("replace: gradient shape mismatch")
        return grad_out

    return value, backward


def mse_loss(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b) -> np.ndarray:
    """d mse_loss(a, b) / d a."""
    a = np.asarray(a, dtype=float)
    return 2.0 * (a - b) / a.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, x) -> "AdamState":
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.floating):
            x = x.astype(float)
        return cls(np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(theta, grad, state: AdamState, lr: float, weight_decay: float = 0.0,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
    """One bias-corrected Adam update; ``weight_decay`` > 0 gives decoupled AdamW.

    Returns the new parameters; ``state`` is advanced in place.
    """
    grad = np.asarray(grad)
    if not np.all(np.isfinite(grad)):
        raise OptimizationError("non-finite gradient passed to adam_step")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    if weight_decay:
        theta = theta * (1 - lr * weight_decay)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# colour correction matrix (white balance, then 3x3)


@dataclass
class CCMModel:
    white_balance: np.ndarray  # diagonal 3x3
    matrix: np.ndarray

    @property
    def composite(self) -> np.ndarray:
        return self.matrix @ self.white_balance

    def apply(self, rgb) -> np.ndarray:
        return np.asarray(rgb, dtype=float) @ self.composite.T

    def to_json(self) -> dict:
        return {
            "white_balance": np.diag(self.white_balance).tolist(),
            "matrix": self.matrix.ravel().tolist(),
            "composite": self.composite.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, blob) -> "CCMModel":
        return cls(np.diag(blob["white_balance"]), np.asarray(blob["matrix"], float).reshape(3, 3))


def _lipschitz(x: np.ndarray) -> float:
    # gradient Lipschitz constant of mean((x @ M.T - y)^2) w.r.t. M
    return 2.0 * np.linalg.eigvalsh(x.T @ x).max() / x.size


def fit_ccm(captured, reference, k1: int = 2000, k2: int = 2000, lr_w: Optional[float] = None,
            lr_m: Optional[float] = None, seed: int = 0, init_scale: float = 0.01) -> CCMModel:
    """Two-stage gradient-descent CCM: diagonal white balance, then a full 3x3.

    ``lr_w``/``lr_m`` default to 1/L for each stage's quadratic loss, which is
    the largest step plain gradient descent takes without oscillating.
    """
    x = np.asarray(captured, dtype=float).reshape(-1, 3)
    y = np.asarray(reference, dtype=float).reshape(-1, 3)
    if x.shape != y.shape:
        raise ValueError("captured and reference patch lists differ in length")
    if len(x) < 9:
        raise ValueError("fit_ccm needs at least 9 patch pairs")
    rng = np.random.default_rng(seed)
    w = 1.0 + init_scale * rng.standard_normal(3)
    m = np.eye(3) + init_scale * rng.standard_normal((3, 3))

    lw = 2.0 * np.max(np.sum(x * x, axis=0)) / x.size
    lr_w = lr_w if lr_w is not None else 1.0 / lw
    loss0 = None
    for _ in range(k1):
        xw = x * w
        loss = mse_loss(xw, y)
        loss0 = loss if loss0 is None else loss0
        if loss > 10 * loss0 + 1e-12:
            raise OptimizationError("white-balance stage diverged")
        w = w - lr_w * np.sum(mse_grad(xw, y) * x, axis=0)

    xw = x * w
    lr_m = lr_m if lr_m is not None else 1.0 / _lipschitz(xw)
    loss0 = None
    for _ in range(k2):
        pred = xw @ m.T
        loss = mse_loss(pred, y)
        loss0 = loss if loss0 is None else loss0
        if loss > 10 * loss0 + 1e-12:
            raise OptimizationError("colour-matrix stage diverged")
        m = m - lr_m * mse_grad(pred, y).T @ xw
    return CCMModel(np.diag(w), m)


# ---------------------------------------------------------------------------
# hologram optimisation


@dataclass
class OptimizationConfig:
    method: str = "pacolorholo"
    iterations: int = 500
    lr_phase: float = 0.05
    lr_scale: float = 0.01
    seed: int = 0
    cst: bool = True
    mlp: bool = True
    cbc: bool = True
    extra_refines: int = 0
    cbc_mean: str = "all"  # average over "all" pixels or only "nonzero" target pixels

    def __post_init__(self):
        if self.cbc_mean not in ("all", "nonzero"):
            raise ValueError(f"cbc_mean must be 'all' or 'nonzero', got {self.cbc_mean!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.iterations < 2 or self.iterations % 2:
            raise ValueError("iterations must be even and >= 2")
        if self.lr_phase <= 0 or self.lr_scale <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def flags(self) -> dict:
        if self.method == "pacolorholo":
            return {"cst": self.cst, "mlp": self.mlp, "cbc": self.cbc}
        return {"cst": self.method == "citl_ccm", "mlp": False, "cbc": False}

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class OptimizationRun:
    phase: np.ndarray
    scale: float
    durations: np.ndarray
    loss: list = field(default_factory=list)
    scales: list = field(default_factory=list)
    duration_trace: list = field(default_factory=list)
    laser_updates: list = field(default_factory=list)
    captured_raw: Optional[np.ndarray] = None
    restored_holo: Optional[np.ndarray] = None


def _loss_space_capture(system, raw, flags, ccm: Optional[CCMModel]):
    """Captured image expressed in the space the loss compares against."""
    if ccm is not None:
        return ccm.apply(raw)
    if flags["mlp"]:
        xyz = system.restore(raw)
        # without the CST stage the restored XYZ is compared as-is
        return cst(xyz, XYZ, system.holo) if flags["cst"] else xyz
    return raw


def _capture_xyz(system, raw, captured, flags) -> np.ndarray:
    """XYZ estimate of a capture as seen by the pipeline (feeds the CBC refine)."""
    if flags["cst"]:
        return cst(captured, system.holo, XYZ)
    return captured


def objective(phase, s: float, target_chw, system, laser, flags, ccm: Optional[CCMModel] = None):
    """Loss and gradients of one camera-in-the-loop evaluation.

    The capture replaces the simulated intensity in the forward pass; the
    gradient flows back through the simulated intensity. Returns
    ``(loss, d loss / d phase, d loss / d s, raw, captured)``.
    """
    model = system.propagation
    fields = model.fields(phase)
    intensity = np.abs(fields) ** 2
    raw = system.capture(intensity, laser)
    captured = _loss_space_capture(system, raw, flags, ccm)
    value, backward = replace(intensity, np.moveaxis(captured, -1, 0))
    loss = mse_loss(s * value, target_chw)
    g_out = mse_grad(s * value, target_chw)
    g_s = float(np.sum(g_out * value))
    g_phase = model.backprop_to_phase(phase, backward(s * g_out), fields=fields)
    return loss, g_phase, g_s, raw, captured


def optimize(target_holo: np.ndarray, cfg: OptimizationConfig, system, target_source: Optional[np.ndarray] = None,
             ccm: Optional[CCMModel] = None, callback: Optional[Callable] = None) -> OptimizationRun:
    """Camera-in-the-loop phase optimisation against a simulated display.

    ``target_holo`` is the gamut-mapped target in Holo RGB, shape (H, W, 3).
    ``target_source`` is the linear target in its original space; it is the
    loss target whenever the CST stage is off (CITL and the CST ablations).
    ``system`` provides ``propagation``, ``holo``, ``laser``, ``cmf_matrix``,
    ``capture(intensity, laser)`` and ``restore(raw)``.
    """
    flags = cfg.flags
    if cfg.method == "citl_ccm" and ccm is None:
        raise ValueError("citl_ccm needs a fitted CCM")
    target_holo = np.asarray(target_holo, dtype=float)
    if flags["cst"]:
        target = target_holo
    else:
        if target_source is None:
            raise ValueError("a source-space target is required when CST is disabled")
        target = np.asarray(target_source, dtype=float)
    target_chw = np.moveaxis(target, -1, 0)

    model = system.propagation
    rng = np.random.default_rng(cfg.seed)
    phase = rng.uniform(-np.pi, np.pi, size=(model.n_channels, model.height, model.width))
    s = 1.0
    phase_state = AdamState.zeros_like(phase)
    s_state = AdamState.zeros_like(s)

    # laser initialisation from the mean colour of the Holo target (all methods)
    target_xyz = cst(target_holo.reshape(-1, 3), system.holo, XYZ)
    keep = np.any(target_xyz != 0, axis=1) if cfg.cbc_mean == "nonzero" else np.ones(len(target_xyz), bool)
    if not keep.any():
        raise ValueError("target has no nonzero pixels")
    mean_xyz = target_xyz[keep].mean(axis=0)
    laser = system.laser.with_durations(cb.cbc_init(mean_xyz, system.laser, system.cmf_matrix))

    refine_at = {cfg.iterations // 2} if flags["cbc"] else set()
    if flags["cbc"] and cfg.extra_refines:
        step = cfg.iterations // (2 * (cfg.extra_refines + 1))
        refine_at |= {cfg.iterations // 2 + step * (i + 1) for i in range(cfg.extra_refines)}

    run = OptimizationRun(phase, s, laser.durations.copy())
    for k in range(1, cfg.iterations + 1):
        loss, g_phase, g_s, raw, captured = objective(phase, s, target_chw, system, laser, flags, ccm)
        if not np.isfinite(loss):
            raise OptimizationError(f"non-finite loss at iteration {k}")

        run.loss.append(loss)
        run.scales.append(s)
        run.duration_trace.append(laser.durations.copy())

        phase = adam_step(phase, g_phase, phase_state, cfg.lr_phase)
        s = float(adam_step(s, g_s, s_state, cfg.lr_scale))
        if s <= 0:
            raise OptimizationError(f"energy scale became nonpositive at iteration {k}")

        if k in refine_at:
            xyz = _capture_xyz(system, raw, captured, flags)
            mean_xyz = xyz.reshape(-1, 3)[keep].mean(axis=0)
            laser = laser.with_durations(cb.cbc_refine(mean_xyz, laser, system.cmf_matrix))
            run.laser_updates.append(k)
        if callback is not None:
            callback(k, loss, s)

    run.phase = phase
    run.scale = s
    run.durations = laser.durations.copy()
    run.captured_raw = system.capture(model.intensity(phase), laser)
    run.restored_holo = cst(system.restore(run.captured_raw), XYZ, system.holo)
    return run
