"""Color-field-sequential laser model and two-step color balance correction."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .colorimetry import CMFTable, cie1931

DEFAULT_WAVELENGTHS_NM = (636.0, 512.0, 453.0)
DUTY_CAP = 1.0
RATIO_EPS = 1e-6


class ColorBalanceError(ValueError):
    pass


def cmfs_matrix(wavelengths_nm: Sequence[float] = DEFAULT_WAVELENGTHS_NM, cmf: Optional[CMFTable] = None) -> np.ndarray:
    """3x3 matrix whose column i is (xbar, ybar, zbar) at laser line i."""
    cmf = cmf or cie1931()
    m = cmf(np.asarray(wavelengths_nm, dtype=float)).T
    if abs(np.linalg.det(m)) <= 1e-9:
        raise ColorBalanceError("CMF matrix is singular for these wavelengths")
    return m


@dataclass(frozen=True)
class LaserModel:
    max_intensity: np.ndarray
    durations: np.ndarray = (1.0, 1.0, 1.0)
    wavelengths_nm: tuple = DEFAULT_WAVELENGTHS_NM
    reference_duration_ms: float = 4.0
    duty_cap: float = DUTY_CAP

    def __post_init__(self):
        mx = np.asarray(self.max_intensity, dtype=float)
        t = np.asarray(self.durations, dtype=float)
        if np.any(mx <= 0):
            raise ColorBalanceError("max intensities must be positive")
        if np.any(t < 0):
            raise ColorBalanceError("durations must be nonnegative")
        object.__setattr__(self, "max_intensity", mx)
        object.__setattr__(self, "durations", t)

    def with_durations(self, durations) -> "LaserModel":
        return replace(self, durations=np.asarray(durations, dtype=float))

    def perturbed(self, factors) -> "LaserModel":
        f = np.asarray(factors, dtype=float)
        if np.any(f <= 0):
            raise ColorBalanceError("perturbation factors must be positive")
        return replace(self, max_intensity=self.max_intensity * f)

    @classmethod
    def balanced_to(cls, white_xyz, m_cmfs: np.ndarray, **kw) -> "LaserModel":
        """Lasers whose full-duty mixture reproduces ``white_xyz``."""
        return cls(np.linalg.solve(m_cmfs, np.asarray(white_xyz, dtype=float)), **kw)

    def to_json(self) -> dict:
        return {
            "wavelengths_nm": list(self.wavelengths_nm),
            "max_intensity": self.max_intensity.tolist(),
            "durations": self.durations.tolist(),
            "reference_duration_ms": self.reference_duration_ms,
            "duty_cap": self.duty_cap,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "LaserModel":
        return cls(
            np.asarray(blob["max_intensity"], float),
            np.asarray(blob.get("durations", [1, 1, 1]), float),
            tuple(blob.get("wavelengths_nm", DEFAULT_WAVELENGTHS_NM)),
            blob.get("reference_duration_ms", 4.0),
            blob.get("duty_cap", DUTY_CAP),
        )

    @classmethod
    def load(cls, path) -> "LaserModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def intensities_from_durations(m: LaserModel) -> np.ndarray:
    return m.max_intensity * m.durations


def intensity_to_xyz(intensity, m_cmfs: np.ndarray) -> np.ndarray:
    return np.asarray(intensity, dtype=float) @ np.asarray(m_cmfs).T


def normalize_durations(t, cap: float = DUTY_CAP) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    peak = t.max()
    if peak <= 0:
        raise ColorBalanceError("all durations are zero")
    return t * (cap / peak)


def cbc_init(target_mean_xyz, m: LaserModel, m_cmfs: np.ndarray) -> np.ndarray:
    """Durations whose laser mixture has the chromaticity of ``target_mean_xyz``."""
    intensity = np.linalg.solve(m_cmfs, np.asarray(target_mean_xyz, dtype=float))
    tol = 1e-12 * np.max(np.abs(intensity))
    if np.any(intensity < -tol):
        raise ColorBalanceError(f"target colour lies outside the laser gamut (intensities {intensity})")
    intensity = np.clip(intensity, 0.0, None)
    return normalize_durations(intensity / m.max_intensity, m.duty_cap)


def cbc_refine(captured_mean_xyz, m: LaserModel, m_cmfs: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Rescale durations by the ratio of captured to expected channel intensity."""
    captured = np.linalg.solve(m_cmfs, np.asarray(captured_mean_xyz, dtype=float))
    expected = intensities_from_durations(m)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = captured / expected
    if np.any(~np.isfinite(ratio)) or np.any(ratio < RATIO_EPS):
        raise ColorBalanceError(f"captured channel vanished (ratios {ratio}); refusing to rebalance")
    t = m.durations / ratio
    return normalize_durations(t, m.duty_cap) if normalize else t
