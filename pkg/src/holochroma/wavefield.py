"""Angular-spectrum propagation with Zernike compensation phase and per-channel
inverse-homography warps, plus the exact adjoint used for phase gradients.

All FFTs use the unitary ("ortho") normalisation so Parseval holds exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import factorial
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp

DEFAULT_PITCH = 6.4e-6
DEFAULT_DISTANCE = 0.12
DEFAULT_WAVELENGTHS = (636e-9, 512e-9, 453e-9)
MAX_NOLL = 15


class WavefieldError(ValueError):
    pass


@dataclass(frozen=True)
class ComplexField:
    data: np.ndarray
    pitch: float
    wavelength: float

    def __post_init__(self):
        if self.pitch <= 0 or self.wavelength <= 0:
            raise WavefieldError("pitch and wavelength must be positive")
        if not np.all(np.isfinite(self.data)):
            raise WavefieldError("field values must be finite")

    @property
    def shape(self):
        return self.data.shape

    def intensity(self) -> np.ndarray:
        return np.abs(self.data) ** 2


@dataclass(frozen=True)
class TransferFunction:
    h: np.ndarray
    pitch: float
    wavelength: float
    z: float

    @property
    def shape(self):
        return self.h.shape


def build_transfer_function(width: int, height: int, pitch: float, wavelength: float, z: float) -> TransferFunction:
    if width <= 0 or height <= 0 or pitch <= 0 or wavelength <= 0:
        raise WavefieldError("grid size, pitch and wavelength must be positive")
    fy = np.fft.fftfreq(height, d=pitch)[:, None]
    fx = np.fft.fftfreq(width, d=pitch)[None, :]
    inside = np.sqrt(fx**2 + fy**2) < 1.0 / wavelength
    # k z sqrt(...) reaches ~1e6 rad at desk distances; count cycles in extended
    # precision and keep only the fractional part so exp() sees a small angle
    lam = np.longdouble(wavelength)
    arg = 1 - (lam * fx.astype(np.longdouble)) ** 2 - (lam * fy.astype(np.longdouble)) ** 2
    cycles = np.longdouble(z) / lam * np.sqrt(np.where(inside, arg, 0))
    frac = (cycles - np.round(cycles)).astype(float)
    h = np.where(inside, np.exp(2j * np.pi * frac), 0.0)
    return TransferFunction(h, pitch, wavelength, z)


def _propagate_array(u: np.ndarray, h: np.ndarray) -> np.ndarray:
    return sfft.ifft2(sfft.fft2(u, norm="ortho") * h, norm="ortho")


def asm_propagate(u: ComplexField, tf: TransferFunction) -> ComplexField:
    if u.shape != tf.shape:
        raise WavefieldError(f"field shape {u.shape} does not match transfer function {tf.shape}")
    if not np.isclose(u.wavelength, tf.wavelength, rtol=1e-12, atol=0):
        raise WavefieldError("field and transfer function wavelengths differ")
    return ComplexField(_propagate_array(u.data, tf.h), u.pitch, u.wavelength)


# ---------------------------------------------------------------------------
# Zernike polynomials (Noll ordering, unit-RMS normalisation over the disk)


def noll_to_nm(j: int) -> tuple[int, int]:
    """Radial order n and signed azimuthal frequency m of Noll index j (j >= 1)."""
    if j < 1:
        raise WavefieldError("Noll indices start at 1")
    n = 0
    while (n + 1) * (n + 2) // 2 < j:
        n += 1
    k = j - n * (n + 1) // 2 - 1  # position within radial order n
    m_abs = n % 2 + 2 * ((k + (n + 1) % 2) // 2)
    if m_abs == 0:
        return n, 0
    return n, (m_abs if j % 2 == 0 else -m_abs)


def _radial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho)
    for s in range((n - m) // 2 + 1):
        c = (-1) ** s * factorial(n - s) / (factorial(s) * factorial((n + m) // 2 - s) * factorial((n - m) // 2 - s))
        out = out + c * rho ** (n - 2 * s)
    return out


def zernike(j: int, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    n, m = noll_to_nm(j)
    r = _radial(n, abs(m), rho)
    if m == 0:
        return np.sqrt(n + 1) * r
    ang = np.cos(m * theta) if m > 0 else np.sin(-m * theta)
    return np.sqrt(2 * (n + 1)) * r * ang


def zernike_phase(coeffs: Sequence[float], width: int, height: int) -> np.ndarray:
    """Phase map sum_j c_j Z_j over the circle circumscribing the grid.

    ``coeffs[0]`` multiplies Z_1 (piston). The unit radius reaches the corner
    pixel centres, so the whole rectangle lies inside the disk.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size > MAX_NOLL:
        raise WavefieldError(f"only the first {MAX_NOLL} Noll terms are implemented")
    y = np.arange(height) - (height - 1) / 2
    x = np.arange(width) - (width - 1) / 2
    xx, yy = np.meshgrid(x, y)
    radius = np.hypot((width - 1) / 2, (height - 1) / 2) or 1.0
    rho = np.hypot(xx, yy) / radius
    theta = np.arctan2(yy, xx)
    phase = np.zeros((height, width))
    for j, c in enumerate(coeffs, start=1):
        if c != 0:
            phase += c * zernike(j, rho, theta)
    return phase


# ---------------------------------------------------------------------------
# homography warp


def _normalize_homography(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=float).reshape(3, 3)
    if abs(np.linalg.det(m)) <= 1e-9:
        raise WavefieldError("homography is singular")
    if m[2, 2] == 0:
        raise WavefieldError("homography bottom-right entry must be nonzero")
    return m / m[2, 2]


def warp_matrix(matrix, height: int, width: int, kernel: str = "bilinear") -> sp.csr_matrix:
    """Sparse resampling operator for an inverse warp by ``matrix``.

    Output pixel p samples the source at H^-1 p (pixel coordinates, x along
    columns). Taps falling outside the source contribute zero.
    """
    m = _normalize_homography(matrix)
    inv = np.linalg.inv(m)
    yy, xx = np.mgrid[0:height, 0:width]
    pts = np.stack([xx.ravel(), yy.ravel(), np.ones(xx.size)]).astype(float)
    src = inv @ pts
    sx, sy = src[0] / src[2], src[1] / src[2]
    n = height * width
    rows_out = np.arange(n)
    if kernel == "nearest":
        ix, iy = np.rint(sx).astype(int), np.rint(sy).astype(int)
        ok = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        return sp.csr_matrix((np.ones(ok.sum()), (rows_out[ok], (iy * width + ix)[ok])), shape=(n, n))
    if kernel != "bilinear":
        raise WavefieldError(f"unknown interpolation kernel {kernel!r}")
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = sx - x0, sy - y0
    x0, y0 = x0.astype(int), y0.astype(int)
    rows, cols, vals = [], [], []
    for dx, dy, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        cx, cy = x0 + dx, y0 + dy
        ok = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height) & (w != 0)
        rows.append(rows_out[ok])
        cols.append((cy * width + cx)[ok])
        vals.append(w[ok])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def apply_homography(u: ComplexField, matrix, kernel: str = "bilinear") -> ComplexField:
    h, w = u.shape
    op = warp_matrix(matrix, h, w, kernel)
    return ComplexField((op @ u.data.ravel()).reshape(h, w), u.pitch, u.wavelength)


def synthetic_homography(rng: np.random.Generator, height: int, width: int, max_scale: float = 0.01,
                         max_shift: float = 2.0) -> np.ndarray:
    """Small affine distortion about the grid centre: scale 1 +- max_scale, shift <= max_shift px."""
    s = 1 + rng.uniform(-max_scale, max_scale, size=2)
    t = rng.uniform(-max_shift, max_shift, size=2)
    cx, cy = (width - 1) / 2, (height - 1) / 2
    return np.array(
        [[s[0], 0, cx - s[0] * cx + t[0]], [0, s[1], cy - s[1] * cy + t[1]], [0, 0, 1.0]]
    )


# ---------------------------------------------------------------------------
# full-colour forward model


@dataclass
class PropagationModel:
    """Per-channel optics: transfer functions, compensation phases and warps."""

    height: int
    width: int
    pitch: float = DEFAULT_PITCH
    z: float = DEFAULT_DISTANCE
    wavelengths: Sequence[float] = DEFAULT_WAVELENGTHS
    zernike: Optional[Sequence[Sequence[float]]] = None
    homographies: Optional[Sequence] = None
    kernel: str = "bilinear"
    _tf: list = field(init=False, repr=False)
    _comp: np.ndarray = field(init=False, repr=False)
    _warp: list = field(init=False, repr=False)

    def __post_init__(self):
        nch = len(self.wavelengths)
        self._tf = [build_transfer_function(self.width, self.height, self.pitch, wl, self.z).h for wl in self.wavelengths]
        coeffs = self.zernike if self.zernike is not None else [[]] * nch
        if len(coeffs) != nch:
            raise WavefieldError("need one Zernike coefficient list per channel")
        self._comp = np.stack([zernike_phase(c, self.width, self.height) for c in coeffs])
        homs = self.homographies if self.homographies is not None else [None] * nch
        if len(homs) != nch:
            raise WavefieldError("need one homography per channel")
        self._warp = [
            None if hm is None or np.allclose(_normalize_homography(hm), np.eye(3), rtol=0, atol=0)
            else warp_matrix(hm, self.height, self.width, self.kernel)
            for hm in homs
        ]

    @property
    def n_channels(self) -> int:
        return len(self.wavelengths)

    @property
    def compensation(self) -> np.ndarray:
        return self._comp

    def _check(self, phase: np.ndarray) -> np.ndarray:
        phase = np.asarray(phase, dtype=float)
        if phase.shape != (self.n_channels, self.height, self.width):
            raise WavefieldError(
                f"phase shape {phase.shape} != {(self.n_channels, self.height, self.width)}"
            )
        return phase

    def fields(self, phase: np.ndarray) -> np.ndarray:
        """Complex fields at the image plane, shape (C, H, W)."""
        phase = self._check(phase)
        out = np.empty(phase.shape, dtype=complex)
        for c in range(self.n_channels):
            v = _propagate_array(np.exp(1j * (phase[c] + self._comp[c])), self._tf[c])
            if self._warp[c] is not None:
                v = (self._warp[c] @ v.ravel()).reshape(v.shape)
            out[c] = v
        return out

    def intensity(self, phase: np.ndarray) -> np.ndarray:
        return np.abs(self.fields(phase)) ** 2

    def backprop_to_phase(self, phase: np.ndarray, upstream: np.ndarray, fields: Optional[np.ndarray] = None) -> np.ndarray:
        """Gradient w.r.t. phase of sum(upstream * intensity(phase)).

        ``fields`` may carry the forward result for ``phase`` to skip the
        recomputation.
        """
        phase = self._check(phase)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != phase.shape:
            raise WavefieldError(f"upstream gradient shape {upstream.shape} != {phase.shape}")
        if fields is None:
            fields = self.fields(phase)
        grad = np.empty(phase.shape)
        for c in range(self.n_channels):
            # dL/dconj(w) up to a factor: intensity |w|^2 contributes 2 g w
            gw = 2.0 * upstream[c] * fields[c]
            if self._warp[c] is not None:
                gw = (self._warp[c].T @ gw.ravel()).reshape(gw.shape)
            gu = sfft.ifft2(sfft.fft2(gw, norm="ortho") * np.conj(self._tf[c]), norm="ortho")
            u = np.exp(1j * (phase[c] + self._comp[c]))
            grad[c] = np.imag(gu * np.conj(u))
        return grad

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "pitch": self.pitch,
            "z": self.z,
            "wavelengths": list(self.wavelengths),
            "zernike": None if self.zernike is None else [list(map(float, c)) for c in self.zernike],
            "homographies": None if self.homographies is None
            else [None if h is None else [float(v) for v in np.asarray(h, float).ravel()] for h in self.homographies],
            "kernel": self.kernel,
        }

    @classmethod
    def from_json(cls, blob: dict) -> "PropagationModel":
        return cls(**blob)


def forward_model(phase, model: PropagationModel) -> np.ndarray:
    """Per-channel intensity |PT{F^-1{F{exp(j(phase + comp))} H}}|^2."""
    return model.intensity(phase)


def backprop_to_phase(phase, upstream, model: PropagationModel) -> np.ndarray:
    return model.backprop_to_phase(phase, upstream)


def wrap_phase(phase: np.ndarray) -> np.ndarray:
    return np.mod(phase, 2 * np.pi)


def phase_to_uint8(phase: np.ndarray) -> np.ndarray:
    """SLM drive levels: round(wrap(phase) / 2pi * 255)."""
    return np.rint(wrap_phase(phase) / (2 * np.pi) * 255).astype(np.uint8)


def load_optics_json(path) -> dict:
    """Homography/Zernike file: {"homographies": [[9 floats] x C], "zernike": [{"noll": [...], "coeffs": [...]}] }."""
    with open(path) as fh:
        blob = json.load(fh)
    out = {}
    if "homographies" in blob:
        out["homographies"] = [np.asarray(h, float).reshape(3, 3) for h in blob["homographies"]]
    if "zernike" in blob:
        zs = []
        for entry in blob["zernike"]:
            coeffs = np.zeros(max(entry["noll"]) if entry["noll"] else 0)
            for j, c in zip(entry["noll"], entry["coeffs"]):
                coeffs[j - 1] = c
            zs.append(coeffs)
        out["zernike"] = zs
    return out
