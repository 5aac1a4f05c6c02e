"""Colorimetry: spectra to XYZ, calibrated RGB spaces, CST, Lab, CIEDE2000 and
chroma-compressing gamut mapping.

Everything works on numpy arrays whose last axis holds the three channels.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DATA_PACKAGE = "holochroma.data"
CMF_ASSET = "cie1931_2deg_1nm.csv"

# (6/29)^3 cusp of the CIE Lab companding function
_LAB_EPS = (6.0 / 29.0) ** 3
_LAB_DELTA = 6.0 / 29.0

BRADFORD = np.array(
    [
        [0.8951, 0.2664, -0.1614],
        [-0.7502, 1.7135, 0.0367],
        [0.0389, -0.0685, 1.0296],
    ]
)


class ColorimetryError(ValueError):
    """Raised for invalid colorimetric inputs (empty spectra, singular primaries, ...)."""


# ---------------------------------------------------------------------------
# spectra and colour matching functions


@dataclass(frozen=True)
class Spectrum:
    wavelengths: np.ndarray
    power: np.ndarray
    delta: float = 0.0

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=float)
        p = np.asarray(self.power, dtype=float)
        if wl.shape != p.shape or wl.ndim != 1:
            raise ColorimetryError("wavelengths and power must be 1-D and of equal length")
        if wl.size and np.any(np.diff(wl) <= 0):
            raise ColorimetryError("wavelengths must be strictly increasing")
        if np.any(p < 0):
            raise ColorimetryError("spectral power must be nonnegative")
        delta = float(self.delta)
        if delta <= 0:
            if wl.size < 2:
                delta = 1.0
            else:
                steps = np.diff(wl)
                if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
                    raise ColorimetryError("non-uniform sampling needs an explicit delta")
                delta = float(steps[0])
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "power", p)
        object.__setattr__(self, "delta", delta)

    def __add__(self, other: "Spectrum") -> "Spectrum":
        if not np.array_equal(self.wavelengths, other.wavelengths):
            raise ColorimetryError("spectra sampled on different grids")
        return Spectrum(self.wavelengths, self.power + other.power, self.delta)

    def scaled(self, k: float) -> "Spectrum":
        return Spectrum(self.wavelengths, self.power * k, self.delta)

    @classmethod
    def delta_line(cls, wavelength: float, power: float = 1.0) -> "Spectrum":
        return cls(np.array([wavelength]), np.array([power]), 1.0)

    @classmethod
    def from_csv(cls, path) -> "Spectrum":
        rows = _read_csv(path, ("wavelength_nm", "power"))
        return cls(rows[:, 0], rows[:, 1])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("wavelength_nm,power\n")
            for w, p in zip(self.wavelengths, self.power):
                fh.write(f"{w:.10g},{p:.17g}\n")


@dataclass(frozen=True)
class CMFTable:
    wavelengths: np.ndarray
    values: np.ndarray  # (N, 3): xbar, ybar, zbar

    def __post_init__(self):
        if np.any(np.diff(self.wavelengths) <= 0):
            raise ColorimetryError("CMF wavelengths must be strictly increasing")
        if np.any(self.values < 0):
            raise ColorimetryError("CMF values must be nonnegative")

    @property
    def range(self) -> tuple[float, float]:
        return float(self.wavelengths[0]), float(self.wavelengths[-1])

    def __call__(self, wavelength) -> np.ndarray:
        """Linearly interpolated (xbar, ybar, zbar) at the given wavelength(s)."""
        wl = np.asarray(wavelength, dtype=float)
        lo, hi = self.range
        if np.any(wl < lo) or np.any(wl > hi):
            raise ColorimetryError(f"wavelength outside CMF coverage [{lo}, {hi}] nm")
        out = np.stack([np.interp(wl, self.wavelengths, self.values[:, i]) for i in range(3)], axis=-1)
        return out

    @classmethod
    def from_csv(cls, path) -> "CMFTable":
        rows = _read_csv(path, ("wavelength_nm", "xbar", "ybar", "zbar"))
        return cls(rows[:, 0], rows[:, 1:4])


def _read_csv(path, header: Sequence[str]) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = [h.strip() for h in next(reader)]
        if got != list(header):
            raise ColorimetryError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
        rows = [[float(v) for v in row] for row in reader if row]
    return np.array(rows, dtype=float).reshape(-1, len(header))


def _asset(name: str) -> Path:
    return Path(str(resources.files(DATA_PACKAGE).joinpath(name)))


@lru_cache(maxsize=None)
def cie1931() -> CMFTable:
    """The shipped CIE 1931 2 degree observer at 1 nm."""
    return CMFTable.from_csv(_asset(CMF_ASSET))


@lru_cache(maxsize=None)
def white_point(name: str) -> np.ndarray:
    """Named white point (``d65``/``d50``) as XYZ with Y = 1."""
    with open(_asset("whitepoints.json")) as fh:
        table = json.load(fh)
    try:
        xy = table[name.lower()]
    except KeyError:
        raise ColorimetryError(f"unknown white point {name!r}") from None
    return xy_to_xyz(xy["x"], xy["y"])


def laser_spectrum(channel: str) -> Spectrum:
    return Spectrum.from_csv(_asset(f"laser_{channel}.csv"))


def spd_to_xyz(spectrum: Spectrum, cmf: Optional[CMFTable] = None) -> np.ndarray:
    """Discrete tristimulus integral with k = 1."""
    cmf = cmf or cie1931()
    if spectrum.wavelengths.size == 0:
        raise ColorimetryError("empty spectrum")
    bars = cmf(spectrum.wavelengths)
    return (spectrum.power[:, None] * bars).sum(axis=0) * spectrum.delta


def chromaticity_of(xyz) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=float)
    total = xyz.sum(axis=-1)
    if np.any(total <= 0):
        raise ColorimetryError("chromaticity undefined for X+Y+Z <= 0")
    return xyz[..., :2] / total[..., None]


def xy_to_xyz(x: float, y: float, Y: float = 1.0) -> np.ndarray:
    return np.array([x * Y / y, Y, (1.0 - x - y) * Y / y])


# ---------------------------------------------------------------------------
# colour spaces


@dataclass(frozen=True)
class ColorSpace:
    name: str
    primaries_xyz: np.ndarray  # rows: r, g, b tristimulus
    white_point: Optional[np.ndarray]
    m_rgb_to_xyz: np.ndarray
    m_xyz_to_rgb: np.ndarray

    @property
    def is_xyz(self) -> bool:
        return self.white_point is None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "primaries": [list(map(float, p)) for p in self.primaries_xyz],
            "white": None if self.white_point is None else list(map(float, self.white_point)),
            "m_rgb_to_xyz": [float(v) for v in self.m_rgb_to_xyz.ravel()],
            "m_xyz_to_rgb": [float(v) for v in self.m_xyz_to_rgb.ravel()],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ColorSpace":
        with open(path) as fh:
            blob = json.load(fh)
        base = Path(path).parent
        prims = []
        for p in blob["primaries"]:
            if isinstance(p, str):  # SPD file reference
                prims.append(Spectrum.from_csv(base / p))
            else:
                prims.append(np.asarray(p, dtype=float))
        if blob.get("white") is None:
            return XYZ
        return build_color_space(prims, np.asarray(blob["white"], dtype=float), blob["name"])


def build_color_space(primaries, white, name: str, cmf: Optional[CMFTable] = None) -> ColorSpace:
    """Calibrated RGB space whose (1, 1, 1) maps onto ``white``."""
    if len(primaries) != 3:
        raise ColorimetryError("need exactly three primaries")
    prims = np.array(
        [spd_to_xyz(p, cmf) if isinstance(p, Spectrum) else np.asarray(p, dtype=float) for p in primaries]
    )
    white = np.asarray(white, dtype=float)
    m = prims.T
    if abs(np.linalg.det(m)) <= 1e-9:
        raise ColorimetryError(f"{name}: primaries are linearly dependent")
    scale = np.linalg.solve(m, white)
    if np.any(scale <= 0):
        raise ColorimetryError(f"{name}: white point lies outside the primaries' gamut")
    rgb_to_xyz = m * scale[None, :]
    return ColorSpace(name, prims, white, rgb_to_xyz, np.linalg.inv(rgb_to_xyz))


def space_from_chromaticities(name: str, xy_primaries, white) -> ColorSpace:
    prims = [xy_to_xyz(x, y) for x, y in xy_primaries]
    return build_color_space(prims, white, name)


XYZ = ColorSpace("XYZ", np.eye(3), None, np.eye(3), np.eye(3))


@lru_cache(maxsize=None)
def srgb() -> ColorSpace:
    return space_from_chromaticities(
        "sRGB", [(0.64, 0.33), (0.30, 0.60), (0.15, 0.06)], white_point("d65")
    )


@lru_cache(maxsize=None)
def prophoto() -> ColorSpace:
    return space_from_chromaticities(
        "ProPhoto", [(0.7347, 0.2653), (0.1596, 0.8404), (0.0366, 0.0001)], white_point("d50")
    )


@lru_cache(maxsize=None)
def holo(cmf: Optional[CMFTable] = None) -> ColorSpace:
    """Laser-native space: shipped 636/512/453 nm line spectra, D65 white."""
    prims = [laser_spectrum(c) for c in "rgb"]
    return build_color_space(prims, white_point("d65"), "Holo", cmf)


def named_space(name: str) -> ColorSpace:
    spaces = {"srgb": srgb, "prophoto": prophoto, "holo": holo, "xyz": lambda: XYZ}
    try:
        return spaces[name.lower()]()
    except KeyError:
        raise ColorimetryError(f"unknown colour space {name!r}") from None


def adaptation_matrix(src_white, dst_white, method: str = "bradford") -> np.ndarray:
    if method == "none":
        return np.eye(3)
    if method != "bradford":
        raise ColorimetryError(f"unknown chromatic adaptation {method!r}")
    rho_s = BRADFORD @ np.asarray(src_white, dtype=float)
    rho_d = BRADFORD @ np.asarray(dst_white, dtype=float)
    return np.linalg.solve(BRADFORD, np.diag(rho_d / rho_s) @ BRADFORD)


def cst_matrix(src: ColorSpace, dst: ColorSpace, adaptation: str = "bradford") -> np.ndarray:
    a = np.eye(3)
    if not (src.is_xyz or dst.is_xyz) and not np.array_equal(src.white_point, dst.white_point):
        a = adaptation_matrix(src.white_point, dst.white_point, adaptation)
    return dst.m_xyz_to_rgb @ a @ src.m_rgb_to_xyz


@dataclass
class LinearImage:
    """Linear pixel data tagged with the colour space it is expressed in."""

    data: np.ndarray
    space: str

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[-1] != 3 or 0 in self.data.shape:
            raise ColorimetryError("LinearImage needs shape (H, W, 3) with H, W > 0")
        if not np.all(np.isfinite(self.data)):
            raise ColorimetryError("LinearImage values must be finite")


def cst(img, src: ColorSpace, dst: ColorSpace, adaptation: str = "bradford"):
    """Linear colour-space transform. No clipping; see :func:`gamut_map_chroma`."""
    if isinstance(img, LinearImage):
        if img.space != src.name:
            raise ColorimetryError(f"image tagged {img.space!r} but source space is {src.name!r}")
        return LinearImage(cst(img.data, src, dst, adaptation), dst.name)
    img = np.asarray(img, dtype=float)
    if src is dst:
        return img.copy()
    return img @ cst_matrix(src, dst, adaptation).T


# ---------------------------------------------------------------------------
# CIE Lab / LCh


def _f(t):
    return np.where(t > _LAB_EPS, np.cbrt(t), t / (3 * _LAB_DELTA**2) + 4.0 / 29.0)


def _finv(u):
    return np.where(u > _LAB_DELTA, u**3, 3 * _LAB_DELTA**2 * (u - 4.0 / 29.0))


def _check_white(white) -> np.ndarray:
    white = np.asarray(white, dtype=float)
    if np.any(white <= 0):
        raise ColorimetryError("reference white components must be positive")
    return white


def xyz_to_lab(xyz, white) -> np.ndarray:
    white = _check_white(white)
    fx, fy, fz = (_f(np.asarray(xyz, dtype=float) / white)[..., i] for i in range(3))
    return np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)


def lab_to_xyz(lab, white) -> np.ndarray:
    white = _check_white(white)
    lab = np.asarray(lab, dtype=float)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    return np.stack([_finv(fx), _finv(fy), _finv(fz)], axis=-1) * white


def lab_to_lch(lab) -> np.ndarray:
    lab = np.asarray(lab, dtype=float)
    c = np.hypot(lab[..., 1], lab[..., 2])
    h = np.mod(np.arctan2(lab[..., 2], lab[..., 1]), 2 * np.pi)
    return np.stack([lab[..., 0], c, h], axis=-1)


def lch_to_lab(lch) -> np.ndarray:
    lch = np.asarray(lch, dtype=float)
    return np.stack([lch[..., 0], lch[..., 1] * np.cos(lch[..., 2]), lch[..., 1] * np.sin(lch[..., 2])], axis=-1)


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float
    white: tuple = field(default_factory=lambda: tuple(white_point("d65")))

    @classmethod
    def from_xyz(cls, xyz, white) -> "LabColor":
        L, a, b = xyz_to_lab(xyz, white)
        return cls(float(L), float(a), float(b), tuple(map(float, white)))

    def to_xyz(self) -> np.ndarray:
        return lab_to_xyz([self.L, self.a, self.b], self.white)

    def __array__(self, dtype=None, copy=None):
        return np.array([self.L, self.a, self.b], dtype=dtype)


def _as_lab_pair(a, b):
    if isinstance(a, LabColor) and isinstance(b, LabColor):
        if not np.allclose(a.white, b.white, rtol=0, atol=1e-12):
            raise ColorimetryError("Lab colours computed against different reference whites")
    return np.asarray(a, dtype=float), np.asarray(b, dtype=float)


def delta_e_76(lab1, lab2) -> np.ndarray:
    lab1, lab2 = _as_lab_pair(lab1, lab2)
    return np.linalg.norm(lab1 - lab2, axis=-1)


def delta_e_2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """CIEDE2000 colour difference, vectorised over leading axes."""
    lab1, lab2 = _as_lab_pair(lab1, lab2)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c_bar = 0.5 * (np.hypot(a1, b1) + np.hypot(a2, b2))
    c7 = c_bar**7
    g = 0.5 * (1 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.mod(np.degrees(np.arctan2(b1, a1p)), 360.0)
    h2p = np.mod(np.degrees(np.arctan2(b2, a2p)), 360.0)

    dLp = L2 - L1
    dCp = c2p - c1p
    cprod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(cprod == 0, 0.0, dh)
    dHp = 2 * np.sqrt(cprod) * np.sin(np.radians(dh) / 2)

    L_bar = 0.5 * (L1 + L2)
    cp_bar = 0.5 * (c1p + c2p)
    hsum = h1p + h2p
    h_bar = np.where(
        np.abs(h1p - h2p) <= 180, hsum / 2, np.where(hsum < 360, (hsum + 360) / 2, (hsum - 360) / 2)
    )
    h_bar = np.where(cprod == 0, hsum, h_bar)

    t = (
        1
        - 0.17 * np.cos(np.radians(h_bar - 30))
        + 0.24 * np.cos(np.radians(2 * h_bar))
        + 0.32 * np.cos(np.radians(3 * h_bar + 6))
        - 0.20 * np.cos(np.radians(4 * h_bar - 63))
    )
    d_theta = 30 * np.exp(-(((h_bar - 275) / 25) ** 2))
    cp7 = cp_bar**7
    r_c = 2 * np.sqrt(cp7 / (cp7 + 25.0**7))
    s_l = 1 + 0.015 * (L_bar - 50) ** 2 / np.sqrt(20 + (L_bar - 50) ** 2)
    s_c = 1 + 0.045 * cp_bar
    s_h = 1 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2 * d_theta)) * r_c

    tl, tc, th = dLp / (kL * s_l), dCp / (kC * s_c), dHp / (kH * s_h)
    return np.sqrt(tl**2 + tc**2 + th**2 + r_t * tc * th)


def delta_e(lab1, lab2, method: str = "ciede2000"):
    if method == "ciede2000":
        return delta_e_2000(lab1, lab2)
    if method == "cie76":
        return delta_e_76(lab1, lab2)
    raise ColorimetryError(f"unknown delta E method {method!r}")


# ---------------------------------------------------------------------------
# transfer functions


def linearize(img, encoding: str) -> np.ndarray:
    """Decode display-encoded values in [0, 1] to linear light."""
    v = np.asarray(img, dtype=float)
    if encoding == "linear":
        return v.copy()
    if encoding == "srgb":
        return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    if encoding == "prophoto":
        return np.where(v < 16.0 / 512.0, v / 16.0, np.abs(v) ** 1.8)
    raise ColorimetryError(f"unknown encoding {encoding!r}")


def encode(img, encoding: str) -> np.ndarray:
    v = np.asarray(img, dtype=float)
    if encoding == "linear":
        return v.copy()
    if encoding == "srgb":
        return np.where(v <= 0.0031308, 12.92 * v, 1.055 * np.abs(v) ** (1 / 2.4) - 0.055)
    if encoding == "prophoto":
        return np.where(v < 1.0 / 512.0, 16.0 * v, np.abs(v) ** (1 / 1.8))
    raise ColorimetryError(f"unknown encoding {encoding!r}")


# ---------------------------------------------------------------------------
# gamut mapping


def _out_of_gamut(lch, dst: ColorSpace, tol: float) -> np.ndarray:
    rgb = lab_to_xyz(lch_to_lab(lch), dst.white_point) @ dst.m_xyz_to_rgb.T
    return np.any((rgb < -tol) | (rgb > 1 + tol), axis=-1)


def boundary_chroma(L, h, c_max, dst: ColorSpace, steps: int = 64, tol: float = 1e-6, gamut_tol: float = 1e-12):
    """First chroma at which the constant-(L, h) ray leaves ``dst``'s RGB cube.

    The ray is marched from the achromatic axis up to ``c_max`` and the first
    crossing is refined by bisection. Returns ``inf`` where no crossing occurs.
    """
    L = np.asarray(L, dtype=float)
    h = np.asarray(h, dtype=float)
    c_max = np.asarray(c_max, dtype=float)
    n = L.size
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    prev = np.zeros(n)
    for k in range(1, steps + 1):
        c = c_max * (k / steps)
        out = _out_of_gamut(np.stack([L, c, h], axis=-1), dst, gamut_tol) & ~found
        lo = np.where(out, prev, lo)
        hi = np.where(out, c, hi)
        found |= out
        prev = c
        if found.all():
            break
    idx = np.flatnonzero(found)
    a, b = lo[idx], hi[idx]
    while idx.size and np.max(b - a) > tol:
        mid = 0.5 * (a + b)
        out = _out_of_gamut(np.stack([L[idx], mid, h[idx]], axis=-1), dst, gamut_tol)
        b = np.where(out, mid, b)
        a = np.where(out, a, mid)
    result = np.full(n, np.inf)
    result[idx] = a  # last in-gamut chroma
    return result


def compress_chroma(c, c_boundary, knee: float = 0.8, strength: float = 1.0):
    """tanh roll-off of chroma above ``knee * c_boundary``, asymptotic to ``c_boundary``."""
    c = np.asarray(c, dtype=float)
    start = knee * c_boundary
    span = c_boundary - start
    with np.errstate(invalid="ignore", divide="ignore"):
        rolled = start + span * np.tanh(strength * (c - start) / span)
    rolled = np.where(span > 0, rolled, c_boundary)
    return np.where(c > start, rolled, c)


def gamut_map_chroma(img, dst: ColorSpace, knee: float = 0.8, strength: float = 1.0, input_space: str = "xyz"):
    """Map XYZ (or Lab, ``input_space='lab'``) pixels into ``dst`` RGB.

    Lightness and hue are held fixed. Pixels whose chroma lies beyond the
    first exit of the constant-(L, h) ray from the destination cube are pulled
    inside with :func:`compress_chroma`; everything already inside the cube
    along its ray passes through untouched, which keeps the map idempotent.
    """
    if not 0 < knee < 1:
        raise ColorimetryError("knee must lie in (0, 1)")
    if strength <= 0:
        raise ColorimetryError("strength must be positive")
    if isinstance(img, LinearImage):
        img = img.data
    arr = np.asarray(img, dtype=float)
    shape = arr.shape
    flat = arr.reshape(-1, 3)
    lab = flat if input_space == "lab" else xyz_to_lab(flat, dst.white_point)
    lch = lab_to_lch(lab)
    L = lch[:, 0]
    if np.any(L < -1e-6) or np.any(L > 100 + 1e-6):
        raise ColorimetryError("pixel lightness outside [0, 100]")
    L = np.clip(L, 0.0, 100.0)
    lch[:, 0] = L
    rgb = lab_to_xyz(lch_to_lab(lch), dst.white_point) @ dst.m_xyz_to_rgb.T

    candidates = np.flatnonzero(lch[:, 1] > 0)
    if candidates.size:
        sub = lch[candidates]
        cb = boundary_chroma(sub[:, 0], sub[:, 2], sub[:, 1], dst)
        beyond = sub[:, 1] > cb
        if beyond.any():
            sel = candidates[beyond]
            new = lch[sel].copy()
            new[:, 1] = compress_chroma(new[:, 1], cb[beyond], knee, strength)
            rgb[sel] = lab_to_xyz(lch_to_lab(new), dst.white_point) @ dst.m_xyz_to_rgb.T
    return np.clip(rgb, 0.0, 1.0).reshape(shape)
