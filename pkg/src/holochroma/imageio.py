"""PFM (bit-exact float) and PNG (8/16-bit) image files."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian float32 PFM, rows stored bottom-up per the format."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim == 2:
        kind = b"Pf"
    elif img.ndim == 3 and img.shape[-1] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3); got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * chans)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def read_image(path) -> np.ndarray:
    """Float image in [0, 1] (PNG/TIFF/...) or raw floats (PFM), always (H, W, 3)."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path).astype(float)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im)
        if arr.dtype == np.uint8:
            img = arr / 255.0
        elif arr.dtype in (np.uint16, np.int32) or arr.max() > 255:
            img = arr / 65535.0
        else:
            img = arr.astype(float)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    return img[..., :3].astype(float)


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    """Quantise values in [0, 1] to an 8- or 16-bit PNG."""
    v = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.rint(v * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        if v.ndim != 2:
            raise ValueError("16-bit PNG export supports single-channel images only")
        Image.fromarray(np.rint(v * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


