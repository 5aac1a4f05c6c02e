"""Regenerate the CSV/JSON assets shipped in ``src/holochroma/data``.

Needs ``colour-science`` for the tabulated CIE 1931 2 degree observer; the
package itself only reads the CSVs written here.

    python scripts/make_data_assets.py
"""
import json
from pathlib import Path

import numpy as np

DATA = Path(__file__).resolve().parents[1] / "src" / "holochroma" / "data"

# nominal laser lines and a 2 nm FWHM gaussian line shape
LASERS = {"r": 636.0, "g": 512.0, "b": 453.0}
FWHM_NM = 2.0
STEP_NM = 0.5


def write_cmf():
    import colour

    cmfs = colour.MSDS_CMFS["CIE 1931 2 Degree Standard Observer"]
    with open(DATA / "cie1931_2deg_1nm.csv", "w") as fh:
        fh.write("wavelength_nm,xbar,ybar,zbar\n")
        for wl, row in zip(cmfs.wavelengths, cmfs.values):
            fh.write(f"{wl:.0f},{row[0]:.8g},{row[1]:.8g},{row[2]:.8g}\n")


def write_lasers():
    sigma = FWHM_NM / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    for name, center in LASERS.items():
        wl = np.arange(center - 6.0, center + 6.0 + STEP_NM / 2, STEP_NM)
        power = np.exp(-0.5 * ((wl - center) / sigma) ** 2)
        with open(DATA / f"laser_{name}.csv", "w") as fh:
            fh.write("wavelength_nm,power\n")
            for w, p in zip(wl, power):
                fh.write(f"{w:.2f},{p:.10g}\n")


def write_whitepoints():
    # CIE 1931 2 degree chromaticities
    white = {"d65": [0.3127, 0.3290], "d50": [0.3457, 0.3585]}
    with open(DATA / "whitepoints.json", "w") as fh:
        json.dump({k: {"x": v[0], "y": v[1]} for k, v in white.items()}, fh, indent=2)


if __name__ == "__main__":
    DATA.mkdir(parents=True, exist_ok=True)
    write_cmf()
    write_lasers()
    write_whitepoints()
