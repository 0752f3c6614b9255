#!/usr/bin/env python3
"""Generate the synthetic UV cross-section set shipped in slimtrace/data/xsec.

The files imitate the behaviour of Atlas-style UV absorption cross sections:
a continuum envelope, a vibrational band comb whose position, width and
hot-band strength vary with temperature, and rotational fine structure with
Boltzmann-weighted line strengths. Each record is then "measured" by its own
source: a Gaussian instrument function, a wavelength calibration offset and
multiplicative measurement noise. They are stand-ins; magnitudes are
plausible, the structure is not measured data.

    python tools/make_synthetic_atlas.py [outdir]
"""

from __future__ import annotations

import sys
import zlib
from pathlib import Path

import numpy as np
import yaml

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from slimtrace.speclib import CrossSectionRecord, write_cross_section  # noqa: E402

WL = np.round(np.arange(265.0, 340.0 + 1e-9, 0.02), 2)
FINE = np.arange(263.0, 342.0, 0.004)
C2 = 1.4388  # second radiation constant, cm K

# envelope: log10 sigma at 265 nm and 340 nm with a gaussian bump (center, width, gain)
# bands: spacing nm, origin nm, modulation depth, width nm at 295 K, shift nm per 100 K
# lines: rotational lines per nm, fine-structure modulation depth
SPECIES = {
    "H2O2": dict(log_ends=(-19.6, -21.0), bump=(250.0, 30.0, 0.2),
                 bands=(5.3, 241.1, 0.18, 1.6, 0.30), lines=(6, 0.25), temps=[298.0]),
    "H2S": dict(log_ends=(-19.8, -22.3), bump=(255.0, 25.0, 0.3),
                bands=(3.7, 240.6, 0.35, 1.1, 0.45), lines=(8, 0.35), temps=[294.8, 423.2, 573.2]),
    "N2O": dict(log_ends=(-21.9, -23.8), bump=(245.0, 20.0, 0.4),
                bands=(4.4, 242.3, 0.30, 1.3, 0.40), lines=(8, 0.35), temps=[294.0, 298.0, 1428.0]),
    "NO2": dict(log_ends=(-19.3, -18.8), bump=(330.0, 60.0, 0.1),
                bands=(1.9, 240.2, 0.40, 0.55, 0.25), lines=(14, 0.45), temps=[220.0, 223.0, 233.0, 265.0, 293.0, 298.0, 300.0]),
    "O2": dict(log_ends=(-23.3, -24.3), bump=(250.0, 15.0, 0.6),
               bands=(3.1, 241.7, 0.55, 0.8, 0.35), lines=(10, 0.5), temps=[203.0, 243.0, 293.0]),
    "O3": dict(log_ends=(-17.9, -20.3), bump=(255.0, 18.0, 0.75),
               bands=(3.4, 240.9, 0.30, 1.0, 0.50), lines=(10, 0.3), temps=[228.0, 243.0, 273.0, 293.0, 298.0, 300.0, 720.0]),
    "SO2": dict(log_ends=(-18.3, -20.2), bump=(290.0, 14.0, 0.45),
                bands=(2.45, 240.4, 0.60, 0.7, 0.35), lines=(14, 0.5), temps=[203.0, 293.0, 296.0, 298.0]),
}

# second H2O2 measurement at 298 K (different source) completes the 29-column set
EXTRA = [("H2O2", 298.0, "synthetic-H2O2-298K-b")]


def _rng(key: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(key.encode()))


def _gauss_kernel(fwhm: float, step: float) -> np.ndarray:
    sig = fwhm / 2.3548 / step
    half = max(int(np.ceil(4 * sig)), 1)
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sig) ** 2)
    return k / k.sum()


def true_cross_section(name: str, temperature: float) -> np.ndarray:
    """Cross section on the internal FINE grid, before any source effects."""
    p = SPECIES[name]
    lo, hi = p["log_ends"]
    log_env = lo + (hi - lo) * (FINE - 265.0) / 75.0
    c, w, g = p["bump"]
    log_env = log_env + g * np.exp(-0.5 * ((FINE - c) / w) ** 2)
    env = 10.0 ** log_env

    spacing, origin, depth, width, shift = p["bands"]
    t_rel = temperature / 295.0
    centers = origin + spacing * np.arange(-2, int((FINE[-1] - origin) / spacing) + 3)
    centers = centers + shift * (temperature - 295.0) / 100.0
    sig = width * np.sqrt(t_rel)
    # hot bands: red-side bands gain strength with temperature
    hot = np.exp(-np.clip(centers - 300.0, 0, None) / (25.0 * t_rel))
    comb = np.zeros_like(FINE)
    for k, (c0, a0) in enumerate(zip(centers, hot)):
        amp = a0 * (1.0 + 0.25 * np.cos(1.7 * k))
        comb += amp * np.exp(-0.5 * ((FINE - c0) / sig) ** 2)
    comb /= comb.max()
    base = env * (1.0 - depth + depth * 2.0 * comb)

    density, fdepth = p["lines"]
    rng = _rng(name)
    n = int(density * (FINE[-1] - FINE[0]))
    pos = np.sort(rng.uniform(FINE[0], FINE[-1], n))
    strength = rng.lognormal(0.0, 0.8, n)
    e_low = rng.uniform(0.0, 2500.0, n)
    s_t = strength * (296.0 / temperature) ** 1.5 * np.exp(-C2 * e_low * (1.0 / temperature - 1.0 / 296.0))
    hw = 0.012 * np.sqrt(t_rel)
    fine = np.zeros_like(FINE)
    step = FINE[1] - FINE[0]
    span = int(np.ceil(5 * hw / step))
    for x0, a in zip(pos, s_t):
        i0 = int((x0 - FINE[0]) / step)
        sl = slice(max(i0 - span, 0), min(i0 + span + 1, FINE.size))
        fine[sl] += a * np.exp(-0.5 * ((FINE[sl] - x0) / hw) ** 2)
    fine /= fine.mean()
    return base * (1.0 - fdepth + fdepth * fine)


def measured_cross_section(name: str, temperature: float, source: str) -> np.ndarray:
    """Apply the source's instrument function, calibration offset and noise."""
    rng = _rng(source)
    fwhm = rng.uniform(0.01, 0.12)
    offset = rng.uniform(-0.03, 0.03)
    sigma = true_cross_section(name, temperature)
    smooth = np.convolve(sigma, _gauss_kernel(fwhm, FINE[1] - FINE[0]), mode="same")
    vals = np.interp(WL + offset, FINE, smooth)
    vals *= 1.0 + 0.01 * rng.standard_normal(WL.size)
    return np.clip(vals, 0.0, None)


def main(outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    jobs = [(s, t, f"synthetic-{s}-{t:g}K") for s, p in SPECIES.items() for t in p["temps"]] + EXTRA
    for species, temp, source in jobs:
        vals = measured_cross_section(species, temp, source)
        # 4 significant digits, like typical tabulated cross sections
        vals = np.array([float(f"{v:.4e}") for v in vals])
        rec = CrossSectionRecord(species, temp, WL, vals, source)
        fname = f"{species.lower()}_{temp:g}K{'_b' if source.endswith('-b') else ''}.txt"
        write_cross_section(rec, outdir / fname, header="synthetic cross section generated by tools/make_synthetic_atlas.py")
        entries.append({"species": species, "temperature": temp, "file": fname, "source_id": source})

    manifest = {
        "grid": {"start": 270.0, "stop": 315.0, "count": 10},
        "detrend": {"window": 5, "order": 2, "enabled": False},
        "entries": entries,
    }
    (outdir / "library.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    print(f"wrote {len(entries)} cross sections to {outdir}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "src" / "slimtrace" / "data" / "xsec")
