"""Scene cube container and its on-disk exchange format.

A scene is a YAML manifest next to flat little-endian float64 arrays stored
row-major (C order)::

    rows: 47            # scanlines
    cols: 41            # ground pixels
    bands: 497
    band_range: [300.0, 332.0]
    arrays:
      wavelengths: wavelengths.f64     # (bands,)
      radiance: radiance.f64           # (rows, cols, bands)
      irradiance: irradiance.f64       # (bands,)
      solar_zenith: solar_zenith.f64   # (rows, cols), degrees
      latitude: latitude.f64           # (rows, cols)
      longitude: longitude.f64         # (rows, cols)
      mask: mask.f64                   # optional (rows, cols); 1 valid, 0 no-data
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from ..speclib import WavelengthGrid

logger = logging.getLogger(__name__)

ARRAY_SHAPES = {
    "wavelengths": ("bands",),
    "radiance": ("rows", "cols", "bands"),
    "irradiance": ("bands",),
    "solar_zenith": ("rows", "cols"),
    "latitude": ("rows", "cols"),
    "longitude": ("rows", "cols"),
    "mask": ("rows", "cols"),
}
REQUIRED = ("wavelengths", "radiance", "irradiance", "solar_zenith", "latitude", "longitude")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneCube:
    """Gridded radiance observations; ``valid`` is True where a pixel holds data."""

    grid: WavelengthGrid
    radiance: np.ndarray
    irradiance: np.ndarray
    solar_zenith: np.ndarray
    latitude: np.ndarray
    longitude: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        rows, cols = self.solar_zenith.shape
        L = self.grid.count
        checks = {
            "radiance": (self.radiance.shape, (rows, cols, L)),
            "irradiance": (self.irradiance.shape, (L,)),
            "latitude": (self.latitude.shape, (rows, cols)),
            "longitude": (self.longitude.shape, (rows, cols)),
            "valid": (self.valid.shape, (rows, cols)),
        }
        for name, (got, want) in checks.items():
            if got != want:
                raise SceneError(f"{name} has shape {got}, expected {want}")

    @property
    def rows(self) -> int:
        return self.solar_zenith.shape[0]

    @property
    def cols(self) -> int:
        return self.solar_zenith.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.solar_zenith.shape

    def subset(self, rows: slice, cols: slice) -> "SceneCube":
        return replace(
            self,
            radiance=self.radiance[rows, cols],
            solar_zenith=self.solar_zenith[rows, cols],
            latitude=self.latitude[rows, cols],
            longitude=self.longitude[rows, cols],
            valid=self.valid[rows, cols],
        )


def physical_validity(radiance: np.ndarray, irradiance: np.ndarray, solar_zenith: np.ndarray) -> np.ndarray:
    """Pixels whose spectra admit an optical depth."""
    ok = np.all(np.isfinite(radiance) & (radiance > 0), axis=-1)
    ok &= bool(np.all(np.isfinite(irradiance) & (irradiance > 0)))
    ok &= np.isfinite(solar_zenith) & (solar_zenith >= 0) & (solar_zenith < 90)
    return ok


def make_scene(wavelengths, radiance, irradiance, solar_zenith, latitude=None, longitude=None,
               valid=None) -> SceneCube:
    """Assemble a SceneCube, masking physically unusable pixels."""
    radiance = np.asarray(radiance, dtype=float)
    sza = np.asarray(solar_zenith, dtype=float)
    irr = np.asarray(irradiance, dtype=float)
    shape = sza.shape
    lat = np.zeros(shape) if latitude is None else np.asarray(latitude, dtype=float)
    lon = np.zeros(shape) if longitude is None else np.asarray(longitude, dtype=float)
    ok = np.ones(shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if radiance.shape[:2] == shape and irr.ndim == 1 and radiance.shape[-1] == irr.size:
        ok = ok & physical_validity(radiance, irr, sza)
    return SceneCube(WavelengthGrid(np.asarray(wavelengths, dtype=float)), radiance, irr, sza, lat, lon, ok)


def _read_array(base: Path, name: str, fname: str, shape: tuple[int, ...]) -> np.ndarray:
    path = base / fname
    if not path.exists():
        raise SceneError(f"array '{name}' not found at {path}")
    data = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise SceneError(f"array '{name}' holds {data.size} values, expected {expected} for shape {shape}")
    return data.reshape(shape).astype(float)


def load_scene(path) -> SceneCube:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise SceneError(f"cannot parse scene manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SceneError(f"scene manifest {path} must be a mapping")
    dims = {}
    for key in ("rows", "cols", "bands"):
        if key not in doc:
            raise SceneError(f"scene manifest is missing '{key}'")
        try:
            dims[key] = int(doc[key])
        except (TypeError, ValueError):
            raise SceneError(f"scene manifest field '{key}' must be an integer") from None
        if dims[key] < 1:
            raise SceneError(f"scene manifest field '{key}' must be positive")
    arrays = doc.get("arrays")
    if not isinstance(arrays, dict):
        raise SceneError("scene manifest is missing the 'arrays' mapping")
    for name in REQUIRED:
        if name not in arrays:
            raise SceneError(f"scene manifest does not name array '{name}'")

    data = {}
    for name, fname in arrays.items():
        if name not in ARRAY_SHAPES:
            raise SceneError(f"unknown scene array '{name}'")
        shape = tuple(dims[d] for d in ARRAY_SHAPES[name])
        data[name] = _read_array(path.parent, name, str(fname), shape)

    valid = data["mask"] != 0 if "mask" in data else None
    scene = make_scene(data["wavelengths"], data["radiance"], data["irradiance"], data["solar_zenith"],
                       data["latitude"], data["longitude"], valid)
    n_bad = int((~scene.valid).sum())
    if n_bad:
        logger.info("scene %s: %d of %d pixels masked", path.name, n_bad, scene.valid.size)
    return scene


def save_scene(scene: SceneCube, directory, name: str = "scene") -> Path:
    """Write ``scene`` as manifest + flat arrays; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "wavelengths": scene.grid.values,
        "radiance": scene.radiance,
        "irradiance": scene.irradiance,
        "solar_zenith": scene.solar_zenith,
        "latitude": scene.latitude,
        "longitude": scene.longitude,
        "mask": scene.valid.astype(float),
    }
    names = {}
    for key, arr in arrays.items():
        fname = f"{name}_{key}.f64"
        np.ascontiguousarray(arr, dtype="<f8").tofile(directory / fname)
        names[key] = fname
    doc = {
        "rows": scene.rows,
        "cols": scene.cols,
        "bands": scene.grid.count,
        "band_range": [float(scene.grid.values[0]), float(scene.grid.values[-1])],
        "arrays": names,
    }
    manifest = directory / f"{name}.yaml"
    manifest.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
    return manifest


def clip_band(scene: SceneCube, lo_nm: float, hi_nm: float) -> SceneCube:
    """Keep only wavelengths in [lo_nm, hi_nm]."""
    if not lo_nm < hi_nm:
        raise SceneError(f"empty band: {lo_nm} >= {hi_nm}")
    wl = scene.grid.values
    keep = (wl >= lo_nm) & (wl <= hi_nm)
    if keep.sum() < 2:
        raise SceneError(f"band {lo_nm}-{hi_nm} nm holds {int(keep.sum())} sample(s); need at least 2")
    return replace(
        scene,
        grid=WavelengthGrid(wl[keep]),
        radiance=scene.radiance[..., keep],
        irradiance=scene.irradiance[keep],
    )
