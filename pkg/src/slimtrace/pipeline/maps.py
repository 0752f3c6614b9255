"""Per-species column maps: storage, comparison and rendering."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from ..simkit import DOBSON_UNIT, rmse_du

NODATA_RGB = (255, 0, 255)


@dataclass(frozen=True)
class ConcentrationMap:
    """Column amounts in molecules/cm^2; ``valid`` is False on no-data pixels."""

    species: str
    values: np.ndarray
    valid: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        m = np.asarray(self.valid, dtype=bool)
        if v.ndim != 2 or v.shape != m.shape:
            raise ValueError(f"values {v.shape} and mask {m.shape} must be equal 2-D shapes")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "valid", m)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def in_du(self) -> np.ndarray:
        out = self.values / DOBSON_UNIT
        return np.where(self.valid, out, np.nan)

    def save(self, path) -> Path:
        """Write ``<path>.yaml`` plus a flat little-endian float64 array."""
        path = Path(path)
        stem = path.with_suffix("")
        data_file = stem.with_name(stem.name + "_values.f64")
        mask_file = stem.with_name(stem.name + "_mask.f64")
        np.ascontiguousarray(self.values, dtype="<f8").tofile(data_file)
        np.ascontiguousarray(self.valid, dtype="<f8").tofile(mask_file)
        doc = {
            "species": self.species,
            "rows": self.rows,
            "cols": self.cols,
            "units": "molecules/cm^2",
            "values": data_file.name,
            "mask": mask_file.name,
            "metadata": _plain(self.metadata),
        }
        manifest = stem.with_suffix(".yaml")
        manifest.write_text(yaml.safe_dump(doc, sort_keys=False), encoding="utf-8")
        return manifest

    @classmethod
    def load(cls, path) -> "ConcentrationMap":
        path = Path(path)
        if path.suffix.lower() == ".csv":
            return cls.load_csv(path)
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        shape = (int(doc["rows"]), int(doc["cols"]))
        values = np.fromfile(path.parent / doc["values"], dtype="<f8").reshape(shape)
        mask = np.fromfile(path.parent / doc["mask"], dtype="<f8").reshape(shape) != 0
        return cls(doc["species"], values, mask, doc.get("metadata") or {})

    def save_csv(self, path) -> None:
        """Long-format CSV: row, col, value (empty for no-data)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", f"{self.species}_molecules_cm2"])
            for (r, c), v in np.ndenumerate(self.values):
                w.writerow([r, c, repr(float(v)) if self.valid[r, c] else ""])

    @classmethod
    def load_csv(cls, path) -> "ConcentrationMap":
        with open(path, newline="", encoding="utf-8") as fh:
            rdr = csv.reader(fh)
            header = next(rdr)
            rows = [(int(r), int(c), v) for r, c, v in rdr]
        nr = max(r for r, _, _ in rows) + 1
        nc = max(c for _, c, _ in rows) + 1
        values = np.zeros((nr, nc))
        valid = np.zeros((nr, nc), dtype=bool)
        for r, c, v in rows:
            if v != "":
                values[r, c] = float(v)
                valid[r, c] = True
        return cls(header[2].split("_")[0], values, valid)


def _plain(obj):
    # yaml.safe_dump only takes builtin types
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class MapComparison:
    rmse: float
    rmse_du: float
    bias: float
    bias_du: float
    n_valid: int

    def to_dict(self) -> dict:
        return {
            "rmse_molecules_cm2": self.rmse,
            "rmse_du": self.rmse_du,
            "bias_molecules_cm2": self.bias,
            "bias_du": self.bias_du,
            "valid_pixels": self.n_valid,
        }


def compare_maps(candidate: ConcentrationMap, reference: ConcentrationMap) -> MapComparison:
    """RMSE and mean bias (candidate minus reference) over jointly valid pixels."""
    if candidate.values.shape != reference.values.shape:
        raise ValueError(f"grid mismatch: {candidate.values.shape} vs {reference.values.shape}")
    both = candidate.valid & reference.valid
    err_du = rmse_du(candidate, reference)
    d = candidate.values[both] - reference.values[both]
    bias = float(np.mean(d))
    return MapComparison(
        rmse=err_du * DOBSON_UNIT,
        rmse_du=err_du,
        bias=bias,
        bias_du=bias / DOBSON_UNIT,
        n_valid=int(both.sum()),
    )


def render_heatmap(cmap: ConcentrationMap, path, color_scale: tuple[float, float] | None = None) -> Path:
    """Grayscale PNG, one image pixel per map pixel, no-data in magenta.

    Writes ``<path>.scale.json`` with the bounds used. With an auto scale on a
    constant map the bounds collapse and every valid pixel is mid-gray.
    """
    path = Path(path)
    vals = cmap.values
    valid = cmap.valid
    if color_scale is None:
        if valid.any():
            lo, hi = float(vals[valid].min()), float(vals[valid].max())
        else:
            lo = hi = 0.0
    else:
        lo, hi = map(float, color_scale)
    degenerate = not hi > lo
    if degenerate:
        gray = np.full(vals.shape, 128, dtype=np.uint8)
    else:
        t = np.clip((vals - lo) / (hi - lo), 0.0, 1.0)
        gray = np.round(t * 255).astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    rgb[~valid] = NODATA_RGB
    try:
        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
    sidecar = path.with_name(path.name + ".scale.json")
    sidecar.write_text(json.dumps({
        "species": cmap.species,
        "min": lo,
        "max": hi,
        "degenerate": degenerate,
        "units": "molecules/cm^2",
        "nodata_rgb": list(NODATA_RGB),
    }, indent=2), encoding="utf-8")
    return path
