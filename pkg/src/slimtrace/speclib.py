"""Cross-section ingestion, resampling and endmember library assembly."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import yaml

from .preprocess import DetrendConfig, apply_detrend

logger = logging.getLogger(__name__)


class LibraryError(ValueError):
    pass


@dataclass(frozen=True)
class WavelengthGrid:
    """Strictly increasing set of positive wavelengths in nm."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("a wavelength grid needs at least 2 samples")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("grid wavelengths must be finite and positive")
        if np.any(np.diff(v) <= 0):
            raise ValueError("grid wavelengths must be strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return int(self.values.size)

    def __len__(self) -> int:
        return self.count

    def __eq__(self, other) -> bool:
        if not isinstance(other, WavelengthGrid):
            return NotImplemented
        return self.count == other.count and bool(np.array_equal(self.values, other.values))

    __hash__ = None

    @classmethod
    def from_range(cls, start: float, stop: float, step: float) -> "WavelengthGrid":
        """Inclusive of ``stop`` when it falls on the step lattice."""
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return cls(start + step * np.arange(n))

    @classmethod
    def linspace(cls, start: float, stop: float, count: int) -> "WavelengthGrid":
        return cls(np.linspace(start, stop, count))

    @classmethod
    def from_spec(cls, spec) -> "WavelengthGrid":
        """Build from a manifest entry: a list, or a mapping with start/stop
        plus either step or count."""
        if isinstance(spec, dict):
            if "values" in spec:
                return cls(np.asarray(spec["values"], dtype=float))
            start, stop = float(spec["start"]), float(spec["stop"])
            if "count" in spec:
                return cls.linspace(start, stop, int(spec["count"]))
            return cls.from_range(start, stop, float(spec["step"]))
        return cls(np.asarray(spec, dtype=float))


@dataclass(frozen=True)
class CrossSectionRecord:
    species: str
    temperature: float
    native_wavelengths: np.ndarray
    values: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        wl = np.asarray(self.native_wavelengths, dtype=float)
        val = np.asarray(self.values, dtype=float)
        if wl.shape != val.shape or wl.ndim != 1:
            raise ValueError("wavelengths and values must be 1-D arrays of equal length")
        if wl.size == 0:
            raise ValueError("empty data")
        if np.any(np.diff(wl) <= 0):
            raise ValueError("native wavelengths must be strictly increasing")
        if np.any(val < 0):
            raise ValueError("cross sections must be non-negative")
        object.__setattr__(self, "native_wavelengths", wl)
        object.__setattr__(self, "values", val)

    @property
    def label(self) -> "EndmemberLabel":
        return EndmemberLabel(self.species, float(self.temperature), self.source_id)


class EndmemberLabel(NamedTuple):
    species: str
    temperature: float
    source_id: str = ""

    def short(self) -> str:
        return f"{self.species}@{self.temperature:g}K"


@dataclass(frozen=True)
class LibraryMatrix:
    """Dictionary S: one detrended, resampled cross section per column."""

    grid: WavelengthGrid
    matrix: np.ndarray
    labels: tuple[EndmemberLabel, ...]
    detrend: DetrendConfig = field(default_factory=DetrendConfig)
    manifest_hash: str = ""

    def __post_init__(self):
        S = np.asarray(self.matrix, dtype=float)
        if S.ndim != 2 or S.shape[0] != self.grid.count:
            raise LibraryError(f"library matrix shape {S.shape} does not match grid of {self.grid.count}")
        if S.shape[1] < 1:
            raise LibraryError("library needs at least one column")
        if S.shape[1] != len(self.labels):
            raise LibraryError("one label per column required")
        if len(set(self.labels)) != len(self.labels):
            raise LibraryError("duplicate (species, temperature, source_id) labels")
        zero = np.flatnonzero(~np.any(S != 0, axis=0))
        if zero.size:
            raise LibraryError(f"all-zero library column(s): {[self.labels[i].short() for i in zero]}")
        S.setflags(write=False)
        object.__setattr__(self, "matrix", S)
        object.__setattr__(self, "labels", tuple(EndmemberLabel(*lab) for lab in self.labels))

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def columns(self) -> list[np.ndarray]:
        return [self.matrix[:, i] for i in range(self.matrix.shape[1])]

    @property
    def species(self) -> list[str]:
        """Distinct species in column order of first appearance."""
        return list(dict.fromkeys(lab.species for lab in self.labels))

    def index_of(self, species: str, temperature: float, source_id: str | None = None) -> int:
        """Column of (species, temperature); the first match when ``source_id`` is None."""
        hits = [
            i for i, lab in enumerate(self.labels)
            if lab.species == species and np.isclose(lab.temperature, temperature)
            and (source_id is None or lab.source_id == source_id)
        ]
        if not hits:
            raise KeyError(f"no column for {species} at {temperature} K")
        return hits[0]

    def species_columns(self, species: str) -> np.ndarray:
        return np.array([i for i, lab in enumerate(self.labels) if lab.species == species], dtype=int)

    def normalized(self) -> tuple["LibraryMatrix", np.ndarray]:
        """Unit 2-norm columns plus the norms needed to undo the scaling.

        An abundance a' fitted against the normalized column corresponds to
        a' / norm in the original (physical) units.
        """
        norms = np.linalg.norm(self.matrix, axis=0)
        lib = LibraryMatrix(self.grid, self.matrix / norms, self.labels, self.detrend, self.manifest_hash)
        return lib, norms

    def save(self, path) -> None:
        """Write a library archive (.npz)."""
        meta = {
            "labels": [list(lab) for lab in self.labels],
            "detrend": self.detrend.to_dict(),
            "manifest_hash": self.manifest_hash,
        }
        with open(path, "wb") as fh:
            np.savez(fh, grid=self.grid.values, matrix=self.matrix, meta=np.array(json.dumps(meta)))

    @classmethod
    def load(cls, path) -> "LibraryMatrix":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            return cls(
                grid=WavelengthGrid(data["grid"]),
                matrix=data["matrix"],
                labels=tuple(EndmemberLabel(s, float(t), str(src)) for s, t, src in meta["labels"]),
                detrend=DetrendConfig.from_dict(meta["detrend"]),
                manifest_hash=meta.get("manifest_hash", ""),
            )


def load_cross_section(path, species: str, temperature: float, source_id: str | None = None) -> CrossSectionRecord:
    """Parse a two-column (wavelength nm, cm^2/molecule) text file.

    Lines starting with '#' and blank lines are skipped; columns may be
    separated by whitespace or commas. Rows are sorted by wavelength.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LibraryError(f"cannot read cross-section file {path}: {exc}") from exc

    wl, val = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < 2:
            raise LibraryError(f"{path}:{lineno}: expected wavelength and value, got {raw!r}")
        try:
            w, v = float(parts[0]), float(parts[1])
        except ValueError:
            raise LibraryError(f"{path}:{lineno}: malformed number in {raw!r}") from None
        wl.append(w)
        val.append(v)

    if not wl:
        raise LibraryError(f"{path}: empty data")
    wl_arr = np.array(wl)
    val_arr = np.array(val)
    order = np.argsort(wl_arr, kind="stable")
    wl_arr, val_arr = wl_arr[order], val_arr[order]
    dup = np.flatnonzero(np.diff(wl_arr) == 0)
    if dup.size:
        raise LibraryError(f"{path}: duplicate wavelength entries, e.g. {wl_arr[dup[0]]!r} nm")
    if np.any(val_arr < 0):
        raise LibraryError(f"{path}: negative cross-section value")
    return CrossSectionRecord(species, float(temperature), wl_arr, val_arr,
                              source_id if source_id is not None else path.name)


def write_cross_section(record: CrossSectionRecord, path, header: str | None = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.append(f"# species={record.species} temperature={record.temperature!r} K source={record.source_id}")
    lines.append("# wavelength_nm cross_section_cm2_per_molecule")
    # repr gives the shortest decimal that round-trips exactly
    lines.extend(f"{w!r} {v!r}" for w, v in zip(record.native_wavelengths.tolist(), record.values.tolist()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resample_to_grid(record: CrossSectionRecord, grid: WavelengthGrid) -> np.ndarray:
    """Piecewise-linear interpolation onto ``grid``; extrapolation is refused."""
    wl = record.native_wavelengths
    g = grid.values
    outside = (g < wl[0]) | (g > wl[-1])
    if np.any(outside):
        bad = g[np.flatnonzero(outside)[0]]
        raise LibraryError(
            f"{record.species}@{record.temperature:g}K covers {wl[0]}-{wl[-1]} nm; "
            f"grid wavelength {bad} nm is outside"
        )
    return np.interp(g, wl, record.values)


def assemble_library(records: Sequence[CrossSectionRecord], grid: WavelengthGrid,
                     detrender: DetrendConfig | None = None, manifest_hash: str = "") -> LibraryMatrix:
    if detrender is None:
        detrender = DetrendConfig.default_for(grid.count)
    if detrender.enabled and detrender.window > grid.count:
        raise LibraryError(f"detrend window {detrender.window} exceeds grid length {grid.count}")
    labels = [r.label for r in records]
    seen = set()
    for lab in labels:
        if lab in seen:
            raise LibraryError(f"duplicate library entry {lab}")
        seen.add(lab)
    cols = [apply_detrend(resample_to_grid(r, grid), detrender) for r in records]
    return LibraryMatrix(grid, np.column_stack(cols), tuple(labels), detrender, manifest_hash)


@dataclass
class LibraryManifest:
    """Parsed library manifest (YAML).

    Layout::

        grid: {start: 270, stop: 315, count: 10}   # or step, or values: [...]
        detrend: {window: 5, order: 2, enabled: true}
        entries:
          - {species: SO2, temperature: 293, file: so2_293.txt, source_id: ...}

    Relative file paths resolve against the manifest's directory.
    """

    grid: WavelengthGrid
    detrend: DetrendConfig
    entries: list[dict]
    base_dir: Path
    digest: str

    @classmethod
    def load(cls, path) -> "LibraryManifest":
        path = Path(path)
        raw = path.read_bytes()
        doc = yaml.safe_load(raw)
        if not isinstance(doc, dict):
            raise LibraryError(f"{path}: manifest must be a mapping")
        for key in ("grid", "entries"):
            if key not in doc:
                raise LibraryError(f"{path}: manifest is missing '{key}'")
        grid = WavelengthGrid.from_spec(doc["grid"])
        det = doc.get("detrend")
        detrend_cfg = DetrendConfig.from_dict(det) if det is not None else DetrendConfig.default_for(grid.count)
        entries = list(doc["entries"])
        for i, e in enumerate(entries):
            for key in ("species", "temperature", "file"):
                if key not in e:
                    raise LibraryError(f"{path}: entry {i} is missing '{key}'")
        return cls(grid, detrend_cfg, entries, path.parent, hashlib.sha256(raw).hexdigest()[:16])

    def records(self) -> list[CrossSectionRecord]:
        out = []
        for e in self.entries:
            f = Path(os.path.expanduser(str(e["file"])))
            if not f.is_absolute():
                f = self.base_dir / f
            out.append(load_cross_section(f, str(e["species"]), float(e["temperature"]), e.get("source_id")))
        return out

    def build(self, grid: WavelengthGrid | None = None, detrend: DetrendConfig | None = None) -> LibraryMatrix:
        return assemble_library(self.records(), grid or self.grid, detrend or self.detrend, self.digest)


def build_library(manifest_path, grid: WavelengthGrid | None = None,
                  detrend: DetrendConfig | None = None) -> LibraryMatrix:
    return LibraryManifest.load(manifest_path).build(grid, detrend)
