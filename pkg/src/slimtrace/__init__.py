"""Sparse (SLIM) unmixing of trace-gas absorption spectra."""

from pathlib import Path

from .preprocess import DetrendConfig, NoiseModel, apply_detrend, compute_optical_depth, whiten
from .slim import AbundanceEstimate, SlimConfig, estimate, select_q, solve_slim
from .speclib import LibraryMatrix, LibraryManifest, WavelengthGrid, build_library

__version__ = "0.1.0"

DATA_DIR = Path(__file__).resolve().parent / "data"


def bundled_manifest() -> Path:
    """Path of the bundled 29-entry synthetic cross-section manifest."""
    return DATA_DIR / "xsec" / "library.yaml"


__all__ = [
    "AbundanceEstimate",
    "DATA_DIR",
    "DetrendConfig",
    "LibraryManifest",
    "LibraryMatrix",
    "NoiseModel",
    "SlimConfig",
    "WavelengthGrid",
    "apply_detrend",
    "build_library",
    "bundled_manifest",
    "compute_optical_depth",
    "estimate",
    "select_q",
    "solve_slim",
    "whiten",
]
