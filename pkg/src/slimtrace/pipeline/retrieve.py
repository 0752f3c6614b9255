"""Per-pixel SLIM retrieval over a scene and per-species aggregation."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..preprocess import (
    DetrendConfig,
    NoiseModel,
    apply_detrend,
    compute_optical_depth,
    estimate_noise_variance,
    whiten,
)
from ..slim import SlimConfig, select_q, solve_slim
from ..speclib import LibraryMatrix
from .maps import ConcentrationMap
from .scene import SceneCube

logger = logging.getLogger(__name__)

OPTICAL_DEPTH_CONVENTION = "z = -ln(pi * radiance / (cos(sza) * irradiance))"
NOISE_RECIPE = "scaled identity; variance = median squared residual of OLS on the 3 largest-norm library columns"


class RetrievalError(ValueError):
    pass


def _pipeline_slim() -> SlimConfig:
    # a gas whose lone-column correlation is negative (cross-talk with O3
    # after detrending) must still be able to enter the joint fit
    return SlimConfig(init_weights="magnitude")


@dataclass(frozen=True)
class RetrievalConfig:
    slim: SlimConfig = field(default_factory=_pipeline_slim)
    detrend: DetrendConfig = field(default_factory=DetrendConfig)
    per_pixel_q: bool = False
    workers: int = 1
    noise_variance: float | None = None

    def to_dict(self) -> dict:
        return {
            "slim": self.slim.to_dict(),
            "detrend": self.detrend.to_dict(),
            "per_pixel_q": self.per_pixel_q,
            "workers": self.workers,
            "noise_variance": self.noise_variance,
            "noise_recipe": "fixed" if self.noise_variance is not None else NOISE_RECIPE,
        }


@dataclass
class RetrievalReport:
    """Per-pixel outcome of a scene retrieval.

    ``alpha`` holds every endmember abundance in molecules/cm^2 (NaN on
    no-data pixels). Non-converged pixels keep their last iterate.
    """

    labels: tuple
    alpha: np.ndarray
    valid: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    q: np.ndarray
    errors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    @property
    def n_entries(self) -> int:
        return int(self.valid.sum())

    def save(self, path) -> None:
        np.savez(
            path,
            alpha=self.alpha,
            valid=self.valid,
            converged=self.converged,
            iterations=self.iterations,
            q=self.q,
        )


# worker-side context, installed once per process
_CTX: dict = {}


def _install_context(ctx: dict) -> None:
    _CTX.clear()
    _CTX.update(ctx)


def _pixel_problem(z: np.ndarray, ctx: dict):
    zt = apply_detrend(z, ctx["detrend"])
    var = ctx["noise_variance"]
    if var is None:
        var = estimate_noise_variance(zt, ctx["S_phys"])
    return whiten(zt, ctx["S_unit"], NoiseModel.scaled_identity(var))


def _solve_pixel(rad: np.ndarray, sza: float, ctx: dict, q: float | None):
    spec = compute_optical_depth(rad, ctx["irradiance"], sza)
    if not spec.valid:
        raise RetrievalError("optical depth undefined (non-positive radiance or irradiance)")
    prob = _pixel_problem(spec.values, ctx)
    cfg: SlimConfig = ctx["slim"]
    if q is None:
        est, _ = select_q(prob.y, prob.V, cfg)
    else:
        est = solve_slim(prob.y, prob.V, cfg, q=q)
    return est.alpha / ctx["norms"], est.converged, est.iterations_used, est.q_used


def _solve_rows(args):
    row_ids, radiance, sza, valid, q = args
    ctx = _CTX
    N = ctx["norms"].size
    out = []
    for k, r in enumerate(row_ids):
        for c in range(radiance.shape[1]):
            if not valid[k, c]:
                continue
            try:
                alpha, conv, its, q_used = _solve_pixel(radiance[k, c], float(sza[k, c]), ctx, q)
                out.append((r, c, alpha, conv, its, q_used, None))
            except Exception as exc:  # recorded per pixel, never fatal for the scene
                out.append((r, c, np.full(N, np.nan), False, 0, np.nan, f"{type(exc).__name__}: {exc}"))
    return out


def _context(scene: SceneCube, library: LibraryMatrix, config: RetrievalConfig) -> dict:
    unit, norms = library.normalized()
    return {
        "S_phys": library.matrix,
        "S_unit": unit.matrix,
        "norms": norms,
        "detrend": config.detrend,
        "slim": config.slim,
        "noise_variance": config.noise_variance,
        "irradiance": scene.irradiance,
    }


def choose_global_q(scene: SceneCube, library: LibraryMatrix, config: RetrievalConfig) -> tuple[float, tuple[int, int]]:
    """BIC-selected q on the valid pixel with the largest detrended signal."""
    ctx = _context(scene, library, config)
    best, best_norm = None, -1.0
    for r, c in zip(*np.nonzero(scene.valid)):
        spec = compute_optical_depth(scene.radiance[r, c], scene.irradiance, scene.solar_zenith[r, c])
        if not spec.valid:
            continue
        n = float(np.linalg.norm(apply_detrend(spec.values, config.detrend)))
        if n > best_norm:
            best, best_norm = (int(r), int(c)), n
    if best is None:
        return min(config.slim.q_grid), (-1, -1)
    spec = compute_optical_depth(scene.radiance[best], scene.irradiance, scene.solar_zenith[best])
    prob = _pixel_problem(spec.values, ctx)
    est, _ = select_q(prob.y, prob.V, config.slim)
    return est.q_used, best


def retrieve_map(scene: SceneCube, library: LibraryMatrix, config: RetrievalConfig | None = None) -> RetrievalReport:
    """Run optical depth, detrend, whitening and SLIM on every valid pixel.

    Pixels are independent; results land in slots keyed by pixel index so the
    output does not depend on ``config.workers``.
    """
    config = config or RetrievalConfig()
    if library.grid != scene.grid:
        raise RetrievalError(
            f"library grid ({library.grid.count} samples, {library.grid.values[0]}-{library.grid.values[-1]} nm) "
            f"does not match scene grid ({scene.grid.count} samples)"
        )
    if library.detrend != config.detrend:
        raise RetrievalError(f"library detrend {library.detrend} differs from pixel detrend {config.detrend}")

    t0 = time.perf_counter()
    rows, cols = scene.shape
    N = library.matrix.shape[1]

    if config.slim.q is not None:
        q, q_mode, q_pixel = config.slim.q, "fixed", None
    elif config.per_pixel_q:
        q, q_mode, q_pixel = None, "per-pixel BIC", None
    else:
        q, q_pixel = choose_global_q(scene, library, config)
        q_mode = "global BIC on highest-signal pixel"

    alpha = np.full((rows, cols, N), np.nan)
    converged = np.zeros((rows, cols), dtype=bool)
    iterations = np.zeros((rows, cols), dtype=int)
    q_map = np.full((rows, cols), np.nan)
    errors = {}

    ctx = _context(scene, library, config)
    workers = max(1, int(config.workers))
    blocks = np.array_split(np.arange(rows), min(rows, workers * 4)) if workers > 1 else [np.arange(rows)]
    tasks = [(b.tolist(), scene.radiance[b], scene.solar_zenith[b], scene.valid[b], q) for b in blocks if b.size]

    if workers == 1:
        _install_context(ctx)
        parts = [_solve_rows(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_install_context, initargs=(ctx,)) as pool:
            parts = list(pool.map(_solve_rows, tasks))

    valid = scene.valid.copy()
    for part in parts:
        for r, c, a, conv, its, q_used, err in part:
            alpha[r, c] = a
            converged[r, c] = conv
            iterations[r, c] = its
            q_map[r, c] = q_used
            if err is not None:
                errors[(r, c)] = err
                valid[r, c] = False
    if errors:
        logger.warning("%d pixel(s) failed; first: %s", len(errors), next(iter(errors.values())))

    metadata = {
        "config": config.to_dict(),
        "q_mode": q_mode,
        "q_global": q,
        "q_pixel": q_pixel,
        "library_manifest_hash": library.manifest_hash,
        "library_labels": [f"{lab.species}@{lab.temperature:g}K[{lab.source_id}]" for lab in library.labels],
        "band_nm": [float(scene.grid.values[0]), float(scene.grid.values[-1])],
        "bands": scene.grid.count,
        "optical_depth_convention": OPTICAL_DEPTH_CONVENTION,
        "aggregation": "sum over temperature variants of one species",
        "column_type": "direct solver output (no air-mass factor applied)",
    }
    return RetrievalReport(
        labels=tuple(library.labels),
        alpha=alpha,
        valid=valid,
        converged=converged,
        iterations=iterations,
        q=q_map,
        errors=errors,
        metadata=metadata,
        elapsed_s=time.perf_counter() - t0,
    )


def species_totals(report: RetrievalReport, species: str) -> ConcentrationMap:
    """Sum the abundances of every endmember of ``species`` per pixel."""
    idx = [i for i, lab in enumerate(report.labels) if lab[0] == species]
    if not idx:
        known = sorted({lab[0] for lab in report.labels})
        raise KeyError(f"unknown species {species!r}; library has {known}")
    values = np.where(report.valid, report.alpha[:, :, idx].sum(axis=2), 0.0)
    meta = dict(report.metadata)
    meta["endmembers"] = [f"{report.labels[i][0]}@{report.labels[i][1]:g}K" for i in idx]
    return ConcentrationMap(species, values, report.valid.copy(), meta)


def all_species_totals(report: RetrievalReport) -> dict[str, ConcentrationMap]:
    species = list(dict.fromkeys(lab[0] for lab in report.labels))
    return {s: species_totals(report, s) for s in species}
