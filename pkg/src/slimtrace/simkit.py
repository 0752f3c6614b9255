"""Synthetic scenes, noise injection, Monte-Carlo trials and error metrics."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .preprocess import NoiseModel, whiten
from .slim import SlimConfig, estimate

logger = logging.getLogger(__name__)

DOBSON_UNIT = 2.69e16  # molecules / cm^2
SnrConvention = Literal["norm", "energy"]

# Fig. 2 experiment: 25 % H2S@294.8K, 35 % O2@293K, 15 % SO2@293K
THREE_GAS_TRUTH = (("H2S", 294.8, 0.25), ("O2", 293.0, 0.35), ("SO2", 293.0, 0.15))


@dataclass(frozen=True)
class SyntheticTruth:
    alpha_true: np.ndarray
    labels: tuple = ()
    seed: int = 0

    def __post_init__(self):
        a = np.asarray(self.alpha_true, dtype=float)
        if np.any(a < 0):
            raise ValueError("planted abundances must be non-negative")
        if not np.any(a > 0):
            raise ValueError("planted abundances need at least one positive entry")
        object.__setattr__(self, "alpha_true", a)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha_true > 0)

    @classmethod
    def from_labels(cls, library, amounts: Sequence[tuple[str, float, float]], seed: int = 0) -> "SyntheticTruth":
        """``amounts`` holds (species, temperature, abundance) triples."""
        a = np.zeros(library.matrix.shape[1])
        for species, temp, value in amounts:
            a[library.index_of(species, temp)] = value
        return cls(a, tuple(library.labels), seed)


@dataclass(frozen=True)
class TrialResult:
    alpha_hat: np.ndarray
    sre_db: float
    squared_errors: np.ndarray
    q_used: float = float("nan")
    converged: bool = True


@dataclass
class McSummary:
    trials: int
    rms_alpha: np.ndarray
    mean_sre_db: float
    snr_db: float
    sre_db: np.ndarray = field(default_factory=lambda: np.zeros(0))
    q_used: np.ndarray = field(default_factory=lambda: np.zeros(0))
    base_seed: int = 0
    snr_convention: str = "norm"

    def to_dict(self, labels=None) -> dict:
        d = {
            "snr_db": self.snr_db,
            "trials": self.trials,
            "base_seed": self.base_seed,
            "snr_convention": self.snr_convention,
            "mean_sre_db": self.mean_sre_db,
            "mean_sre_linear": float(np.mean(10 ** (self.sre_db / 20))) if self.sre_db.size else None,
            "rms_alpha": self.rms_alpha.tolist(),
            "q_histogram": _q_histogram(self.q_used),
        }
        if labels is not None:
            d["labels"] = [f"{lab[0]}@{lab[1]:g}K" for lab in labels]
        return d


def _q_histogram(q_used: np.ndarray) -> dict:
    vals, counts = np.unique(np.round(q_used, 6), return_counts=True)
    return {f"{v:g}": int(c) for v, c in zip(vals, counts)}


def generate_clean(S, truth: SyntheticTruth | np.ndarray) -> np.ndarray:
    """Noiseless pixel S a; ``truth`` may also be a bare abundance vector."""
    S = np.asarray(getattr(S, "matrix", S), dtype=float)
    alpha = np.asarray(getattr(truth, "alpha_true", truth), dtype=float)
    if S.shape[1] != alpha.size:
        raise ValueError(f"truth has {alpha.size} entries, dictionary {S.shape[1]} columns")
    return S @ alpha


def noise_variance_for(clean, snr_db: float, convention: SnrConvention = "norm") -> float:
    """Noise variance giving ``snr_db``.

    norm:   SNR = ||clean||_2 / var          (dB = 10 log10)
    energy: SNR = ||clean||_2^2 / (L * var)
    """
    clean = np.asarray(clean, dtype=float)
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    norm = float(np.linalg.norm(clean))
    if norm == 0:
        raise ValueError("cannot set a finite SNR on an all-zero signal")
    ratio = 10.0 ** (snr_db / 10.0)
    if convention == "norm":
        return norm / ratio
    if convention == "energy":
        return norm ** 2 / (clean.size * ratio)
    raise ValueError(f"unknown SNR convention {convention!r}")


def add_noise(clean, snr_db: float, seed, convention: SnrConvention = "norm") -> tuple[np.ndarray, float]:
    """Add i.i.d. Gaussian noise at ``snr_db``; returns (noisy, variance).

    ``seed`` may be an int or a ``numpy.random.SeedSequence``.
    """
    clean = np.asarray(clean, dtype=float)
    var = noise_variance_for(clean, snr_db, convention)
    if var == 0.0:
        return clean.copy(), 0.0
    rng = np.random.default_rng(seed)
    return clean + rng.normal(0.0, math.sqrt(var), clean.shape), var


def sre(alpha_true, alpha_hat) -> float:
    """Signal-to-reconstruction error in dB (20 log10 of the norm ratio).

    Returns +inf when the reconstruction is exact.
    """
    a = np.asarray(alpha_true, dtype=float)
    b = np.asarray(alpha_hat, dtype=float)
    if a.shape != b.shape:
        raise ValueError("abundance vectors must have equal length")
    num = np.linalg.norm(a)
    if num == 0:
        raise ValueError("SRE is undefined for an all-zero true abundance vector")
    err = np.linalg.norm(a - b)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(num / err)


def trial_seed(base_seed: int, trial: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(trial)])


def run_trial(S: np.ndarray, truth: SyntheticTruth, snr_db: float, trial: int, config: SlimConfig,
              convention: SnrConvention = "norm") -> TrialResult:
    clean = S @ truth.alpha_true
    noisy, var = add_noise(clean, snr_db, trial_seed(truth.seed, trial), convention)
    # noise power is known in the simulation; a noiseless pixel is solved unwhitened
    noise = NoiseModel.scaled_identity(var if var > 0 else 1.0)
    prob = whiten(noisy, S, noise)
    est, _ = estimate(prob.y, prob.V, config)
    return TrialResult(
        alpha_hat=est.alpha,
        sre_db=sre(truth.alpha_true, est.alpha),
        squared_errors=(est.alpha - truth.alpha_true) ** 2,
        q_used=est.q_used,
        converged=est.converged,
    )


def _trial_batch(args):
    S, truth, snr_db, trials, config, convention = args
    return [run_trial(S, truth, snr_db, t, config, convention) for t in trials]


def run_monte_carlo(S, truth: SyntheticTruth, snr_db: float, trials: int, solver_config: SlimConfig,
                    convention: SnrConvention = "norm", workers: int = 1) -> McSummary:
    """Independent noisy trials of one planted pixel.

    Trial ``k`` draws its noise from ``SeedSequence([truth.seed, k])`` so the
    summary does not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    S = np.asarray(getattr(S, "matrix", S), dtype=float)
    idx = list(range(trials))
    if workers <= 1:
        results = _trial_batch((S, truth, snr_db, idx, solver_config, convention))
    else:
        chunks = [idx[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_trial_batch, [(S, truth, snr_db, c, solver_config, convention) for c in chunks]))
        slots: list = [None] * trials
        for c, part in zip(chunks, parts):
            for t, r in zip(c, part):
                slots[t] = r
        results = slots

    est = np.array([r.alpha_hat for r in results])
    sres = np.array([r.sre_db for r in results])
    return McSummary(
        trials=trials,
        rms_alpha=np.sqrt(np.mean(est ** 2, axis=0)),
        mean_sre_db=float(np.mean(sres)),
        snr_db=float(snr_db),
        sre_db=sres,
        q_used=np.array([r.q_used for r in results]),
        base_seed=truth.seed,
        snr_convention=convention,
    )


def write_mc_report(path, summaries: Sequence[McSummary], labels, config: dict) -> None:
    doc = {
        "config": config,
        "sre_definition": "20*log10(||a|| / ||a - a_hat||)",
        "results": [s.to_dict(labels) for s in summaries],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def format_mc_table(summaries: Sequence[McSummary], labels, truth: np.ndarray | None = None) -> str:
    """Plain-text RMS/SRE table, one column per SNR."""
    head = f"{'endmember':<22}" + ("" if truth is None else f"{'truth':>8}") + "".join(
        f"{s.snr_db:>10g}dB" for s in summaries)
    rows = [head]
    for i, lab in enumerate(labels):
        name = f"{lab[0]}@{lab[1]:g}K"
        line = f"{name:<22}" + ("" if truth is None else f"{truth[i]:>8.3f}")
        line += "".join(f"{s.rms_alpha[i]:>12.4f}" for s in summaries)
        rows.append(line)
    rows.append(f"{'mean SRE [dB]':<22}" + ("" if truth is None else " " * 8)
                + "".join(f"{s.mean_sre_db:>12.2f}" for s in summaries))
    return "\n".join(rows)


def rmse_du(map_a, map_b) -> float:
    """RMS difference of two concentration maps over jointly valid pixels, in DU."""
    a = np.asarray(map_a.values, dtype=float)
    b = np.asarray(map_b.values, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    valid = np.asarray(map_a.valid, dtype=bool) & np.asarray(map_b.valid, dtype=bool)
    if not valid.any():
        raise ValueError("maps share no valid pixels")
    d = a[valid] - b[valid]
    return float(np.sqrt(np.mean(d ** 2)) / DOBSON_UNIT)


@dataclass(frozen=True)
class PlumeSpec:
    """Eastward-drifting plume: peak column at the vent pixel, exponential
    decay downwind (increasing column index) and a widening Gaussian cross
    section. Amounts in Dobson units."""

    species: str = "SO2"
    temperature: float = 293.0
    peak_du: float = 30.0
    vent: tuple[int, int] = (30, 12)
    decay_pixels: float = 12.0
    width_pixels: float = 1.5
    spread: float = 0.15


@dataclass(frozen=True)
class SceneTruth:
    alpha: np.ndarray              # (rows, cols, N) molecules/cm^2
    species_maps: dict             # species -> (rows, cols) molecules/cm^2
    peak_pixel: tuple[int, int]
    noise_variance: np.ndarray     # (rows, cols)


UV2_BAND = (300.0, 332.0)
UV2_SAMPLES = 497


def uv2_grid():
    from .speclib import WavelengthGrid
    return WavelengthGrid.linspace(UV2_BAND[0], UV2_BAND[1], UV2_SAMPLES)


def plume_field(rows: int, cols: int, plume: PlumeSpec) -> np.ndarray:
    """Plume column amount per pixel, molecules/cm^2."""
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    r0, c0 = plume.vent
    x = (c - c0).astype(float)
    down = np.clip(x, 0.0, None)
    width = plume.width_pixels * (1.0 + plume.spread * down)
    along = np.where(x >= 0, np.exp(-down / plume.decay_pixels), np.exp(-0.5 * (x / 1.2) ** 2))
    across = np.exp(-0.5 * ((r - r0) / width) ** 2)
    return plume.peak_du * DOBSON_UNIT * along * across / (1.0 + plume.spread * down) ** 0.5


def synthetic_irradiance(wavelengths: np.ndarray) -> np.ndarray:
    """Smooth solar continuum with a few Fraunhofer-like dips (photons/s/cm^2/nm)."""
    wl = np.asarray(wavelengths, dtype=float)
    cont = 3e14 * (1.0 + 0.02 * (wl - 300.0))
    dips = np.zeros_like(wl)
    for c0 in np.arange(301.3, 332.0, 2.7):
        dips += 0.25 * np.exp(-0.5 * ((wl - c0) / 0.15) ** 2)
    return cont * (1.0 - dips)


def simulate_scene(raw_library, rows: int = 47, cols: int = 41, snr_db: float = 60.0, seed: int = 0,
                   plume: PlumeSpec | None = None, background: Sequence[tuple[str, float, float]] = (("O3", 228.0, 300.0),),
                   convention: SnrConvention = "norm", n_masked: int = 0):
    """Forward-simulate a radiance scene from planted column amounts.

    ``raw_library`` must hold undetrended cross sections (cm^2/molecule) on
    the scene grid. Each pixel's optical depth is the absorption term S a, a
    cubic broadband polynomial (removed later by detrending) and Gaussian
    noise whose variance follows ``snr_db`` relative to ||S a||; radiance is
    then cos(sza) E / pi * exp(-tau). ``background`` lists
    (species, temperature, DU) amounts present everywhere.

    Returns (SceneCube, SceneTruth).
    """
    from .pipeline.scene import make_scene

    plume = plume or PlumeSpec()
    S = np.asarray(raw_library.matrix, dtype=float)
    wl = raw_library.grid.values
    L, N = S.shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0FFEE]))

    alpha = np.zeros((rows, cols, N))
    k_plume = raw_library.index_of(plume.species, plume.temperature)
    alpha[:, :, k_plume] = plume_field(rows, cols, plume)
    rr, cc = np.meshgrid(np.linspace(-1, 1, rows), np.linspace(-1, 1, cols), indexing="ij")
    for species, temp, du in background:
        k = raw_library.index_of(species, temp)
        alpha[:, :, k] += du * DOBSON_UNIT * (1.0 + 0.05 * rr - 0.03 * cc)

    sza = 35.0 + 8.0 * (rr + 1) / 2 + 2.0 * (cc + 1) / 2
    lat = 37.0 + 0.035 * (rows - 1 - np.arange(rows))[:, None] * np.ones((1, cols))
    lon = 14.2 + 0.063 * np.arange(cols)[None, :] * np.ones((rows, 1))

    irr = synthetic_irradiance(wl)
    x = (wl - wl.mean()) / (wl.max() - wl.min())
    basis = np.vstack([np.ones_like(x), x, x ** 2, x ** 3])
    radiance = np.empty((rows, cols, L))
    var_map = np.empty((rows, cols))
    for r in range(rows):
        for c in range(cols):
            tau_abs = S @ alpha[r, c]
            coef = np.array([0.6 + 0.3 * rr[r, c], -0.4, 0.1, -0.05]) + 0.02 * rng.standard_normal(4)
            var = noise_variance_for(tau_abs, snr_db, convention) if np.any(tau_abs) else 0.0
            noise = rng.normal(0.0, math.sqrt(var), L) if var > 0 else np.zeros(L)
            tau = tau_abs + coef @ basis + noise
            mu = np.cos(np.deg2rad(sza[r, c]))
            radiance[r, c] = mu * irr / np.pi * np.exp(-tau)
            var_map[r, c] = var

    if n_masked:
        flat = rng.choice(rows * cols, size=n_masked, replace=False)
        for f in flat:
            r, c = divmod(int(f), cols)
            if (r, c) != tuple(plume.vent):
                radiance[r, c, L // 2] = -1.0

    scene = make_scene(wl, radiance, irr, sza, lat, lon)
    species_maps = {}
    for i, lab in enumerate(raw_library.labels):
        species_maps.setdefault(lab.species, np.zeros((rows, cols)))
        species_maps[lab.species] += alpha[:, :, i]
    peak = np.unravel_index(np.argmax(alpha[:, :, k_plume]), (rows, cols))
    return scene, SceneTruth(alpha, species_maps, (int(peak[0]), int(peak[1])), var_map)
