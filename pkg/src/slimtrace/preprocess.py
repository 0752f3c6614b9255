"""Spectral preprocessing: optical depth, Savitzky-Golay detrending, whitening."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.linalg as splin
from scipy.signal import savgol_coeffs, savgol_filter

logger = logging.getLogger(__name__)

NoiseForm = Literal["scaled-identity", "diagonal", "full"]


@dataclass(frozen=True)
class DetrendConfig:
    """Savitzky-Golay settings shared by pixel spectra and library columns."""

    window: int = 35
    order: int = 3
    enabled: bool = True

    @classmethod
    def default_for(cls, n_samples: int) -> "DetrendConfig":
        # 10-band simulation setup uses a short filter; satellite spectra the long one
        if n_samples <= 10:
            return cls(window=5, order=2)
        return cls()

    def to_dict(self) -> dict:
        return {"window": self.window, "order": self.order, "enabled": self.enabled}

    @classmethod
    def from_dict(cls, d: dict) -> "DetrendConfig":
        return cls(
            window=int(d.get("window", 35)),
            order=int(d.get("order", 3)),
            enabled=bool(d.get("enabled", True)),
        )


@dataclass(frozen=True)
class PixelSpectrum:
    """Mixing-model observable z_m for one pixel.

    ``valid`` is False when the radiance/irradiance inputs could not be
    converted; ``values`` are then zeros and the pixel is treated as no-data.
    """

    wavelengths: np.ndarray
    values: np.ndarray
    pixel_id: tuple[int, int] | int = 0
    valid: bool = True


@dataclass(frozen=True)
class DetrendResult:
    smooth: np.ndarray
    detrended: np.ndarray


def _check_filter(window: int, order: int) -> None:
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if order < 0 or order >= window:
        raise ValueError(f"order must satisfy 0 <= order < window, got order={order}, window={window}")


def sg_coefficients(window: int, order: int) -> np.ndarray:
    """Center-point Savitzky-Golay weights, ordered from offset -h to +h."""
    _check_filter(window, order)
    return savgol_coeffs(window, order, use="dot")


def sg_smooth(signal, window: int, order: int) -> np.ndarray:
    """Least-squares polynomial smoothing of a 1-D signal.

    Interior samples use the center weights. The first and last ``window // 2``
    samples come from the polynomial fitted to the edge window, evaluated at
    their offsets, so the output has the input's length.
    """
    _check_filter(window, order)
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise ValueError("signal must be one-dimensional")
    if window > x.size:
        raise ValueError(f"window {window} exceeds signal length {x.size}")
    return savgol_filter(x, window, order, mode="interp")


def detrend(signal, window: int, order: int) -> DetrendResult:
    x = np.asarray(signal, dtype=float)
    smooth = sg_smooth(x, window, order)
    return DetrendResult(smooth=smooth, detrended=x - smooth)


def apply_detrend(signal, config: DetrendConfig) -> np.ndarray:
    """Fast component of ``signal`` under ``config``; identity when disabled."""
    x = np.asarray(signal, dtype=float)
    if not config.enabled:
        return x.copy()
    return detrend(x, config.window, config.order).detrended


def compute_optical_depth(radiance, irradiance, solar_zenith_deg: float,
                          wavelengths=None, pixel_id=0) -> PixelSpectrum:
    """Sun-normalized log reflectance, z = -ln(pi I / (cos(sza) E)).

    Non-positive or non-finite inputs yield an invalid spectrum instead of
    raising, so one bad pixel does not abort a scene.
    """
    rad = np.asarray(radiance, dtype=float)
    irr = np.asarray(irradiance, dtype=float)
    if rad.shape != irr.shape:
        raise ValueError(f"radiance shape {rad.shape} != irradiance shape {irr.shape}")
    if wavelengths is None:
        wavelengths = np.arange(rad.size, dtype=float)
    wavelengths = np.asarray(wavelengths, dtype=float)

    sza = float(solar_zenith_deg)
    ok = (
        np.all(np.isfinite(rad)) and np.all(np.isfinite(irr))
        and np.all(rad > 0) and np.all(irr > 0)
        and np.isfinite(sza) and 0.0 <= sza < 90.0
    )
    if not ok:
        return PixelSpectrum(wavelengths, np.zeros_like(rad), pixel_id, valid=False)

    mu = np.cos(np.deg2rad(sza))
    z = -np.log(np.pi * rad / (mu * irr))
    return PixelSpectrum(wavelengths, z, pixel_id, valid=bool(np.all(np.isfinite(z))))


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian noise covariance M in one of three parameterizations."""

    form: NoiseForm
    parameters: np.ndarray | float = field(repr=False)

    def __post_init__(self):
        if self.form == "scaled-identity":
            v = float(self.parameters)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"noise variance must be positive, got {v}")
        elif self.form == "diagonal":
            d = np.asarray(self.parameters, dtype=float)
            if d.ndim != 1 or not np.all(np.isfinite(d)) or np.any(d <= 0):
                raise ValueError("diagonal noise variances must be finite and positive")
        elif self.form == "full":
            m = np.asarray(self.parameters, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("full noise covariance must be square")
            if not np.allclose(m, m.T, rtol=1e-12, atol=0.0):
                raise ValueError("full noise covariance must be symmetric")
            if np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError("noise covariance is not positive definite")
        else:
            raise ValueError(f"unknown noise form {self.form!r}")

    @classmethod
    def scaled_identity(cls, variance: float) -> "NoiseModel":
        return cls("scaled-identity", float(variance))

    @classmethod
    def diagonal(cls, variances) -> "NoiseModel":
        return cls("diagonal", np.asarray(variances, dtype=float))

    @classmethod
    def full(cls, covariance) -> "NoiseModel":
        return cls("full", np.asarray(covariance, dtype=float))

    def inv_sqrt(self, size: int) -> np.ndarray:
        """Symmetric M^{-1/2} as a dense matrix."""
        if self.form == "scaled-identity":
            return np.eye(size) / np.sqrt(self.parameters)
        if self.form == "diagonal":
            self._check_size(size)
            return np.diag(1.0 / np.sqrt(self.parameters))
        self._check_size(size)
        w, U = splin.eigh(self.parameters)
        return (U / np.sqrt(w)) @ U.T

    def apply_inv_sqrt(self, x: np.ndarray) -> np.ndarray:
        """M^{-1/2} x for a vector or an (L, k) matrix."""
        x = np.asarray(x, dtype=float)
        if self.form == "scaled-identity":
            return x / np.sqrt(self.parameters)
        if self.form == "diagonal":
            self._check_size(x.shape[0])
            s = 1.0 / np.sqrt(self.parameters)
            return s * x if x.ndim == 1 else s[:, None] * x
        return self.inv_sqrt(x.shape[0]) @ x

    def apply_inv(self, x: np.ndarray) -> np.ndarray:
        """M^{-1} x."""
        x = np.asarray(x, dtype=float)
        if self.form == "scaled-identity":
            return x / self.parameters
        if self.form == "diagonal":
            self._check_size(x.shape[0])
            s = 1.0 / self.parameters
            return s * x if x.ndim == 1 else s[:, None] * x
        return splin.solve(self.parameters, x, assume_a="pos")

    def _check_size(self, size: int) -> None:
        n = np.asarray(self.parameters).shape[0]
        if n != size:
            raise ValueError(f"noise model has dimension {n}, data has {size}")

    def describe(self) -> dict:
        if self.form == "scaled-identity":
            return {"form": self.form, "variance": float(self.parameters)}
        return {"form": self.form, "dimension": int(np.asarray(self.parameters).shape[0])}


@dataclass(frozen=True)
class WhitenedProblem:
    y: np.ndarray
    V: np.ndarray
    noise: NoiseModel


def _as_matrix(S) -> np.ndarray:
    # accepts a LibraryMatrix or a bare array
    return np.asarray(getattr(S, "matrix", S), dtype=float)


def whiten(z, S, noise: NoiseModel) -> WhitenedProblem:
    """Return y = M^{-1/2} z and V = M^{-1/2} S."""
    z = np.asarray(getattr(z, "values", z), dtype=float)
    S = _as_matrix(S)
    if S.ndim != 2 or S.shape[0] != z.shape[0]:
        raise ValueError(f"dictionary shape {S.shape} incompatible with observation length {z.shape[0]}")
    return WhitenedProblem(y=noise.apply_inv_sqrt(z), V=noise.apply_inv_sqrt(S), noise=noise)


def estimate_noise_variance(z, S, n_columns: int = 3, floor: float = 1e-20) -> float:
    """Pilot noise variance: median squared residual of an OLS fit of z
    on the ``n_columns`` largest-norm dictionary columns.

    Falls back to the median squared observation (then to 1.0) when the
    residual vanishes. The result is never below ``floor``: an observation
    that is zero up to round-off would otherwise be whitened into an
    ill-conditioned problem.
    """
    z = np.asarray(z, dtype=float)
    S = _as_matrix(S)
    k = min(n_columns, S.shape[1], max(S.shape[0] - 1, 1))
    norms = np.linalg.norm(S, axis=0)
    cols = np.sort(np.argsort(-norms, kind="stable")[:k])
    A = S[:, cols]
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    r = z - A @ coef
    var = float(np.median(r ** 2))
    if not var > 0:
        var = float(np.median(z ** 2))
    if not var > 0:
        var = 1.0
    return max(var, floor)
