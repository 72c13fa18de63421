"""2D spectral analysis: DC-centered DFTs, amplitude spectra, the adaptive
cumulative-energy cutoff, and complementary radial low/high-pass masks.

Bin radii are measured in bin units from the DC bin (the fftshift center)
and normalized so the farthest representable bin sits at radius 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConjugateSymmetryError, DegenerateSpectrumError, InvalidParameterError
from .scene import ImageBuffer


def _as_hwc(img) -> np.ndarray:
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise InvalidParameterError(f"expected HxWxC image, got shape {data.shape}")
    return data


@dataclass
class Spectrum:
    """Per-channel complex DFT coefficients, DC bin at (H//2, W//2)."""

    coeffs: np.ndarray  # (H, W, C) complex128

    @property
    def height(self) -> int:
        return self.coeffs.shape[0]

    @property
    def width(self) -> int:
        return self.coeffs.shape[1]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[2]


@dataclass
class FrequencyMask:
    weights: np.ndarray  # (H, W) in [0, 1], DC-centered layout
    cutoff_radius: float

    @property
    def height(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]


def dft2(img) -> Spectrum:
    data = _as_hwc(img)
    coeffs = np.fft.fftshift(np.fft.fft2(data, axes=(0, 1)), axes=(0, 1))
    return Spectrum(coeffs)


def idft2(spec: Spectrum, imag_tol: float = 1e-6) -> np.ndarray:
    """Inverse transform back to a real (H, W, C) field."""
    field = np.fft.ifft2(np.fft.ifftshift(spec.coeffs, axes=(0, 1)), axes=(0, 1))
    residue = float(np.max(np.abs(field.imag))) if field.size else 0.0
    if residue > imag_tol:
        raise ConjugateSymmetryError(f"imaginary residue {residue:.3e} exceeds {imag_tol:.1e}")
    return field.real


def amplitude(spec: Spectrum) -> np.ndarray:
    return np.abs(spec.coeffs)


def bin_radii(height: int, width: int) -> tuple[np.ndarray, float]:
    """(normalized radius grid, max radius in bins) for a DC-centered layout."""
    cy, cx = height // 2, width // 2
    dy = np.arange(height, dtype=np.float64)[:, None] - cy
    dx = np.arange(width, dtype=np.float64)[None, :] - cx
    d = np.sqrt(dy * dy + dx * dx)
    dmax = float(d.max())
    return (d / dmax if dmax > 0 else d), dmax


def adaptive_cutoff(spec: Spectrum, energy_fraction: float) -> float:
    """Smallest normalized radius whose enclosed squared amplitude reaches the
    requested fraction of total spectral energy (summed over channels)."""
    if not 0.0 <= energy_fraction <= 1.0:
        raise InvalidParameterError("energy_fraction must lie in [0, 1]")
    energy = np.sum(np.abs(spec.coeffs) ** 2, axis=2)
    total = float(energy.sum())
    if total <= 0.0:
        raise DegenerateSpectrumError("all-zero spectrum has no energy cutoff")
    radii, _ = bin_radii(spec.height, spec.width)
    order = np.argsort(radii, axis=None, kind="stable")
    r_sorted = radii.flat[order]
    cum = np.cumsum(energy.flat[order])
    target = energy_fraction * total
    # bins at equal radius enter together: keep the last cumulative value per radius
    hit = cum >= target - 1e-12 * total
    first = int(np.argmax(hit))
    r = float(r_sorted[first])
    return r


def make_masks(width: int, height: int, cutoff_radius: float,
               softness: float = 0.0) -> tuple[FrequencyMask, FrequencyMask]:
    """Radial low/high-pass pair; `softness` is the raised-cosine transition
    width in bins, starting just outside the cutoff. lowpass + highpass == 1."""
    if not 0.0 <= cutoff_radius <= 1.0:
        raise InvalidParameterError("cutoff_radius must lie in [0, 1]")
    if softness < 0:
        raise InvalidParameterError("softness must be >= 0")
    radii, dmax = bin_radii(height, width)
    d = radii * dmax                     # back to bin units
    edge = cutoff_radius * dmax
    if softness == 0.0:
        low = (d <= edge).astype(np.float64)
    else:
        ramp = 0.5 * (1.0 + np.cos(np.pi * (d - edge) / softness))
        low = np.where(d <= edge, 1.0, np.where(d > edge + softness, 0.0, ramp))
    high = 1.0 - low
    return (
        FrequencyMask(low, cutoff_radius),
        FrequencyMask(high, cutoff_radius),
    )


def bandlimit(img, mask: FrequencyMask) -> np.ndarray:
    """Filter in the frequency domain: iDFT(mask * DFT(img)), returned real."""
    data = _as_hwc(img)
    if mask.weights.shape != data.shape[:2]:
        raise InvalidParameterError(
            f"mask {mask.weights.shape} does not match image {data.shape[:2]}"
        )
    spec = dft2(data)
    return idft2(Spectrum(spec.coeffs * mask.weights[:, :, None]))


def radial_energy_profile(spec: Spectrum) -> tuple[np.ndarray, np.ndarray]:
    """(sorted unique normalized radii, cumulative energy fraction at each)."""
    energy = np.sum(np.abs(spec.coeffs) ** 2, axis=2)
    total = float(energy.sum())
    if total <= 0.0:
        raise DegenerateSpectrumError("all-zero spectrum has no energy profile")
    radii, _ = bin_radii(spec.height, spec.width)
    order = np.argsort(radii, axis=None, kind="stable")
    r_sorted = radii.flat[order]
    cum = np.cumsum(energy.flat[order]) / total
    uniq, last_index = np.unique(r_sorted[::-1], return_index=True)
    # last cumulative value per radius = everything at radius <= r included
    cum_per_radius = cum[::-1][last_index]
    return uniq, cum_per_radius
