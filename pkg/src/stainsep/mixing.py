"""Deterministic linear imaging model and its pseudo-inverse.

A multi-stain image is the pixel-wise sum of its single-stain images,
equivalently the product of a spectrum matrix with per-stain density maps.
Synthesis clamps to the valid [0, 1] image range at the boundary; the
unclamped linear sum stays available for diagnostics. The inverse path
solves per-pixel least squares and clips negative densities, which is
adequate for the N <= 3 well-conditioned spectra supported here.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, SingularSpectraError
from .images import check_image
from .types import DensityMaps, SourceSet, SpectrumMatrix

RANK_RTOL = 1e-10


def synthesize_unclamped(sources: SourceSet) -> np.ndarray:
    """Pixel-wise sum of the single-stain images, no range clamp."""
    return np.sum(np.stack(sources.sources), axis=0)


def synthesize(sources: SourceSet) -> np.ndarray:
    """Mixed image for a SourceSet: sum of members clamped to [0, 1]."""
    return np.clip(synthesize_unclamped(sources), 0.0, 1.0)


def render_unclamped(spectra: SpectrumMatrix, densities: DensityMaps) -> np.ndarray:
    if spectra.n_sources != densities.n_sources:
        raise DimensionError(
            f"{spectra.n_sources} spectrum columns vs {densities.n_sources} density maps"
        )
    # (N,H,W) x (3,N) -> (H,W,3)
    return np.einsum("cn,nhw->hwc", spectra.columns, densities.maps)


def render(spectra: SpectrumMatrix, densities: DensityMaps) -> np.ndarray:
    """Image whose pixel RGB is the spectrum-weighted sum of densities."""
    return np.clip(render_unclamped(spectra, densities), 0.0, 1.0)


def _dependent_columns(v: np.ndarray) -> list[int]:
    """Smallest self-explanatory set of columns causing rank deficiency."""
    norms = np.linalg.norm(v, axis=0)
    zero = [i for i in range(v.shape[1]) if norms[i] <= RANK_RTOL]
    if zero:
        return zero
    unit = v / norms
    n = v.shape[1]
    for i in range(n):
        for j in range(i + 1, n):
            if abs(abs(float(unit[:, i] @ unit[:, j])) - 1.0) <= 1e-9:
                return [i, j]
    return list(range(n))


def unmix_with_spectra(
    image, spectra: SpectrumMatrix, stain_names=None
) -> SourceSet:
    """Model-based unmixing with known spectra.

    Solves the per-pixel least-squares system spectra @ d = rgb, clips
    negative densities to zero, and returns the per-stain images
    spectrum_i * density_i.
    """
    img = check_image(image)
    v = spectra.columns
    n = spectra.n_sources
    if n > 3:
        raise DimensionError(f"spectral inversion supports N <= 3, got N={n}")
    rank = np.linalg.matrix_rank(v, tol=RANK_RTOL)
    if rank < n:
        cols = _dependent_columns(v)
        raise SingularSpectraError(
            f"spectrum columns {cols} are linearly dependent; cannot invert",
            columns=cols,
        )
    h, w, c = img.shape
    pixels = img.reshape(-1, c).T  # (3, P)
    dens, *_ = np.linalg.lstsq(v, pixels, rcond=None)  # (N, P)
    dens = np.clip(dens, 0.0, None)
    sources = [
        (v[:, i][None, :] * dens[i][:, None]).reshape(h, w, c) for i in range(n)
    ]
    return SourceSet(sources, stain_names)


def densities_from_image(image, spectra: SpectrumMatrix) -> DensityMaps:
    """Non-negative least-squares density planes for a known spectrum set."""
    img = check_image(image)
    v = spectra.columns
    n = spectra.n_sources
    rank = np.linalg.matrix_rank(v, tol=RANK_RTOL)
    if rank < n:
        cols = _dependent_columns(v)
        raise SingularSpectraError(
            f"spectrum columns {cols} are linearly dependent; cannot invert",
            columns=cols,
        )
    h, w, c = img.shape
    dens, *_ = np.linalg.lstsq(v, img.reshape(-1, c).T, rcond=None)
    return DensityMaps(np.clip(dens, 0.0, None).reshape(n, h, w))
