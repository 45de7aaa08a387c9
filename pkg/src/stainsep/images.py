"""Image conventions, validation helpers and 8-bit file I/O.

An image is a plain ``(H, W, 3)`` float64 ndarray of non-negative RGB
intensities. The canonical range is [0, 1]; values above 1 appear only in
unclamped linear-synthesis intermediates. 8-bit [0, 255] exists solely at
file boundaries (PNG/TIFF) and inside the MSE/PSNR metric convention.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image as _PILImage

from .exceptions import DimensionError, ParameterError

CHANNELS = 3


def freeze(arr: np.ndarray) -> np.ndarray:
    """Return a read-only float64 C-contiguous copy of ``arr``.

    Domain values are immutable after construction so they can be shared
    freely between workers.
    """
    out = np.ascontiguousarray(arr, dtype=np.float64).copy()
    out.flags.writeable = False
    return out


def check_image(arr, name: str = "image", allow_above_one: bool = False) -> np.ndarray:
    """Validate an array against the image contract and return it as float64.

    Raises :class:`DimensionError` for shape problems and
    :class:`ParameterError` for out-of-range intensities.
    """
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != CHANNELS:
        raise DimensionError(
            f"{name}: expected (H, W, {CHANNELS}) array, got shape {np.shape(arr)}"
        )
    if not np.isfinite(a).all():
        raise ParameterError(f"{name}: intensities must be finite")
    if (a < 0).any():
        raise ParameterError(f"{name}: intensities must be non-negative")
    if not allow_above_one and (a > 1).any():
        raise ParameterError(
            f"{name}: intensities above 1 are only valid in unclamped synthesis"
        )
    return a


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def image_violations(arr, name: str = "image") -> list[str]:
    """Non-raising variant of :func:`check_image`; returns violation strings."""
    out: list[str] = []
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[-1] != CHANNELS:
        out.append(f"shape: {name} is {a.shape}, expected (H, W, {CHANNELS})")
        return out
    if not np.isfinite(a).all():
        out.append(f"finiteness: {name} contains non-finite intensities")
        return out
    if (a < 0).any():
        out.append(f"non-negativity: {name} contains negative intensities")
    if (a > 1).any():
        out.append(f"canonical-range: {name} contains intensities above 1")
    return out


def to_uint8(image) -> np.ndarray:
    """Quantize a canonical [0, 1] image to 8-bit, rounding to nearest."""
    a = check_image(image)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """Map an 8-bit RGB array back to the canonical [0, 1] range."""
    a = np.asarray(raw)
    if a.dtype != np.uint8:
        raise ParameterError(f"expected uint8 data, got {a.dtype}")
    return a.astype(np.float64) / 255.0


def save_image(image, path: str | os.PathLike) -> None:
    """Write a canonical image as an 8-bit RGB PNG or TIFF."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in (".png", ".tif", ".tiff"):
        raise ParameterError(f"unsupported image format {ext!r}: use PNG or TIFF")
    _PILImage.fromarray(to_uint8(image), mode="RGB").save(path)


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit RGB image file into the canonical [0, 1] range."""
    with _PILImage.open(path) as img:
        rgb = img.convert("RGB")
        data = np.asarray(rgb, dtype=np.uint8)
    return from_uint8(data)
