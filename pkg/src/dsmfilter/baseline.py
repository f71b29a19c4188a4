"""Hand-crafted vegetation filter: normal-direction scatter, morphology, min fill."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .raster import HeightMap, RasterError, surface_normals


@dataclass
class BaselineParams:
    variance_window: int = 7
    variance_threshold: float = 0.35
    open_radius: int = 1
    close_radius: int = 2
    fill_window: int = 15

    def __post_init__(self):
        for name in ("variance_window", "fill_window"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {v}")
        if not self.variance_threshold > 0:
            raise ValueError("variance_threshold must be positive")
        if self.open_radius < 0 or self.close_radius < 0:
            raise ValueError("morphology radii must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _window_mean(a: np.ndarray, size: int) -> np.ndarray:
    """Mean over the part of a ``size``-square window that lies inside the array."""
    total = ndimage.uniform_filter(a, size, mode="constant", cval=0.0)
    support = ndimage.uniform_filter(np.ones(a.shape), size, mode="constant", cval=0.0)
    return total / support


def spherical_variance(hm: HeightMap, window: int) -> np.ndarray:
    """``1 - |mean unit normal|`` over each window; NaN where normals are undefined."""
    n = surface_normals(hm).normals
    undefined = np.isnan(n).any(axis=-1)
    mean = np.stack([_window_mean(np.nan_to_num(n[..., k]), window) for k in range(3)], axis=-1)
    out = 1.0 - np.linalg.norm(mean, axis=-1)
    out[undefined] = np.nan
    return out


def vegetation_mask(dsm: HeightMap, params: BaselineParams | None = None) -> np.ndarray:
    params = params or BaselineParams()
    if dsm.rows < params.variance_window or dsm.cols < params.variance_window:
        raise RasterError("raster is smaller than the variance window")
    return spherical_variance(dsm, params.variance_window) > params.variance_threshold


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square erosion; cells outside the raster do not participate."""
    if radius == 0:
        return mask.copy()
    return ndimage.minimum_filter(mask.astype(np.uint8), 2 * radius + 1, mode="nearest").astype(bool)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask.copy()
    return ndimage.maximum_filter(mask.astype(np.uint8), 2 * radius + 1, mode="nearest").astype(bool)


def morph_cleanup(mask: np.ndarray, open_radius: int, close_radius: int) -> np.ndarray:
    """Opening followed by closing with square structuring elements."""
    if open_radius < 0 or close_radius < 0:
        raise ValueError("radii must be non-negative")
    mask = np.asarray(mask, dtype=bool)
    opened = dilate(erode(mask, open_radius), open_radius)
    return erode(dilate(opened, close_radius), close_radius)


def fill_masked(dsm: HeightMap, mask: np.ndarray, fill_window: int) -> HeightMap:
    """Replace masked cells by the lowest unmasked height in their window.

    Cells with no unmasked neighbour retry with windows of roughly 2x and 4x
    the size; whatever is still empty becomes nodata (NaN).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != dsm.shape:
        raise RasterError("mask does not match raster shape")
    out = dsm.values.astype(np.float64, copy=True)
    if not mask.any():
        return dsm.like(out, nodata=dsm.nodata)
    source = np.where(mask | ~dsm.valid_mask(), np.inf, out)
    todo = mask.copy()
    for factor in (1, 2, 4):
        size = fill_window * factor + (1 if factor > 1 else 0)
        low = ndimage.minimum_filter(source, size, mode="constant", cval=np.inf)
        ok = todo & np.isfinite(low)
        out[ok] = low[ok]
        todo &= ~ok
        if not todo.any():
            break
    nodata = dsm.nodata
    if todo.any():
        out[todo] = np.nan
        nodata = np.nan
    return dsm.like(out, nodata=nodata)


def baseline_filter(dsm: HeightMap, params: BaselineParams | None = None) -> HeightMap:
    params = params or BaselineParams()
    mask = morph_cleanup(vegetation_mask(dsm, params), params.open_radius, params.close_radius)
    return fill_masked(dsm, mask, params.fill_window)
