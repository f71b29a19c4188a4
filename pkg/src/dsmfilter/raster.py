"""Raster containers, file I/O, height-map differential geometry and metrics.

Coordinate conventions used throughout the package:

* ``values[row, col]``; rows run southward, columns run eastward.
* ``origin`` is the map coordinate ``(x, y)`` of the top-left pixel corner.
* Pixel ``(r, c)`` has its center at ``(x0 + (c + 0.5) * gsd, y0 - (r + 0.5) * gsd)``.
* Image-frame gradients (used by normals) take ``x`` along columns and ``y``
  along rows.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile

logger = logging.getLogger(__name__)

NUM_CLASSES = 3
CLASS_NAMES = ("no building", "flat roof", "sloped roof")

# GeoTIFF tag ids
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_GEOKEYS = 34735
_TAG_GDAL_NODATA = 42113

RAW_SUFFIXES = (".raw", ".bin")


class RasterError(ValueError):
    """Raised for malformed rasters or incompatible raster arguments."""


@dataclass
class HeightMap:
    """Single-band elevation raster in meters."""

    values: np.ndarray
    gsd: float
    nodata: float | None = None
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise RasterError(f"height map must be 2-D, got shape {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise RasterError("height map must have at least one row and column")
        if not (self.gsd > 0 and math.isfinite(self.gsd)):
            raise RasterError(f"gsd must be positive, got {self.gsd}")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_mask(self) -> np.ndarray:
        """True where the cell holds data (not the nodata sentinel, not NaN)."""
        valid = ~np.isnan(self.values)
        if self.nodata is not None and not math.isnan(self.nodata):
            valid &= self.values != self.nodata
        return valid

    def masked(self) -> np.ndarray:
        """Float64 copy with nodata cells replaced by NaN."""
        out = self.values.astype(np.float64, copy=True)
        out[~self.valid_mask()] = np.nan
        return out

    def check_finite(self):
        bad = ~np.isfinite(self.values) & self.valid_mask()
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise RasterError(f"non-finite value {self.values[r, c]} at ({r}, {c})")

    def like(self, values: np.ndarray, nodata: float | None = None) -> HeightMap:
        """New map on the same grid."""
        return HeightMap(values, self.gsd, nodata=nodata, origin=self.origin)


@dataclass
class RoofClassMap:
    """Integer roof-type raster: 0 no building, 1 flat roof, 2 sloped roof."""

    labels: np.ndarray
    gsd: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise RasterError(f"label map must be 2-D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer) and not np.all(np.mod(labels, 1) == 0):
            raise RasterError("label map contains non-integer values")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise RasterError(f"labels must lie in {{0, 1, 2}}, found range [{labels.min()}, {labels.max()}]")
        self.labels = labels.astype(np.uint8)

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class NormalField:
    """Per-pixel unit normals, shape (rows, cols, 3); NaN where undefined."""

    normals: np.ndarray

    def __post_init__(self):
        if self.normals.ndim != 3 or self.normals.shape[-1] != 3:
            raise RasterError(f"normals must have shape (rows, cols, 3), got {self.normals.shape}")
        norms = np.linalg.norm(self.normals, axis=-1)
        defined = ~np.isnan(norms)
        if not np.all(np.abs(norms[defined] - 1.0) <= 1e-6):
            raise RasterError("normals must have unit length")

    @property
    def rows(self) -> int:
        return self.normals.shape[0]

    @property
    def cols(self) -> int:
        return self.normals.shape[1]


@dataclass
class Metrics:
    rmse: float
    mae: float
    miou: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, str]]:
        """``(metric, value, unit)`` triples for CSV emission."""
        out = [("rmse", self.rmse, "m"), ("mae", self.mae, "m")]
        if self.miou is not None:
            out.append(("miou", self.miou, "ratio"))
        for k, v in self.extra.items():
            out.append((k, v[0], v[1]) if isinstance(v, tuple) else (k, v, ""))
        return out


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _is_raw(path: Path) -> bool:
    return path.suffix.lower() in RAW_SUFFIXES


def _header_path(path: Path) -> Path:
    return path.with_suffix(".hdr")


def _read_raw(path: Path) -> tuple[np.ndarray, float, float | None, tuple[float, float]]:
    hdr_path = _header_path(path)
    if not hdr_path.exists():
        raise RasterError(f"missing sidecar header {hdr_path}")
    header = {}
    for line in hdr_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        header[key.strip().lower()] = value.strip()
    for key in ("rows", "cols", "gsd"):
        if key not in header:
            raise RasterError(f"sidecar header {hdr_path} is missing field '{key}'")
    if int(header.get("bands", 1)) != 1:
        raise RasterError(f"expected single band, header declares {header['bands']}")
    rows, cols = int(header["rows"]), int(header["cols"])
    dtype = np.dtype(header.get("dtype", "float32")).newbyteorder("<")
    data = np.fromfile(path, dtype=dtype)
    if data.size != rows * cols:
        raise RasterError(f"{path} holds {data.size} values, header expects {rows}x{cols}")
    nodata = header.get("nodata", "none")
    nodata = None if nodata.lower() == "none" else float(nodata)
    origin = (float(header.get("origin_x", 0.0)), float(header.get("origin_y", 0.0)))
    return data.reshape(rows, cols).astype(dtype.newbyteorder("=")), float(header["gsd"]), nodata, origin


def _write_raw(path: Path, data: np.ndarray, gsd: float, nodata, origin):
    data.astype(data.dtype.newbyteorder("<")).tofile(path)
    lines = [
        f"rows = {data.shape[0]}",
        f"cols = {data.shape[1]}",
        "bands = 1",
        f"gsd = {gsd!r}",
        f"dtype = {data.dtype.name}",
        f"nodata = {'none' if nodata is None else repr(float(nodata))}",
        f"origin_x = {origin[0]!r}",
        f"origin_y = {origin[1]!r}",
    ]
    _header_path(path).write_text("\n".join(lines) + "\n")


def _read_geotiff(path: Path) -> tuple[np.ndarray, float, float | None, tuple[float, float]]:
    try:
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            if len(tif.pages) > 1 or page.samplesperpixel > 1:
                raise RasterError(f"expected single band raster in {path}")
            data = page.asarray()
            tags = {code: page.tags.get(code) for code in (_TAG_PIXEL_SCALE, _TAG_TIEPOINT, _TAG_GDAL_NODATA)}
            scale, tiepoint, nodata_tag = (None if t is None else t.value for t in tags.values())
    except RasterError:
        raise
    except Exception as exc:  # tifffile raises a variety of types
        raise RasterError(f"unreadable raster {path}: {exc}") from exc
    if data.ndim != 2:
        raise RasterError(f"expected single band raster in {path}, got shape {data.shape}")
    if scale is None:
        raise RasterError(f"{path} is missing GSD metadata (ModelPixelScaleTag)")
    sx, sy = float(scale[0]), float(scale[1])
    if not math.isclose(sx, sy, rel_tol=1e-9):
        raise RasterError(f"{path} has non-square pixels ({sx} x {sy})")
    origin = (0.0, 0.0)
    if tiepoint is not None:
        tp = tiepoint
        origin = (float(tp[3]) - float(tp[0]) * sx, float(tp[4]) + float(tp[1]) * sy)
    nodata = None
    if nodata_tag is not None:
        text = str(nodata_tag).strip("\x00 ")
        if text and text.lower() != "none":
            nodata = float(text)
    return data, sx, nodata, origin


def _write_geotiff(path: Path, data: np.ndarray, gsd: float, nodata, origin):
    geokeys = (
        1, 1, 0, 1,  # version 1.1.0, one key
        1025, 0, 1, 1,  # GTRasterTypeGeoKey = PixelIsArea
    )
    extratags = [
        (_TAG_PIXEL_SCALE, "d", 3, (float(gsd), float(gsd), 0.0), False),
        (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, origin[0], origin[1], 0.0), False),
        (_TAG_GEOKEYS, "H", len(geokeys), geokeys, False),
    ]
    if nodata is not None:
        extratags.append((_TAG_GDAL_NODATA, "s", 0, repr(float(nodata)), False))
    tifffile.imwrite(path, data, photometric="minisblack", extratags=extratags)


def _read_any(path) -> tuple[np.ndarray, float, float | None, tuple[float, float]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    if _is_raw(path):
        return _read_raw(path)
    return _read_geotiff(path)


def load_raster(path) -> HeightMap:
    """Load a single-band height raster (GeoTIFF, or ``.raw`` + ``.hdr``)."""
    data, gsd, nodata, origin = _read_any(path)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float32)
    hm = HeightMap(data, gsd, nodata=nodata, origin=origin)
    hm.check_finite()
    return hm


def load_labels(path) -> RoofClassMap:
    data, gsd, _, origin = _read_any(path)
    return RoofClassMap(data, gsd=gsd, origin=origin)


def save_raster(raster: HeightMap | RoofClassMap, path) -> None:
    """Write a height map as float32 or a label map as uint8.

    Paths ending in ``.raw``/``.bin`` use the raw fallback with a ``.hdr``
    sidecar; anything else is written as GeoTIFF.
    """
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise OSError(f"cannot write to {parent}")
    if isinstance(raster, HeightMap):
        raster.check_finite()
        data = raster.values.astype(np.float32)
        nodata = raster.nodata
    elif isinstance(raster, RoofClassMap):
        data = raster.labels.astype(np.uint8)
        nodata = None
    else:
        raise TypeError(f"cannot save {type(raster).__name__}")
    writer = _write_raw if _is_raw(path) else _write_geotiff
    writer(path, np.ascontiguousarray(data), raster.gsd, nodata, raster.origin)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _paired_residuals(pred: HeightMap, target: HeightMap) -> np.ndarray:
    if pred.shape != target.shape:
        raise RasterError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if not math.isclose(pred.gsd, target.gsd, rel_tol=1e-9):
        raise RasterError(f"gsd mismatch: {pred.gsd} vs {target.gsd}")
    valid = pred.valid_mask() & target.valid_mask()
    if not valid.any():
        raise RasterError("no valid cells shared by prediction and target")
    return pred.values[valid].astype(np.float64) - target.values[valid].astype(np.float64)


def rmse(pred: HeightMap, target: HeightMap) -> float:
    """Root of the mean squared residual over cells valid in both maps."""
    d = _paired_residuals(pred, target)
    return float(np.sqrt(np.mean(d * d)))


def mae(pred: HeightMap, target: HeightMap) -> float:
    d = _paired_residuals(pred, target)
    return float(np.mean(np.abs(d)))


def confusion_matrix(pred: np.ndarray, target: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``cm[t, p]`` counts pixels with target ``t`` predicted as ``p``."""
    idx = target.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise RasterError("mIoU undefined: every class has an empty union")
    return float(np.mean(inter[present] / union[present]))


def miou(pred: RoofClassMap, target: RoofClassMap) -> float:
    """Mean IoU over classes whose union is non-empty."""
    if pred.shape != target.shape:
        raise RasterError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return miou_from_confusion(confusion_matrix(pred.labels, target.labels))


def evaluate(pred: HeightMap, target: HeightMap, pred_mask=None, target_mask=None) -> Metrics:
    m = Metrics(rmse(pred, target), mae(pred, target))
    if pred_mask is not None and target_mask is not None:
        m.miou = miou(pred_mask, target_mask)
    return m


# ---------------------------------------------------------------------------
# Differential geometry
# ---------------------------------------------------------------------------


def _require_2x2(hm: HeightMap):
    if hm.rows < 2 or hm.cols < 2:
        raise RasterError(f"need at least 2x2 cells, got {hm.rows}x{hm.cols}")


def image_gradients(hm: HeightMap) -> tuple[np.ndarray, np.ndarray]:
    """``(dh/dx, dh/dy)`` in m/m with x along columns and y along rows.

    Central differences inside, one-sided at the border; nodata spreads to
    every cell whose stencil touches it.
    """
    _require_2x2(hm)
    d_row, d_col = np.gradient(hm.masked(), hm.gsd)
    return d_col, d_row


def normals_from_gradients(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    n = np.stack([-dx, -dy, np.ones_like(dx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def surface_normals(hm: HeightMap) -> NormalField:
    """Unit normals of ``(-dh/dx, -dh/dy, 1)``; NaN where nodata propagates."""
    dx, dy = image_gradients(hm)
    return NormalField(normals_from_gradients(dx, dy))


_NEIGHBORS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def _shifted(a: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """``out[r, c] = a[r + dr, c + dc]`` with ``fill`` outside the array."""
    out = np.full_like(a, fill)
    rows, cols = a.shape
    dst_r = slice(max(0, -dr), rows - max(0, dr))
    dst_c = slice(max(0, -dc), cols - max(0, dc))
    src_r = slice(max(0, dr), rows + min(0, dr))
    src_c = slice(max(0, dc), cols + min(0, dc))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out


def max_rate_of_change(hm: HeightMap, mask: np.ndarray | None = None) -> np.ndarray:
    """Largest ``|dh| / distance`` to any of the 8 neighbours (m/m).

    With ``mask`` given, only neighbour pairs inside the mask are compared;
    cells without any comparable neighbour get 0. Nodata centers yield NaN.
    """
    _require_2x2(hm)
    h = hm.masked()
    valid = ~np.isnan(h)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != h.shape:
            raise RasterError(f"mask shape {mask.shape} does not match {h.shape}")
        valid &= mask
    rate = np.zeros_like(h)
    for dr, dc in _NEIGHBORS:
        nb = _shifted(h, dr, dc, np.nan)
        nb_ok = _shifted(valid, dr, dc, False) & valid
        dist = hm.gsd * (math.sqrt(2.0) if dr and dc else 1.0)
        r = np.where(nb_ok, np.abs(np.where(nb_ok, nb, 0.0) - np.where(nb_ok, h, 0.0)) / dist, 0.0)
        np.maximum(rate, r, out=rate)
    rate[np.isnan(h)] = np.nan
    return rate


def slope(hm: HeightMap, mask: np.ndarray | None = None) -> np.ndarray:
    """Slope in degrees from the steepest 8-neighbour rate of change."""
    return np.degrees(np.arctan(max_rate_of_change(hm, mask)))
