"""Region splits, shifted-grid patch sampling and per-patch height normalization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .raster import HeightMap, RasterError, RoofClassMap

HEIGHT_RANGE = 75.0  # meters mapped to one normalized unit


@dataclass(frozen=True)
class Region:
    row: int
    col: int
    rows: int
    cols: int

    def overlaps(self, other: Region) -> bool:
        return (self.row < other.row + other.rows and other.row < self.row + self.rows
                and self.col < other.col + other.cols and other.col < self.col + self.cols)

    @classmethod
    def from_value(cls, v) -> Region:
        if isinstance(v, Region):
            return v
        if isinstance(v, dict):
            return cls(int(v["row"]), int(v["col"]), int(v["rows"]), int(v["cols"]))
        return cls(*(int(x) for x in v))


@dataclass(frozen=True)
class SplitSpec:
    train: Region
    val: Region
    test: Region

    def __post_init__(self):
        named = [("train", self.train), ("val", self.val), ("test", self.test)]
        for i, (na, a) in enumerate(named):
            for nb, b in named[i + 1:]:
                if a.overlaps(b):
                    raise ValueError(f"split regions {na} and {nb} overlap")

    def check_extent(self, rows: int, cols: int):
        for name in ("train", "val", "test"):
            r = getattr(self, name)
            if r.row < 0 or r.col < 0 or r.row + r.rows > rows or r.col + r.cols > cols:
                raise ValueError(f"split region {name} {r} exceeds the {rows}x{cols} extent")

    @classmethod
    def from_dict(cls, d: dict) -> SplitSpec:
        return cls(*(Region.from_value(d[k]) for k in ("train", "val", "test")))

    def to_dict(self) -> dict:
        return {k: [getattr(self, k).row, getattr(self, k).col, getattr(self, k).rows, getattr(self, k).cols]
                for k in ("train", "val", "test")}


@dataclass
class SceneSample:
    input: np.ndarray  # stereo heights, meters
    target: np.ndarray  # target heights, meters
    roof: np.ndarray  # labels
    row: int = 0
    col: int = 0


@dataclass
class SceneArea:
    """Aligned rasters restricted to one region."""

    stereo: np.ndarray
    target: np.ndarray
    roof: np.ndarray
    region: Region
    gsd: float = 0.5

    def __post_init__(self):
        if not (self.stereo.shape == self.target.shape == self.roof.shape):
            raise RasterError("stereo, target and roof rasters must share a shape")
        r = self.region
        if r.row < 0 or r.col < 0 or r.row + r.rows > self.stereo.shape[0] or r.col + r.cols > self.stereo.shape[1]:
            raise RasterError(f"region {r} exceeds raster extent {self.stereo.shape}")

    @classmethod
    def from_maps(cls, stereo: HeightMap, target: HeightMap, roof: RoofClassMap, region: Region | None = None) -> SceneArea:
        region = region or Region(0, 0, stereo.rows, stereo.cols)
        return cls(stereo.values, target.values, roof.labels, region, stereo.gsd)

    def crop(self, row: int, col: int, size: int) -> SceneSample:
        """Patch at region-relative ``(row, col)``."""
        r, c = self.region.row + row, self.region.col + col
        sl = (slice(r, r + size), slice(c, c + size))
        return SceneSample(self.stereo[sl], self.target[sl], self.roof[sl], r, c)


def grid_origins(rows: int, cols: int, patch_size: int) -> list[tuple[int, int]]:
    if rows < patch_size or cols < patch_size:
        raise RasterError(f"area {rows}x{cols} is smaller than patch size {patch_size}")
    return [(i * patch_size, j * patch_size) for i in range(rows // patch_size) for j in range(cols // patch_size)]


def epoch_sampler(area: SceneArea, patch_size: int = 256, max_shift: int = 256, seed: int = 0,
                  epoch_index: int = 0) -> Iterator[SceneSample]:
    """One randomized sweep over the area's patch grid.

    Each grid origin is shifted by up to ``max_shift`` pixels per axis and
    clamped so the patch stays inside the region.
    """
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    rows, cols = area.region.rows, area.region.cols
    origins = grid_origins(rows, cols, patch_size)
    rng = np.random.default_rng([seed, epoch_index])
    order = rng.permutation(len(origins))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(origins), 2))
    for k in order:
        r0, c0 = origins[k]
        r = int(np.clip(r0 + shifts[k, 0], 0, rows - patch_size))
        c = int(np.clip(c0 + shifts[k, 1], 0, cols - patch_size))
        yield area.crop(r, c, patch_size)


def grid_samples(area: SceneArea, patch_size: int) -> list[SceneSample]:
    """Unshifted, row-major patch grid (used for validation)."""
    return [area.crop(r, c, patch_size) for r, c in grid_origins(area.region.rows, area.region.cols, patch_size)]


@dataclass(frozen=True)
class NormRecord:
    shift: float
    scale: float = HEIGHT_RANGE

    def inverse(self, normalized: np.ndarray) -> np.ndarray:
        return normalized * self.scale + self.shift


def input_normalization(patch, scale: float = HEIGHT_RANGE) -> tuple[np.ndarray, NormRecord]:
    """Subtract the patch minimum and divide by a fixed height range."""
    values = patch.masked() if isinstance(patch, HeightMap) else np.asarray(patch, dtype=np.float64)
    finite = np.isfinite(values)
    if not finite.any():
        raise RasterError("patch holds no valid heights")
    shift = float(values[finite].min())
    return (values - shift) / scale, NormRecord(shift, scale)


def normalize_batch(samples: list[SceneSample], scale: float = HEIGHT_RANGE) -> dict:
    """Stack samples into float32 arrays, target normalized with the input's shift."""
    inputs = np.stack([s.input for s in samples]).astype(np.float64)
    shifts = inputs.reshape(len(samples), -1).min(axis=1)
    targets = np.stack([s.target for s in samples]).astype(np.float64)
    return {
        "input": ((inputs - shifts[:, None, None]) / scale).astype(np.float32)[:, None],
        "target": ((targets - shifts[:, None, None]) / scale).astype(np.float32)[:, None],
        "roof": np.stack([s.roof for s in samples]).astype(np.int64),
        "shift": shifts,
        "scale": scale,
    }
