"""Procedural urban scenes: noisy stereo-like DSM, clean target DSM, roof mask.

Buildings are axis-aligned boxes with flat or gabled roofs, emitted as roof
polygons and rendered through :mod:`dsmfilter.groundtruth`. Vegetation is
added to the corrupted surface only, as smooth radial canopies.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import groundtruth as gt
from .raster import HeightMap, RasterError, RoofClassMap

logger = logging.getLogger(__name__)

_MIN_CANOPY = 1e-3  # meters; thinner canopy is dropped so tree cells are unambiguous


@dataclass
class SceneSpec:
    rows: int = 256
    cols: int = 256
    gsd: float = 0.5
    building_count: int = 12
    flat_fraction: float = 0.5
    roof_pitch_range: tuple[float, float] = (25.0, 45.0)
    building_size_range: tuple[float, float] = (10.0, 30.0)
    building_height_range: tuple[float, float] = (6.0, 25.0)
    building_gap: float = 2.0
    tree_count: int = 40
    tree_height_range: tuple[float, float] = (3.0, 15.0)
    tree_radius_range: tuple[float, float] = (2.0, 8.0)
    noise_sigma: float = 1.0
    blur_radius: float = 1.0
    terrain_amplitude: float = 3.0
    base_elevation: float = 35.0
    slope_threshold: float = gt.DEFAULT_SLOPE_THRESHOLD
    placement_retries: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("roof_pitch_range", "building_size_range", "building_height_range",
                     "tree_height_range", "tree_radius_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.rows < 1 or self.cols < 1 or self.gsd <= 0:
            raise ValueError("scene extent must be positive")
        if self.building_count < 0 or self.tree_count < 0:
            raise ValueError("counts must be non-negative")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise_sigma and blur_radius must be non-negative")
        if not 0.0 <= self.flat_fraction <= 1.0:
            raise ValueError("flat_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class Building:
    building_id: str
    x0: float
    y0: float  # southern edge
    x1: float
    y1: float  # northern edge
    base: float
    eave: float
    flat: bool
    pitch: float = 0.0

    def rings(self) -> list[np.ndarray]:
        x0, y0, x1, y1 = self.x0, self.y0, self.x1, self.y1
        z = self.base + self.eave
        if self.flat:
            return [np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]])]
        rise = math.tan(math.radians(self.pitch))
        if (x1 - x0) >= (y1 - y0):  # ridge along x
            ym = 0.5 * (y0 + y1)
            zr = z + rise * (ym - y0)
            return [
                np.array([[x0, y0, z], [x1, y0, z], [x1, ym, zr], [x0, ym, zr]]),
                np.array([[x0, ym, zr], [x1, ym, zr], [x1, y1, z], [x0, y1, z]]),
            ]
        xm = 0.5 * (x0 + x1)
        zr = z + rise * (xm - x0)
        return [
            np.array([[x0, y0, z], [xm, y0, zr], [xm, y1, zr], [x0, y1, z]]),
            np.array([[xm, y0, zr], [x1, y0, z], [x1, y1, z], [xm, y1, zr]]),
        ]


@dataclass
class Scene:
    stereo: HeightMap
    target: HeightMap
    roof: RoofClassMap
    polygons: gt.RoofPolygonSet
    dem: HeightMap
    footprint: np.ndarray
    known_roof: np.ndarray  # roof class implied by each building's geometry
    tree_mask: np.ndarray
    buildings: list[Building] = field(default_factory=list)
    requested_buildings: int = 0

    def __iter__(self):
        # (stereo, target, roof, polygons) unpacking
        return iter((self.stereo, self.target, self.roof, self.polygons))


def _terrain(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    rr, cc = np.mgrid[0:spec.rows, 0:spec.cols].astype(np.float64)
    field_ = np.zeros((spec.rows, spec.cols))
    extent = max(spec.rows, spec.cols)
    for _ in range(4):
        wavelength = rng.uniform(0.6, 2.0) * extent
        theta = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        field_ += np.cos(2 * math.pi * (cc * math.cos(theta) + rr * math.sin(theta)) / wavelength + phase)
    span = field_.max() - field_.min()
    if span > 0:
        field_ = (field_ - field_.min()) / span
    return spec.base_elevation + spec.terrain_amplitude * field_


def _place_buildings(spec: SceneSpec, dem: HeightMap, rng: np.random.Generator) -> list[Building]:
    g = spec.gsd
    width_m, height_m = spec.cols * g, spec.rows * g
    top = height_m  # map y of the top edge (origin y)
    placed: list[Building] = []
    occupied: list[tuple[float, float, float, float]] = []
    for b in range(spec.building_count):
        for _ in range(spec.placement_retries):
            w = rng.uniform(*spec.building_size_range)
            h = rng.uniform(*spec.building_size_range)
            # snap to the pixel grid so footprints are crisp
            wc, hc = max(int(round(w / g)), 3), max(int(round(h / g)), 3)
            if wc + 2 > spec.cols or hc + 2 > spec.rows:
                continue
            c0 = int(rng.integers(1, spec.cols - wc))
            r0 = int(rng.integers(1, spec.rows - hc))
            x0, x1 = c0 * g, (c0 + wc) * g
            y1, y0 = top - r0 * g, top - (r0 + hc) * g
            gap = spec.building_gap
            if any(x0 < ox1 + gap and ox0 < x1 + gap and y0 < oy1 + gap and oy0 < y1 + gap
                   for ox0, oy0, ox1, oy1 in occupied):
                continue
            base = float(dem.values[r0:r0 + hc, c0:c0 + wc].max())
            flat = bool(rng.random() < spec.flat_fraction)
            pitch = 0.0 if flat else float(rng.uniform(*spec.roof_pitch_range))
            eave = float(rng.uniform(*spec.building_height_range))
            placed.append(Building(f"b{b:04d}", x0, y0, x1, y1, base, eave, flat, pitch))
            occupied.append((x0, y0, x1, y1))
            break
    if len(placed) < spec.building_count:
        logger.warning("placed %d of %d buildings without overlap", len(placed), spec.building_count)
    return placed


def _canopy(spec: SceneSpec, footprint: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    canopy = np.zeros((spec.rows, spec.cols))
    free = np.argwhere(~footprint)
    if len(free) == 0:
        return canopy
    for _ in range(spec.tree_count):
        r, c = free[rng.integers(len(free))]
        height = rng.uniform(*spec.tree_height_range)
        radius = rng.uniform(*spec.tree_radius_range) / spec.gsd
        k = int(math.ceil(radius))
        r0, r1 = max(r - k, 0), min(r + k + 1, spec.rows)
        c0, c1 = max(c - k, 0), min(c + k + 1, spec.cols)
        rr, cc = np.mgrid[r0:r1, c0:c1]
        dist = np.hypot(rr - r, cc - c)
        bump = np.where(dist < radius, height * np.cos(0.5 * math.pi * dist / radius) ** 2, 0.0)
        np.maximum(canopy[r0:r1, c0:c1], bump, out=canopy[r0:r1, c0:c1])
    canopy[footprint] = 0.0
    canopy[canopy < _MIN_CANOPY] = 0.0
    return canopy


def generate_scene(spec: SceneSpec) -> Scene:
    """Generate one scene; identical specs give bit-identical outputs."""
    rng = np.random.default_rng(spec.seed)
    origin = (0.0, spec.rows * spec.gsd)
    dem = HeightMap(_terrain(spec, rng), spec.gsd, origin=origin)
    buildings = _place_buildings(spec, dem, rng)

    polys = gt.RoofPolygonSet([gt.RoofPolygon(b.building_id, ring) for b in buildings for ring in b.rings()])
    tris = gt.triangulate_roofs(polys)
    grid = gt.GridSpec.of(dem)
    roofs, owner = gt.rasterize_triangles(tris, grid)
    footprint = owner >= 0
    target64 = np.where(footprint, roofs, dem.values)
    target = HeightMap(target64.astype(np.float32), spec.gsd, origin=origin)
    roof = gt.classify_roofs(target, footprint, spec.slope_threshold)

    kind = {b.building_id: (1 if b.flat else 2) for b in buildings}
    tri_kind = np.array([kind[bid] for bid in tris.building_ids] + [0], dtype=np.uint8)
    known = tri_kind[owner]  # owner == -1 picks the trailing 0

    canopy = _canopy(spec, footprint, rng)
    surface = target64 + canopy
    if spec.noise_sigma > 0:
        surface = surface + rng.normal(0.0, spec.noise_sigma, surface.shape)
    if spec.blur_radius > 0:
        surface = ndimage.gaussian_filter(surface, spec.blur_radius, mode="nearest")
    stereo = HeightMap(surface.astype(np.float32), spec.gsd, origin=origin)

    return Scene(
        stereo=stereo,
        target=target,
        roof=roof,
        polygons=polys,
        dem=HeightMap(dem.values.astype(np.float32), spec.gsd, origin=origin),
        footprint=footprint,
        known_roof=known,
        tree_mask=canopy > 0,
        buildings=buildings,
        requested_buildings=spec.building_count,
    )


def check_scene(scene: Scene, slope_threshold: float = gt.DEFAULT_SLOPE_THRESHOLD):
    """Raise if the roof mask disagrees with the classifier on the target."""
    again = gt.classify_roofs(scene.target, scene.footprint, slope_threshold)
    if not np.array_equal(again.labels, scene.roof.labels):
        raise RasterError("roof mask disagrees with classify_roofs")
