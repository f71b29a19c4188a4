"""Target DSM and roof-type labels from roof polygons plus a terrain model.

Roof faces are triangulated (ear clipping refined to a constrained Delaunay
triangulation by edge flips), rasterized with barycentric interpolation at
pixel centers, composed over the DEM, and labelled flat/sloped by slope.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import HeightMap, RasterError, RoofClassMap, image_gradients, slope

logger = logging.getLogger(__name__)

DEFAULT_SLOPE_THRESHOLD = 10.0
ASPECT_UNDEFINED = -1.0

_AREA_EPS = 1e-12


class PolygonError(ValueError):
    pass


@dataclass
class RoofPolygon:
    building_id: str
    ring: np.ndarray  # (n, 3) meters, open ring

    def footprint_area(self) -> float:
        return abs(signed_area(self.ring[:, :2]))


@dataclass
class RoofPolygonSet:
    polygons: list[RoofPolygon]

    def __iter__(self):
        return iter(self.polygons)

    def __len__(self):
        return len(self.polygons)

    def footprint_area(self) -> float:
        return sum(p.footprint_area() for p in self.polygons)

    def building_ids(self) -> list[str]:
        return sorted({p.building_id for p in self.polygons})


@dataclass
class TriangleSet:
    building_ids: list[str]
    vertices: np.ndarray  # (m, 3, 3)

    def __len__(self):
        return len(self.building_ids)

    def areas(self) -> np.ndarray:
        """Footprint (xy) area of each triangle."""
        a, b, c = self.vertices[:, 0, :2], self.vertices[:, 1, :2], self.vertices[:, 2, :2]
        return 0.5 * np.abs(_cross(b - a, c - a))

    @classmethod
    def empty(cls) -> TriangleSet:
        return cls([], np.zeros((0, 3, 3)))


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    gsd: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Map coordinates ``(x[cols], y[rows])`` of pixel centers."""
        x = self.origin_x + (np.arange(self.cols) + 0.5) * self.gsd
        y = self.origin_y - (np.arange(self.rows) + 0.5) * self.gsd
        return x, y

    @classmethod
    def of(cls, hm: HeightMap) -> GridSpec:
        return cls(hm.rows, hm.cols, hm.gsd, hm.origin[0], hm.origin[1])


# ---------------------------------------------------------------------------
# Polygon I/O and validation
# ---------------------------------------------------------------------------


def _cross(u: np.ndarray, v: np.ndarray):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def signed_area(xy: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise rings (x east, y north)."""
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) <= _AREA_EPS else (1 if v > 0 else -1)

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2, o3, o4 = orient(p1, p2, q1), orient(p1, p2, q2), orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return (
        (o1 == 0 and on_segment(p1, p2, q1))
        or (o2 == 0 and on_segment(p1, p2, q2))
        or (o3 == 0 and on_segment(q1, q2, p1))
        or (o4 == 0 and on_segment(q1, q2, p2))
    )


def _drop_collinear(ring: np.ndarray) -> np.ndarray:
    keep = []
    n = len(ring)
    for i in range(n):
        a, b, c = ring[i - 1, :2], ring[i, :2], ring[(i + 1) % n, :2]
        scale = max(np.linalg.norm(b - a) * np.linalg.norm(c - b), _AREA_EPS)
        if abs(_cross(b - a, c - b)) > 1e-12 * scale:
            keep.append(i)
    return ring[keep]


def validate_ring(ring, planarity_tol: float = 1e-3) -> np.ndarray:
    """Return a cleaned open ring or raise :class:`PolygonError`."""
    ring = np.asarray(ring, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 3:
        raise PolygonError(f"ring must be a list of [x, y, z] vertices, got shape {ring.shape}")
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(ring) < 3:
        raise PolygonError("ring needs at least 3 distinct vertices")
    if not np.all(np.isfinite(ring)):
        raise PolygonError("ring contains non-finite coordinates")
    n = len(ring)
    for i in range(n):
        for j in range(i + 1, n):
            # adjacent edges share a vertex and are checked via collinearity below
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(ring[i, :2], ring[(i + 1) % n, :2], ring[j, :2], ring[(j + 1) % n, :2]):
                raise PolygonError(f"self-intersecting ring (edges {i} and {j})")
    ring = _drop_collinear(ring)
    if len(ring) < 3 or abs(signed_area(ring[:, :2])) <= _AREA_EPS:
        raise PolygonError("collinear ring has no footprint area")
    centered = ring - ring.mean(axis=0)
    if len(ring) > 3:
        normal = np.linalg.svd(centered)[2][-1]
        off_plane = np.abs(centered @ normal).max()
        if off_plane > planarity_tol:
            raise PolygonError(f"ring is not planar (max deviation {off_plane:.3g} m)")
    return ring


def parse_polygons(doc) -> RoofPolygonSet:
    """Build a polygon set from ``[{building_id, rings: [[[x, y, z], ...]]}]``."""
    polys = []
    for entry in doc:
        bid = str(entry["building_id"])
        for ring in entry["rings"]:
            polys.append(RoofPolygon(bid, validate_ring(ring)))
    return RoofPolygonSet(polys)


def load_polygons(path) -> RoofPolygonSet:
    with open(path) as f:
        return parse_polygons(json.load(f))


def polygons_to_json(polys: RoofPolygonSet) -> list[dict]:
    grouped: dict[str, list] = {}
    for p in polys:
        grouped.setdefault(p.building_id, []).append(p.ring.tolist())
    return [{"building_id": bid, "rings": rings} for bid, rings in grouped.items()]


def save_polygons(polys: RoofPolygonSet, path):
    Path(path).write_text(json.dumps(polygons_to_json(polys), indent=1))


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def _point_in_triangle(p, a, b, c) -> bool:
    """Closed test for a counter-clockwise triangle."""
    return (
        _cross(b - a, p - a) >= -_AREA_EPS
        and _cross(c - b, p - b) >= -_AREA_EPS
        and _cross(a - c, p - c) >= -_AREA_EPS
    )


def _ear_clip(xy: np.ndarray) -> list[tuple[int, int, int]]:
    idx = list(range(len(xy)))
    tris = []
    guard = 0
    while len(idx) > 3:
        n = len(idx)
        for k in range(n):
            i, j, l = idx[k - 1], idx[k], idx[(k + 1) % n]
            a, b, c = xy[i], xy[j], xy[l]
            if _cross(b - a, c - b) <= _AREA_EPS:
                continue  # reflex or degenerate corner
            if any(_point_in_triangle(xy[m], a, b, c) for m in idx if m not in (i, j, l)):
                continue
            tris.append((i, j, l))
            del idx[k]
            break
        else:
            raise PolygonError("ear clipping failed; ring is not simple")
        guard += 1
        if guard > len(xy) ** 2:
            raise PolygonError("ear clipping did not terminate")
    tris.append(tuple(idx))
    return tris


def _in_circumcircle(a, b, c, d) -> bool:
    """True if ``d`` lies strictly inside the circumcircle of CCW ``abc``."""
    m = np.array([
        [a[0] - d[0], a[1] - d[1], (a[0] - d[0]) ** 2 + (a[1] - d[1]) ** 2],
        [b[0] - d[0], b[1] - d[1], (b[0] - d[0]) ** 2 + (b[1] - d[1]) ** 2],
        [c[0] - d[0], c[1] - d[1], (c[0] - d[0]) ** 2 + (c[1] - d[1]) ** 2],
    ])
    scale = max(np.abs(m).max(), 1.0) ** 2
    return float(np.linalg.det(m)) > 1e-12 * scale


def _delaunay_flip(xy: np.ndarray, tris: list[tuple[int, int, int]], boundary: set) -> list[tuple[int, int, int]]:
    """Lawson flips on interior edges until the triangulation is locally Delaunay."""
    tris = [tuple(t) for t in tris]
    for _ in range(10 * len(tris) ** 2 + 10):
        edge_owner: dict[frozenset, list[int]] = {}
        for t_i, t in enumerate(tris):
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                edge_owner.setdefault(frozenset(e), []).append(t_i)
        flipped = False
        for edge, owners in edge_owner.items():
            if len(owners) != 2 or edge in boundary:
                continue
            t1, t2 = tris[owners[0]], tris[owners[1]]
            u, v = tuple(edge)
            p = next(x for x in t1 if x not in edge)
            q = next(x for x in t2 if x not in edge)
            # orient t1 as (u, v, p) counter-clockwise
            if _cross(xy[v] - xy[u], xy[p] - xy[u]) < 0:
                u, v = v, u
            if not _in_circumcircle(xy[u], xy[v], xy[p], xy[q]):
                continue
            # flip only if both new triangles (p, u, q) and (p, q, v) are counter-clockwise
            if _cross(xy[u] - xy[p], xy[q] - xy[p]) <= _AREA_EPS or _cross(xy[q] - xy[p], xy[v] - xy[p]) <= _AREA_EPS:
                continue
            tris[owners[0]] = (p, u, q)
            tris[owners[1]] = (p, q, v)
            flipped = True
            break
        if not flipped:
            return tris
    raise PolygonError("edge flipping did not converge")


def triangulate_ring(ring: np.ndarray) -> list[np.ndarray]:
    """Triangles (each a 3x3 array) covering a validated simple ring."""
    xy = ring[:, :2]
    order = np.arange(len(ring))
    if signed_area(xy) < 0:
        order = order[::-1]
    ring = ring[order]
    xy = ring[:, :2]
    tris = _ear_clip(xy)
    n = len(ring)
    boundary = {frozenset((i, (i + 1) % n)) for i in range(n)}
    tris = _delaunay_flip(xy, tris, boundary)
    return [ring[list(t)] for t in tris]


def triangulate_roofs(polys: RoofPolygonSet) -> TriangleSet:
    ids, verts = [], []
    for poly in polys:
        for tri in triangulate_ring(poly.ring):
            ids.append(poly.building_id)
            verts.append(tri)
    if not verts:
        return TriangleSet.empty()
    return TriangleSet(ids, np.stack(verts))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------


def _tie_includes(d: np.ndarray) -> bool:
    # Half-open rule: of the two opposite directions of a shared edge exactly one passes.
    return bool(d[1] > 0 or (d[1] == 0 and d[0] < 0))


def barycentric_weights(tri_xy: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Weights ``(..., 3)`` of points relative to a 2-D triangle."""
    a, b, c = tri_xy
    area2 = _cross(b - a, c - a)
    p = np.stack([px, py], axis=-1)
    wa = _cross(c - b, p - b) / area2
    wb = _cross(a - c, p - c) / area2
    wc = _cross(b - a, p - a) / area2
    return np.stack([wa, wb, wc], axis=-1)


def rasterize_triangles(tris: TriangleSet, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel roof height (``-inf`` where uncovered) and owning triangle index (-1)."""
    heights = np.full((grid.rows, grid.cols), -np.inf)
    owner = np.full((grid.rows, grid.cols), -1, dtype=np.int64)
    xs, ys = grid.pixel_centers()
    overlaps = 0
    for t_i in range(len(tris)):
        tri = tris.vertices[t_i]
        xy = tri[:, :2].copy()
        z = tri[:, 2]
        if _cross(xy[1] - xy[0], xy[2] - xy[0]) < 0:
            xy = xy[[0, 2, 1]]
            z = z[[0, 2, 1]]
        c0 = max(int(math.floor((xy[:, 0].min() - grid.origin_x) / grid.gsd - 0.5)), 0)
        c1 = min(int(math.ceil((xy[:, 0].max() - grid.origin_x) / grid.gsd - 0.5)), grid.cols - 1)
        r0 = max(int(math.floor((grid.origin_y - xy[:, 1].max()) / grid.gsd - 0.5)), 0)
        r1 = min(int(math.ceil((grid.origin_y - xy[:, 1].min()) / grid.gsd - 0.5)), grid.rows - 1)
        if c0 > c1 or r0 > r1:
            continue
        px, py = np.meshgrid(xs[c0:c1 + 1], ys[r0:r1 + 1])
        p = np.stack([px, py], axis=-1)
        inside = np.ones(px.shape, dtype=bool)
        for k in range(3):
            a, b = xy[k], xy[(k + 1) % 3]
            e = _cross(b - a, p - a)
            inside &= (e > 0) | ((e == 0) & _tie_includes(b - a))
        if not inside.any():
            continue
        w = barycentric_weights(xy, px, py)
        h = w @ z
        win_h = heights[r0:r1 + 1, c0:c1 + 1]
        win_o = owner[r0:r1 + 1, c0:c1 + 1]
        taken = inside & (win_o >= 0)
        if taken.any():
            other = np.array([tris.building_ids[o] != tris.building_ids[t_i] for o in win_o[taken]])
            overlaps += int(other.sum())
        better = inside & (h > win_h)
        win_h[better] = h[better]
        win_o[better] = t_i
    if overlaps:
        logger.debug("%d pixels covered by roofs of more than one building; kept the highest", overlaps)
    return heights, owner


def sample_dem(dem: HeightMap, grid: GridSpec) -> np.ndarray:
    """Nearest DEM cell for every grid pixel center; raises if outside the DEM."""
    xs, ys = grid.pixel_centers()
    cols = np.floor((xs - dem.origin[0]) / dem.gsd).astype(np.int64)
    rows = np.floor((dem.origin[1] - ys) / dem.gsd).astype(np.int64)
    if cols.min() < 0 or cols.max() >= dem.cols or rows.min() < 0 or rows.max() >= dem.rows:
        raise RasterError("grid extends outside the DEM extent")
    return dem.values[np.ix_(rows, cols)].astype(np.float64)


def rasterize_target_dsm(tris: TriangleSet, dem: HeightMap, grid: GridSpec | None = None) -> tuple[HeightMap, np.ndarray]:
    """Compose rasterized roofs over the DEM.

    Returns the target height map and the boolean building footprint.
    """
    grid = grid or GridSpec.of(dem)
    ground = sample_dem(dem, grid)
    roofs, owner = rasterize_triangles(tris, grid)
    footprint = owner >= 0
    values = np.where(footprint, roofs, ground)
    return HeightMap(values, grid.gsd, origin=(grid.origin_x, grid.origin_y)), footprint


def classify_roofs(target: HeightMap, footprint: np.ndarray, slope_threshold: float = DEFAULT_SLOPE_THRESHOLD) -> RoofClassMap:
    """0 off the footprint, 1 where roof slope is below the threshold, else 2.

    Slope is evaluated between footprint pixels only, so the drop from eave
    to ground does not mark roof edges as sloped.
    """
    footprint = np.asarray(footprint, dtype=bool)
    if footprint.shape != target.shape:
        raise RasterError(f"footprint shape {footprint.shape} does not match {target.shape}")
    labels = np.zeros(target.shape, dtype=np.uint8)
    if footprint.any():
        s = slope(target, mask=footprint)
        labels[footprint & (s < slope_threshold)] = 1
        labels[footprint & ~(s < slope_threshold)] = 2
    return RoofClassMap(labels, gsd=target.gsd, origin=target.origin)


def aspect(hm: HeightMap) -> np.ndarray:
    """Downslope compass direction in degrees (north 0, east 90, clockwise).

    Cells with zero gradient get :data:`ASPECT_UNDEFINED`; nodata gives NaN.
    """
    dx, d_row = image_gradients(hm)
    dy_north = -d_row
    east, north = -dx, -dy_north
    out = np.degrees(np.arctan2(east, north)) % 360.0
    flat = np.hypot(east, north) <= 1e-12
    out[flat] = ASPECT_UNDEFINED
    return out
