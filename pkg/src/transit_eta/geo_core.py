"""Geographic and planar geometry primitives.

Coordinates are ``(lon, lat)`` in degrees throughout, matching GeoJSON order.
Douglas-Peucker tolerances and dilation radii are expressed in raw coordinate
degrees; lengths along routes are great-circle meters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, MultiPolygon, Point, Polygon

EARTH_RADIUS_M = 6_371_000.0
MAX_PROJECTION_DEG = 1.0

# Planar polygons are shapely polygons; the alias documents intent at call sites.
PlanarPolygon = Polygon


class GeometryError(ValueError):
    """Raised for invalid geometric inputs."""


class GeoPoint(NamedTuple):
    lon: float
    lat: float

    def validate(self) -> "GeoPoint":
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise GeometryError(f"non-finite coordinate: {self}")
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise GeometryError(f"coordinate out of range: {self}")
        return self


def haversine_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Great-circle distance in meters between two (lon, lat) points."""
    lon1, lat1, lon2, lat2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = (
        math.sin((lat2 - lat1) / 2) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    )
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised haversine over (..., 2) arrays of (lon, lat)."""
    a = np.radians(np.asarray(a, dtype=float))
    b = np.radians(np.asarray(b, dtype=float))
    dlat = b[..., 1] - a[..., 1]
    dlon = b[..., 0] - a[..., 0]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[..., 1]) * np.cos(b[..., 1]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def polyline_length_m(coords: np.ndarray) -> float:
    coords = np.asarray(coords, dtype=float)
    if len(coords) < 2:
        return 0.0
    return float(haversine_array(coords[:-1], coords[1:]).sum())


@dataclass(frozen=True)
class RoutePolyline:
    """Ordered route points with cumulative arc length in meters."""

    route_id: str
    points: np.ndarray
    cumulative_m: np.ndarray = field(repr=False)

    @classmethod
    def from_points(cls, route_id: str, points: Iterable[Sequence[float]]) -> "RoutePolyline":
        pts = np.asarray([tuple(p) for p in points], dtype=float).reshape(-1, 2)
        for p in pts:
            GeoPoint(float(p[0]), float(p[1])).validate()
        if len(pts) > 1:
            keep = np.ones(len(pts), dtype=bool)
            keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
            pts = pts[keep]
        if len(pts) < 2:
            raise GeometryError(f"route {route_id!r} needs at least 2 distinct points")
        steps = haversine_array(pts[:-1], pts[1:])
        cum = np.concatenate([[0.0], np.cumsum(steps)])
        pts.setflags(write=False)
        cum.setflags(write=False)
        return cls(str(route_id), pts, cum)

    @property
    def length_m(self) -> float:
        return float(self.cumulative_m[-1])

    def __len__(self) -> int:
        return len(self.points)

    def point_at(self, offset_m: float) -> np.ndarray:
        """Interpolated (lon, lat) at an arc offset, clamped to the route."""
        offset_m = min(max(offset_m, 0.0), self.length_m)
        i = int(np.searchsorted(self.cumulative_m, offset_m, side="right")) - 1
        i = min(max(i, 0), len(self.points) - 2)
        span = self.cumulative_m[i + 1] - self.cumulative_m[i]
        t = 0.0 if span <= 0 else (offset_m - self.cumulative_m[i]) / span
        return self.points[i] + t * (self.points[i + 1] - self.points[i])

    def sub_polyline(self, start_m: float, end_m: float) -> np.ndarray:
        """Coordinates of the route between two arc offsets (inclusive ends)."""
        inner = (self.cumulative_m > start_m) & (self.cumulative_m < end_m)
        return np.vstack([self.point_at(start_m), self.points[inner], self.point_at(end_m)])


def _point_segment_dist2(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from points ``p`` (k, 2) to segment a-b."""
    d = b - a
    dd = float(d @ d)
    if dd == 0.0:
        diff = p - a
        return np.einsum("ij,ij->i", diff, diff)
    t = np.clip(((p - a) @ d) / dd, 0.0, 1.0)
    proj = a + t[:, None] * d
    diff = p - proj
    return np.einsum("ij,ij->i", diff, diff)


def douglas_peucker(line: RoutePolyline | np.ndarray, epsilon: float) -> list[int]:
    """Indices of the points kept by Ramer-Douglas-Peucker at tolerance ``epsilon``.

    Distances are measured in the coordinate units of ``line`` (degrees for
    routes). The first and last indices are always kept.
    """
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise GeometryError(f"epsilon must be a positive finite number, got {epsilon!r}")
    pts = line.points if isinstance(line, RoutePolyline) else np.asarray(line, dtype=float)
    n = len(pts)
    if n < 2:
        raise GeometryError("douglas_peucker needs at least 2 points")

    eps2 = epsilon * epsilon
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        d2 = _point_segment_dist2(pts[first + 1 : last], pts[first], pts[last])
        k = int(np.argmax(d2))
        if d2[k] > eps2:
            idx = first + 1 + k
            keep[idx] = True
            stack.append((first, idx))
            stack.append((idx, last))
    return np.flatnonzero(keep).tolist()


def max_deviation(points: np.ndarray, chain: np.ndarray) -> float:
    """Largest distance from any of ``points`` to the polyline ``chain``."""
    points = np.asarray(points, dtype=float)
    chain = np.asarray(chain, dtype=float)
    best = np.full(len(points), np.inf)
    for a, b in zip(chain[:-1], chain[1:]):
        best = np.minimum(best, _point_segment_dist2(points, a, b))
    return float(np.sqrt(best.max())) if len(points) else 0.0


def dilate_polyline(
    line: Sequence[Sequence[float]] | np.ndarray, radius: float, min_sides: int = 16
) -> Polygon:
    """Minkowski sum of a polyline with a disc of ``radius``.

    The disc is approximated by a regular polygon with at least ``min_sides``
    sides (rounded up to a multiple of four).
    """
    if not (math.isfinite(radius) and radius > 0):
        raise GeometryError(f"radius must be positive, got {radius!r}")
    coords = np.asarray(line, dtype=float).reshape(-1, 2)
    quad_segs = max(1, math.ceil(min_sides / 4))
    if len(coords) == 1 or np.all(coords == coords[0]):
        geom = Point(coords[0]).buffer(radius, quad_segs=quad_segs)
    else:
        geom = LineString(coords).buffer(radius, quad_segs=quad_segs)
    if isinstance(geom, MultiPolygon):  # pragma: no cover - buffer of a line is connected
        geom = max(geom.geoms, key=lambda g: g.area)
    return shapely.geometry.polygon.orient(geom, 1.0)


def _polygons_of(geom, grid_size: float | None) -> list[Polygon]:
    if geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        parts = [geom]
    else:
        parts = [g for g in getattr(geom, "geoms", []) if isinstance(g, Polygon)]
    tol = 0.0 if grid_size is None else grid_size * grid_size
    return [shapely.geometry.polygon.orient(p, 1.0) for p in parts if p.area > tol]


def _check_degenerate(*polys: Polygon) -> bool:
    for p in polys:
        if p.is_empty or p.area <= 0.0:
            warnings.warn("degenerate zero-area polygon in boolean operation", RuntimeWarning)
            return True
    return False


def polygon_intersection(
    a: Polygon, b: Polygon, grid_size: float | None = None
) -> list[Polygon]:
    """Pieces of ``a ∩ b``; empty when either input is degenerate."""
    if _check_degenerate(a, b):
        return []
    return _polygons_of(shapely.intersection(a, b, grid_size=grid_size), grid_size)


def polygon_difference(a: Polygon, b: Polygon, grid_size: float | None = None) -> list[Polygon]:
    """Pieces of ``a \\ b``; empty when either input is degenerate."""
    if _check_degenerate(a, b):
        return []
    return _polygons_of(shapely.difference(a, b, grid_size=grid_size), grid_size)


def total_area(polys: Iterable[Polygon]) -> float:
    return float(sum(p.area for p in polys))


def project_local(points: Sequence[Sequence[float]] | np.ndarray, origin: Sequence[float]) -> np.ndarray:
    """Equirectangular projection to meters around ``origin``.

    Valid within one degree of the origin in each axis.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    d = pts - np.asarray(origin, dtype=float)
    if np.any(np.abs(d) > MAX_PROJECTION_DEG):
        raise GeometryError("point lies more than 1 degree from projection origin")
    k = math.pi / 180.0 * EARTH_RADIUS_M
    coslat = math.cos(math.radians(origin[1]))
    return np.column_stack([d[:, 0] * k * coslat, d[:, 1] * k])


def unproject_local(xy: np.ndarray, origin: Sequence[float]) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    k = math.pi / 180.0 * EARTH_RADIUS_M
    coslat = math.cos(math.radians(origin[1]))
    return np.column_stack([origin[0] + xy[:, 0] / (k * coslat), origin[1] + xy[:, 1] / k])


def _nearest_on_chain(p_xy: np.ndarray, chain_xy: np.ndarray, cumulative: np.ndarray):
    """Vectorised nearest-point search of many points against one planar chain.

    Returns (distance, arc offset); ties resolve to the smaller offset because
    ``argmin`` takes the first minimum and segments are ordered along the chain.
    """
    a = chain_xy[:-1]
    d = chain_xy[1:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd_safe = np.where(dd > 0, dd, 1.0)
    rel = p_xy[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("kij,ij->ki", rel, d) / dd_safe, 0.0, 1.0)
    t = np.where(dd > 0, t, 0.0)
    diff = rel - t[..., None] * d[None, :, :]
    dist2 = np.einsum("kij,kij->ki", diff, diff)
    # round away float noise so geometric ties prefer the earlier segment
    scale = max(1.0, float(np.abs(chain_xy).max()))
    dist2 = np.round(dist2 / (scale * scale), 12)
    j = np.argmin(dist2, axis=1)
    rows = np.arange(len(p_xy))
    seg_len = cumulative[1:] - cumulative[:-1]
    offset = cumulative[j] + t[rows, j] * seg_len[j]
    dist = np.sqrt(np.einsum("ij,ij->i", diff[rows, j], diff[rows, j]))
    return dist, offset


def nearest_point_on_polyline(p: Sequence[float], line: RoutePolyline) -> tuple[float, float]:
    """Distance (m) from ``p`` to ``line`` and the arc offset (m) of the nearest point."""
    origin = (float(p[0]), float(p[1]))
    chain = project_local(line.points, origin)
    dist, off = _nearest_on_chain(np.zeros((1, 2)), chain, np.asarray(line.cumulative_m))
    return float(dist[0]), float(min(max(off[0], 0.0), line.length_m))


def snap_points(points: np.ndarray, line: RoutePolyline, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Batch version of :func:`nearest_point_on_polyline` for many points.

    Projects around the route's first vertex; accurate to well under a meter
    at city scale.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros(0), np.zeros(0)
    origin = tuple(line.points[0])
    chain = project_local(line.points, origin)
    xy = project_local(pts, origin)
    cum = np.asarray(line.cumulative_m)
    dists, offs = [], []
    for s in range(0, len(xy), chunk):
        d, o = _nearest_on_chain(xy[s : s + chunk], chain, cum)
        dists.append(d)
        offs.append(o)
    return np.concatenate(dists), np.clip(np.concatenate(offs), 0.0, line.length_m)
