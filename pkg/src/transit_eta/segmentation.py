"""Route segmentation by message density and cross-route merging.

Each route is simplified with Douglas-Peucker; the break points delimit
segments. The tolerance is picked per route by grid search over the cost
``std(density) / mean(length)``. Segments from all routes are then dilated,
sorted by area and differenced against each other so that shared road
sections end up owned by a single segment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, MultiLineString, Polygon
from shapely.ops import unary_union

from .geo_core import (
    RoutePolyline,
    dilate_polyline,
    douglas_peucker,
    polygon_difference,
    polyline_length_m,
)
from .hexgrid import HexDensityMap, hexes_on_line
from .parallel import parallel_map

log = logging.getLogger(__name__)

EPS_MIN = 1e-4
EPS_MAX = 1e-3
DEFAULT_DILATION = 5e-4
SNAP_GRID = 1e-9


@dataclass
class Segment:
    """A road segment; ``parts`` holds one or more (k, 2) lon/lat polylines."""

    segment_id: str
    parts: tuple[np.ndarray, ...]
    length_m: float
    n_s: float
    source_route_ids: tuple[str, ...] = ()
    polygon: Polygon | None = field(default=None, repr=False)

    @property
    def density(self) -> float:
        return message_density(self.n_s, self.length_m)

    @property
    def geometry(self) -> np.ndarray:
        return np.vstack(self.parts)


@dataclass
class RouteSpan:
    """One traversal of a final segment by a route, as route arc offsets."""

    segment_index: int
    start_m: float
    end_m: float

    @property
    def length_m(self) -> float:
        return self.end_m - self.start_m


@dataclass
class SegmentNetwork:
    segments: list[Segment]
    adjacency: np.ndarray
    route_sequences: dict[str, list[RouteSpan]]
    boundary_pairs: set[tuple[int, int]] = field(default_factory=set)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def segment_ids(self) -> list[str]:
        return [s.segment_id for s in self.segments]

    def index_of(self, segment_id: str) -> int:
        return self.segment_ids.index(segment_id)


@dataclass
class EpsilonSearchResult:
    route_id: str
    grid: np.ndarray
    costs: np.ndarray
    segment_counts: np.ndarray
    best_epsilon: float

    @property
    def best_cost(self) -> float:
        return float(self.costs[list(self.grid).index(self.best_epsilon)])


def default_epsilon_grid(n: int = 20) -> np.ndarray:
    """``n`` log-spaced tolerances strictly inside (1e-4, 1e-3)."""
    return np.logspace(np.log10(EPS_MIN), np.log10(EPS_MAX), n + 2)[1:-1]


def segment_messages(a: Sequence[float], b: Sequence[float], dmap: HexDensityMap) -> float:
    """Average messages per trip along the chord a-b (sum of n_h over crossed hexes)."""
    return float(sum(dmap.get(h) for h in hexes_on_line(a, b, dmap.grid)))


def message_density(n_s: float, length_m: float) -> float:
    if not length_m > 0:
        raise ValueError(f"segment length must be positive, got {length_m!r}")
    return n_s / length_m


def segmentation_cost(segments: Sequence[Segment]) -> float:
    """Population std of densities over mean length; 0 for a single segment."""
    if not segments:
        raise ValueError("need at least one segment")
    dens = np.array([s.density for s in segments])
    lengths = np.array([s.length_m for s in segments])
    return float(np.std(dens) / np.mean(lengths))


def segment_route(route: RoutePolyline, epsilon: float, dmap: HexDensityMap) -> list[Segment]:
    """Split ``route`` at its Douglas-Peucker break points."""
    breaks = douglas_peucker(route, epsilon)
    cum = route.cumulative_m
    out = []
    for k, (i, j) in enumerate(zip(breaks[:-1], breaks[1:])):
        pts = route.points[i : j + 1]
        out.append(
            Segment(
                segment_id=f"{route.route_id}:{k:04d}",
                parts=(pts,),
                length_m=float(cum[j] - cum[i]),
                n_s=segment_messages(pts[0], pts[-1], dmap),
                source_route_ids=(route.route_id,),
            )
        )
    return out


def optimize_epsilon(
    route: RoutePolyline, dmap: HexDensityMap, grid: Iterable[float] | None = None
) -> EpsilonSearchResult:
    """Grid search for the tolerance minimising the segmentation cost.

    Ties go to the larger tolerance.
    """
    eps = np.asarray(default_epsilon_grid() if grid is None else list(grid), dtype=float)
    if eps.size == 0:
        raise ValueError("epsilon grid is empty")
    bad = eps[~((eps > EPS_MIN) & (eps < EPS_MAX))]
    if bad.size:
        raise ValueError(f"epsilon values outside ({EPS_MIN}, {EPS_MAX}): {bad.tolist()}")
    costs = np.empty(eps.size)
    counts = np.empty(eps.size, dtype=int)
    for i, e in enumerate(eps):
        segs = segment_route(route, float(e), dmap)
        costs[i] = segmentation_cost(segs)
        counts[i] = len(segs)
    best = costs.min()
    best_eps = float(eps[costs == best].max())
    return EpsilonSearchResult(route.route_id, eps, costs, counts, best_eps)


def _line_parts(geom) -> list[np.ndarray]:
    """Linear pieces of an intersection result, contiguous pieces joined."""
    lines = [g for g in shapely.get_parts(geom) if isinstance(g, LineString) and g.length > 0]
    if not lines:
        return []
    merged = shapely.line_merge(MultiLineString(lines)) if len(lines) > 1 else lines[0]
    return [np.asarray(g.coords) for g in shapely.get_parts(merged)]


def _shared_boundary(a, b) -> float:
    return a.boundary.intersection(b.buffer(2 * SNAP_GRID, quad_segs=1)).length


@dataclass
class _Piece:
    polygon: object
    parts: list[np.ndarray]
    routes: set[str]
    order: int

    @property
    def length_m(self) -> float:
        return sum(polyline_length_m(p) for p in self.parts)


def _absorb(pieces: list[_Piece], victim: int, prefer_routes: set[str]) -> bool:
    """Fold piece ``victim`` into its best touching neighbour; False if isolated."""
    v = pieces[victim]
    best, best_key = None, None
    for j, p in enumerate(pieces):
        if j == victim or p is None:
            continue
        if v.polygon.distance(p.polygon) > 2 * SNAP_GRID:
            continue
        shared = _shared_boundary(v.polygon, p.polygon)
        key = (bool(p.parts), bool(p.routes & prefer_routes), shared, -p.order)
        if best_key is None or key > best_key:
            best, best_key = j, key
    if best is None:
        return False
    tgt = pieces[best]
    tgt.polygon = unary_union([tgt.polygon, v.polygon])
    tgt.parts = tgt.parts + v.parts
    tgt.routes |= v.routes
    pieces[victim] = None
    return True


def _route_spans(
    route: RoutePolyline, polygons: Sequence, step_m: float, min_span_m: float
) -> list[RouteSpan]:
    """Walk a route and record which final polygon each stretch falls in."""
    n = max(2, int(np.ceil(route.length_m / step_m)) + 1)
    offsets = np.linspace(0.0, route.length_m, n)
    pts = np.array([route.point_at(o) for o in offsets])
    tree = shapely.STRtree(list(polygons))
    pidx, gidx = tree.query(shapely.points(pts), predicate="intersects")
    owner = np.full(n, -1)
    # smallest polygon index wins on shared boundaries
    for p, g in sorted(zip(pidx.tolist(), gidx.tolist()), key=lambda t: (t[0], -t[1])):
        owner[p] = g
    if np.any(owner < 0):
        # points outside every polygon (numerical edge); borrow nearest owner
        geoms = list(polygons)
        for k in np.flatnonzero(owner < 0):
            pt = shapely.Point(pts[k])
            owner[k] = int(np.argmin([g.distance(pt) for g in geoms]))

    runs: list[list] = []
    for k in range(n):
        if runs and runs[-1][0] == owner[k]:
            runs[-1][2] = k
        else:
            runs.append([int(owner[k]), k, k])
    spans = []
    for i, (g, a, b) in enumerate(runs):
        start = 0.0 if i == 0 else 0.5 * (offsets[a - 1] + offsets[a])
        end = route.length_m if i == len(runs) - 1 else 0.5 * (offsets[b] + offsets[b + 1])
        spans.append(RouteSpan(g, float(start), float(end)))

    # short grazing passes through a neighbour are folded into the previous span
    changed = True
    while changed and len(spans) > 1:
        changed = False
        for i, s in enumerate(spans):
            if s.length_m < min_span_m:
                tgt = spans[i - 1] if i > 0 else spans[i + 1]
                if i > 0:
                    tgt.end_m = s.end_m
                else:
                    tgt.start_m = s.start_m
                del spans[i]
                changed = True
                break
    merged: list[RouteSpan] = []
    for s in spans:
        if merged and merged[-1].segment_index == s.segment_index:
            merged[-1].end_m = s.end_m
        else:
            merged.append(s)
    return merged


def merge_segments(
    per_route: Mapping[str, Sequence[Segment]],
    routes: Mapping[str, RoutePolyline],
    dmap: HexDensityMap,
    dilation: float = DEFAULT_DILATION,
    sliver_m: float = 10.0,
    sample_step_m: float = 2.0,
) -> SegmentNetwork:
    """Merge per-route segments into a single network.

    Dilated segments are processed in order of decreasing area (ties by
    segment id); each keeps only what is not already covered by earlier
    ones. Remainders without any of their own road, and remainders whose road
    is shorter than ``sliver_m``, are folded into a touching neighbour
    (same-route neighbours preferred).
    """
    if not per_route:
        raise ValueError("no segments to merge")
    items = []
    for rid in sorted(per_route):
        for seg in per_route[rid]:
            poly = shapely.set_precision(dilate_polyline(seg.geometry, dilation), SNAP_GRID)
            items.append((seg, poly))
    items.sort(key=lambda it: (-it[1].area, it[0].segment_id))

    pieces: list[_Piece | None] = []
    accepted = []
    union = None
    for seg, poly in items:
        remainder = [poly] if union is None else polygon_difference(poly, union, grid_size=SNAP_GRID)
        line = LineString(seg.geometry)
        for piece in remainder:
            parts = _line_parts(line.intersection(piece))
            pieces.append(_Piece(piece, parts, set(seg.source_route_ids), len(pieces)))
        accepted.append(poly)
        union = poly if union is None else shapely.union(union, poly, grid_size=SNAP_GRID)

    # fold road-less remainders, then slivers, into neighbours
    for pred in (lambda p: not p.parts, lambda p: p.length_m < sliver_m):
        for i in range(len(pieces)):
            p = pieces[i]
            if p is not None and pred(p):
                _absorb(pieces, i, p.routes)
    kept = [p for p in pieces if p is not None and p.parts]
    orphans = [p for p in pieces if p is not None and not p.parts]
    if orphans:
        log.warning("%d isolated road-less remainders dropped", len(orphans))

    segments = []
    for k, p in enumerate(kept):
        length = p.length_m
        n_s = sum(segment_messages(part[0], part[-1], dmap) for part in p.parts)
        segments.append(
            Segment(f"S{k:05d}", tuple(p.parts), float(length), float(n_s), (), p.polygon)
        )

    polygons = [s.polygon for s in segments]
    sequences = {
        rid: _route_spans(routes[rid], polygons, sample_step_m, sliver_m) for rid in sorted(routes)
        if rid in per_route
    }
    users: dict[int, set[str]] = {i: set() for i in range(len(segments))}
    for rid, spans in sequences.items():
        for s in spans:
            users[s.segment_index].add(rid)
    for i, seg in enumerate(segments):
        seg.source_route_ids = tuple(sorted(users[i]))

    boundary = set()
    tree = shapely.STRtree(polygons)
    for i, poly in enumerate(polygons):
        for j in tree.query(poly, predicate="dwithin", distance=2 * SNAP_GRID).tolist():
            if j > i and _shared_boundary(poly, polygons[j]) > 1e-6:
                boundary.add((i, j))
    net = SegmentNetwork(segments, np.zeros((0, 0), dtype=np.int8), sequences, boundary)
    net.adjacency = connectivity_matrix(net)
    return net


def connectivity_matrix(network: SegmentNetwork) -> np.ndarray:
    """Binary neighbour matrix: consecutive on some route or sharing a boundary."""
    n = len(network.segments)
    adj = np.zeros((n, n), dtype=np.int8)
    for spans in network.route_sequences.values():
        for a, b in zip(spans[:-1], spans[1:]):
            if a.segment_index != b.segment_index:
                adj[a.segment_index, b.segment_index] = adj[b.segment_index, a.segment_index] = 1
    for i, j in network.boundary_pairs:
        if i != j:
            adj[i, j] = adj[j, i] = 1
    np.fill_diagonal(adj, 0)
    return adj


def build_network(
    routes: Sequence[RoutePolyline],
    dmap: HexDensityMap,
    grid: Iterable[float] | None = None,
    dilation: float = DEFAULT_DILATION,
    sliver_m: float = 10.0,
    jobs: int = 1,
) -> tuple[SegmentNetwork, list[EpsilonSearchResult]]:
    """Optimise tolerance per route (in parallel with ``jobs`` > 1), segment, and merge."""
    grid = None if grid is None else list(grid)
    results = parallel_map(partial(optimize_epsilon, dmap=dmap, grid=grid), routes, jobs)
    per_route = {
        r.route_id: segment_route(r, res.best_epsilon, dmap) for r, res in zip(routes, results)
    }
    net = merge_segments(per_route, {r.route_id: r for r in routes}, dmap, dilation, sliver_m)
    return net, results
