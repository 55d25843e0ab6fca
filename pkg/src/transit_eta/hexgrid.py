"""Flat-top hexagonal binning on a local equirectangular plane.

Cells are addressed by axial ``(q, r)`` coordinates. A hexagonal lattice cell
is exactly the Voronoi cell of its center, so lookups reduce to a nearest
center search among a rounded candidate and its six neighbours.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geo_core import project_local, unproject_local

HexIndex = tuple[int, int]

NEIGHBOR_DIRS: tuple[HexIndex, ...] = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))
_TIE_M = 1e-9


@dataclass(frozen=True)
class HexGridConfig:
    origin: tuple[float, float]
    edge_m: float = 25.0

    def __post_init__(self):
        if not self.edge_m > 0:
            raise ValueError("edge_m must be positive")


def hex_center_xy(h: HexIndex, edge_m: float) -> np.ndarray:
    q, r = h
    return np.array([edge_m * 1.5 * q, edge_m * math.sqrt(3) * (r + q / 2.0)])


def _cube_round(qf: float, rf: float) -> HexIndex:
    sf = -qf - rf
    q, r, s = round(qf), round(rf), round(sf)
    dq, dr, ds = abs(q - qf), abs(r - rf), abs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def _hex_of_xy(xy: np.ndarray, edge_m: float) -> HexIndex:
    x, y = float(xy[0]), float(xy[1])
    qf = (2.0 / 3.0) * x / edge_m
    rf = (-x / 3.0 + math.sqrt(3) / 3.0 * y) / edge_m
    base = _cube_round(qf, rf)
    cands = [base] + [(base[0] + dq, base[1] + dr) for dq, dr in NEIGHBOR_DIRS]
    sq3 = math.sqrt(3)
    dists = [
        math.hypot(x - edge_m * 1.5 * c[0], y - edge_m * sq3 * (c[1] + c[0] / 2.0)) for c in cands
    ]
    best = min(dists)
    return min(c for c, d in zip(cands, dists) if d <= best + _TIE_M)


def hex_of(p: Sequence[float], grid: HexGridConfig) -> HexIndex:
    """Hex cell containing the (lon, lat) point ``p``.

    Points on a shared boundary go to the lexicographically smallest cell.
    """
    xy = project_local([p], grid.origin)[0]
    return _hex_of_xy(xy, grid.edge_m)


def hex_center(h: HexIndex, grid: HexGridConfig) -> tuple[float, float]:
    lon, lat = unproject_local(hex_center_xy(h, grid.edge_m), grid.origin)[0]
    return float(lon), float(lat)


def hex_distance(a: HexIndex, b: HexIndex) -> int:
    dq, dr = a[0] - b[0], a[1] - b[1]
    return int((abs(dq) + abs(dr) + abs(dq + dr)) // 2)


def _walk(a_xy: np.ndarray, b_xy: np.ndarray, edge_m: float) -> list[HexIndex]:
    """Cells crossed by the chord a->b, found by stepping across Voronoi bisectors."""
    start, end = _hex_of_xy(a_xy, edge_m), _hex_of_xy(b_xy, edge_m)
    cells = [start]
    ax, ay = float(a_xy[0]), float(a_xy[1])
    dx, dy = float(b_xy[0]) - ax, float(b_xy[1]) - ay
    if dx == 0.0 and dy == 0.0:
        return cells
    sq3 = math.sqrt(3)
    dirs = [(dq, dr, edge_m * 1.5 * dq, edge_m * sq3 * (dr + dq / 2.0)) for dq, dr in NEIGHBOR_DIRS]
    cur, t_cur = start, 0.0
    limit = 4 * hex_distance(start, end) + 8
    while cur != end and len(cells) < limit:
        cx = edge_m * 1.5 * cur[0]
        cy = edge_m * sq3 * (cur[1] + cur[0] / 2.0)
        best_t, best_n = math.inf, None
        for dq, dr, ex, ey in dirs:
            de = dx * ex + dy * ey
            if de <= 0:
                continue
            # parameter where the chord crosses the bisector between cur and n
            t = ((cx + ex / 2.0 - ax) * ex + (cy + ey / 2.0 - ay) * ey) / de
            if t < t_cur - 1e-12:
                continue
            n = (cur[0] + dq, cur[1] + dr)
            if t < best_t - 1e-12 or (abs(t - best_t) <= 1e-12 and n < best_n):
                best_t, best_n = t, n
        if best_n is None or best_t > 1.0 + 1e-12:
            break
        cur, t_cur = best_n, max(t_cur, best_t)
        cells.append(cur)
    if cells[-1] != end:
        cells.append(end)
    out, seen = [], set()
    for h in cells:
        if h not in seen:
            seen.add(h)
            out.append(h)
    return out


def hexes_on_line(a: Sequence[float], b: Sequence[float], grid: HexGridConfig) -> list[HexIndex]:
    """Ordered, duplicate-free cells crossed by the straight chord from a to b."""
    xy = project_local([a, b], grid.origin)
    # walk in a canonical direction so that reversing the chord reverses the list
    if tuple(xy[0]) <= tuple(xy[1]):
        return _walk(xy[0], xy[1], grid.edge_m)
    return _walk(xy[1], xy[0], grid.edge_m)[::-1]


@dataclass
class HexDensityMap:
    """Average messages per trip, per hex cell (n_h)."""

    grid: HexGridConfig
    entries: dict[HexIndex, float] = field(default_factory=dict)
    message_counts: dict[HexIndex, int] = field(default_factory=dict)
    trip_counts: dict[HexIndex, int] = field(default_factory=dict)

    def get(self, h: HexIndex) -> float:
        return self.entries.get(h, 0.0)

    def __len__(self) -> int:
        return len(self.entries)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["q", "r", "n_h", "trip_count"])
            for h in sorted(self.entries):
                w.writerow([h[0], h[1], repr(self.entries[h]), self.trip_counts[h]])

    @classmethod
    def from_csv(cls, path, grid: HexGridConfig) -> "HexDensityMap":
        m = cls(grid)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h = (int(row["q"]), int(row["r"]))
                trips = int(row["trip_count"])
                m.entries[h] = float(row["n_h"])
                m.trip_counts[h] = trips
                m.message_counts[h] = int(round(m.entries[h] * trips))
        return m


def build_density_map(
    messages: Iterable[tuple[str, Sequence[float]]], grid: HexGridConfig
) -> HexDensityMap:
    """Bin ``(trip_id, (lon, lat))`` messages and average per passing trip.

    ``n_h`` is messages in the cell divided by the number of distinct trips
    that reported at least once from it.
    """
    counts: dict[HexIndex, int] = defaultdict(int)
    trips: dict[HexIndex, set] = defaultdict(set)
    items = list(messages)
    if items:
        xy = project_local([p for _, p in items], grid.origin)
        for (trip_id, _), pt in zip(items, xy):
            h = _hex_of_xy(pt, grid.edge_m)
            counts[h] += 1
            trips[h].add(trip_id)
    out = HexDensityMap(grid)
    for h in sorted(counts):
        out.message_counts[h] = counts[h]
        out.trip_counts[h] = len(trips[h])
        out.entries[h] = counts[h] / len(trips[h])
    return out
