"""Deterministic synthetic city: routes, traffic ground truth and sparse messages.

Traffic lives on *zones*, fixed stretches of each route. A zone's dwell time
for a given day and hour slot is

    length / base_speed * group_profile(slot) * group_pulse(day, slot) * noise

Zones are assigned to groups at random across routes, so members of a group
share day-to-day pulses without being physically connected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geo_core import EARTH_RADIUS_M, RoutePolyline, unproject_local

SLOT_S = 3600.0
DAY_S = 86400.0
EPOCH_ISO = "2024-01-01"
EPOCH_UNIX = 1704067200  # 2024-01-01T00:00:00Z


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    n_routes: int = 4
    points_per_route: int = 300
    point_spacing_m: float = 20.0
    center: tuple[float, float] = (72.83, 21.17)
    n_days: int = 28
    first_slot_hour: int = 8
    n_slots: int = 12
    headway_s: float = 1200.0
    message_interval_s: tuple[float, float] = (60.0, 300.0)
    gps_noise_m: float = 5.0
    zone_length_m: tuple[float, float] = (300.0, 700.0)
    base_speed_mps: tuple[float, float] = (5.0, 11.0)
    n_groups: int = 4
    pulse_amplitude: float = 0.6
    profile_amplitude: float = 0.3
    zone_noise: float = 0.03
    shared_corridor: float = 0.3
    flat_traffic: bool = False

    def __post_init__(self):
        lo, hi = self.message_interval_s
        if not (0 < lo <= hi):
            raise ValueError("message interval range must be positive and ordered")
        if self.n_routes < 1 or self.points_per_route < 2:
            raise ValueError("need at least one route of two points")


@dataclass
class Zone:
    route_id: str
    index: int
    start_m: float
    end_m: float
    group: int
    base_speed: float

    @property
    def length_m(self) -> float:
        return self.end_m - self.start_m


@dataclass
class Trip:
    trip_id: str
    route_id: str
    day: int
    # zone-boundary knots of the piecewise-linear trajectory
    times: np.ndarray
    offsets: np.ndarray
    zone_slots: np.ndarray

    @property
    def departure(self) -> float:
        return float(self.times[0])

    @property
    def arrival(self) -> float:
        return float(self.times[-1])

    def offset_at(self, t) -> np.ndarray:
        return np.interp(t, self.times, self.offsets)

    def time_at(self, offset) -> np.ndarray:
        return np.interp(offset, self.offsets, self.times)


@dataclass
class GroundTruth:
    config: SynthConfig
    routes: list[RoutePolyline]
    zones: list[Zone]
    dwell: np.ndarray  # (days, zones, slots) seconds
    trips: list[Trip] = field(default_factory=list)

    @property
    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, z in enumerate(self.zones):
            out.setdefault(z.group, []).append(i)
        return out

    def route(self, route_id: str) -> RoutePolyline:
        return next(r for r in self.routes if r.route_id == route_id)

    def zones_of(self, route_id: str) -> list[int]:
        return [i for i, z in enumerate(self.zones) if z.route_id == route_id]

    def zone_adjacency(self) -> np.ndarray:
        """Consecutive zones on a route are physical neighbours."""
        n = len(self.zones)
        adj = np.zeros((n, n), dtype=np.int8)
        for r in self.routes:
            ids = self.zones_of(r.route_id)
            for a, b in zip(ids[:-1], ids[1:]):
                adj[a, b] = adj[b, a] = 1
        return adj

    def slot_of(self, t: float) -> int:
        hour = (t % DAY_S) / SLOT_S - self.config.first_slot_hour
        return int(min(max(math.floor(hour), 0), self.config.n_slots - 1))


def _random_route(rng: np.random.Generator, cfg: SynthConfig, k: int) -> np.ndarray:
    """Planar (meters) smooth curvy walk crossing near the city centre."""
    n, step = cfg.points_per_route, cfg.point_spacing_m
    heading0 = math.pi * k / cfg.n_routes + rng.uniform(-0.2, 0.2)
    # smooth heading wiggle: sum of a few low-frequency sines
    s = np.arange(n) / n
    wiggle = np.zeros(n)
    for _ in range(4):
        wiggle += rng.uniform(0.15, 0.45) * np.sin(2 * math.pi * rng.uniform(1, 6) * s + rng.uniform(0, 2 * math.pi))
    heading = heading0 + wiggle
    xy = np.zeros((n, 2))
    xy[1:, 0] = np.cumsum(step * np.cos(heading[1:]))
    xy[1:, 1] = np.cumsum(step * np.sin(heading[1:]))
    xy -= xy[n // 2]
    xy += rng.uniform(-200, 200, size=2)
    return xy


def _profiles(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Per-group diurnal multiplier over slots (peaks at group-specific hours)."""
    slots = np.arange(cfg.n_slots)
    prof = np.ones((cfg.n_groups, cfg.n_slots))
    if cfg.flat_traffic:
        return prof
    for g in range(cfg.n_groups):
        for _ in range(2):
            c = rng.uniform(0, cfg.n_slots - 1)
            prof[g] += cfg.profile_amplitude * rng.uniform(0.5, 1.0) * np.exp(-(((slots - c) / 1.5) ** 2))
    return prof


def _pulses(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Day-specific group congestion pulses, shape (days, groups, slots)."""
    slots = np.arange(cfg.n_slots)
    out = np.ones((cfg.n_days, cfg.n_groups, cfg.n_slots))
    if cfg.flat_traffic:
        return out
    for d in range(cfg.n_days):
        for g in range(cfg.n_groups):
            c = rng.uniform(-1, cfg.n_slots)
            w = rng.uniform(1.0, 3.0)
            h = rng.uniform(0.0, 1.0)
            out[d, g] += cfg.pulse_amplitude * h * np.exp(-(((slots - c) / w) ** 2))
    return out


def generate_city(config: SynthConfig, with_trips: bool = True) -> GroundTruth:
    """Build routes, zones, dwell ground truth and (optionally) trip trajectories."""
    rng = np.random.default_rng(config.seed)
    planar = []
    for k in range(config.n_routes):
        xy = _random_route(rng, config, k)
        if k == 1 and config.shared_corridor > 0:
            m = int(config.shared_corridor * len(xy))
            # route 1 starts on route 0's road, then bends away along its own path
            own = xy[: len(xy) - m] - xy[0] + planar[0][m - 1] + (planar[0][m - 1] - planar[0][m - 2])
            xy = np.vstack([planar[0][:m], own])
        planar.append(xy)
    routes = [
        RoutePolyline.from_points(f"R{k}", unproject_local(xy, config.center))
        for k, xy in enumerate(planar)
    ]

    zones: list[Zone] = []
    lo, hi = config.zone_length_m
    for r in routes:
        cuts = [0.0]
        # last zone lands in (lo, lo + hi]
        while r.length_m - cuts[-1] > lo + hi:
            cuts.append(cuts[-1] + rng.uniform(lo, hi))
        cuts.append(r.length_m)
        for i, (a, b) in enumerate(zip(cuts[:-1], cuts[1:])):
            g = int(rng.integers(config.n_groups))
            v = float(rng.uniform(*config.base_speed_mps))
            if config.flat_traffic:
                v = float(np.mean(config.base_speed_mps))
            zones.append(Zone(r.route_id, i, a, b, g, v))

    prof = _profiles(rng, config)
    pulses = _pulses(rng, config)
    base = np.array([z.length_m / z.base_speed for z in zones])
    grp = np.array([z.group for z in zones])
    dwell = base[None, :, None] * prof[grp][None, :, :] * pulses[:, grp, :]
    if config.zone_noise > 0 and not config.flat_traffic:
        dwell *= np.exp(rng.normal(0.0, config.zone_noise, size=dwell.shape))

    gt = GroundTruth(config, routes, zones, dwell)
    if with_trips:
        gt.trips = _trips(gt)
    return gt


def _trips(gt: GroundTruth) -> list[Trip]:
    cfg = gt.config
    trips = []
    start = (cfg.first_slot_hour - 0.5) * SLOT_S
    stop = (cfg.first_slot_hour + cfg.n_slots) * SLOT_S - 1800.0
    for d in range(cfg.n_days):
        for r in gt.routes:
            zids = gt.zones_of(r.route_id)
            dep = start
            k = 0
            while dep <= stop:
                t = d * DAY_S + dep
                times, offs, slots = [t], [gt.zones[zids[0]].start_m], []
                for zi in zids:
                    s = gt.slot_of(t)
                    t += gt.dwell[d, zi, s]
                    times.append(t)
                    offs.append(gt.zones[zi].end_m)
                    slots.append(s)
                trips.append(
                    Trip(f"{r.route_id}-d{d:03d}-{k:03d}", r.route_id, d,
                         np.array(times), np.array(offs), np.array(slots))
                )
                dep += cfg.headway_s
                k += 1
    return trips


@dataclass
class SynthMessage:
    trip_id: str
    route_id: str
    timestamp: float  # unix seconds
    lon: float
    lat: float


def emit_messages(gt: GroundTruth, config: SynthConfig | None = None) -> list[SynthMessage]:
    """Sparse noisy position reports for every trip, sorted by time."""
    cfg = config or gt.config
    rng = np.random.default_rng([cfg.seed, 1])
    lo, hi = cfg.message_interval_s
    deg_per_m = 180.0 / (math.pi * EARTH_RADIUS_M)
    out = []
    for trip in gt.trips:
        route = gt.route(trip.route_id)
        coslat = math.cos(math.radians(route.points[0][1]))
        t = trip.departure
        while t <= trip.arrival:
            # whole seconds keep CSV round-trips exact
            ts = float(round(t))
            p = route.point_at(float(trip.offset_at(ts)))
            if cfg.gps_noise_m > 0:
                dx, dy = rng.normal(0.0, cfg.gps_noise_m, size=2)
                p = p + np.array([dx * deg_per_m / coslat, dy * deg_per_m])
            out.append(SynthMessage(trip.trip_id, trip.route_id, EPOCH_UNIX + ts, float(p[0]), float(p[1])))
            t += lo if lo == hi else rng.uniform(lo, hi)
    out.sort(key=lambda m: (m.timestamp, m.trip_id))
    return out


def zone_panel(
    gt: GroundTruth, obs_noise: float = 0.0, seed: int | None = None
) -> np.ndarray:
    """Observed dwell matrix of shape (zones, days*slots) with multiplicative noise."""
    d, z, p = gt.dwell.shape
    x = gt.dwell.transpose(1, 0, 2).reshape(z, d * p).copy()
    if obs_noise > 0:
        rng = np.random.default_rng([gt.config.seed if seed is None else seed, 2])
        x *= np.exp(rng.normal(0.0, obs_noise, size=x.shape))
    return x
