"""Raw position messages to per-segment hourly dwell times."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from functools import partial
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .geo_core import GeoPoint, GeometryError, RoutePolyline, nearest_point_on_polyline, snap_points
from .parallel import parallel_map
from .segmentation import RouteSpan, SegmentNetwork

log = logging.getLogger(__name__)

FREE_FLOW_MPS = 30.0 / 3.6
SLOT_SECONDS = 3600.0
MESSAGE_FIELDS = ("trip_id", "timestamp", "lon", "lat")


@dataclass(frozen=True)
class SlotConfig:
    first_hour: int = 8
    n_slots: int = 12
    utc_offset_h: float = 0.0

    def locate(self, t: float) -> tuple[str, int] | None:
        """(ISO date, slot index) of a UTC timestamp, or None outside service hours."""
        local = t + self.utc_offset_h * 3600.0
        day = math.floor(local / 86400.0)
        hour = (local - day * 86400.0) / SLOT_SECONDS - self.first_hour
        slot = math.floor(hour)
        if not 0 <= slot < self.n_slots:
            return None
        date = (datetime(1970, 1, 1) + timedelta(days=day)).date().isoformat()
        return date, slot

    def slot_label(self, date: str, slot: int) -> str:
        return f"{date}T{self.first_hour + slot:02d}"


@dataclass(frozen=True)
class BusPositionMessage:
    trip_id: str
    route_id: str
    timestamp: float
    lon: float
    lat: float

    @property
    def position(self) -> GeoPoint:
        return GeoPoint(self.lon, self.lat)


@dataclass
class ParseReport:
    n_lines: int = 0
    n_duplicates: int = 0
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)


def parse_timestamp(text: str) -> float:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(t: float) -> str:
    dt = datetime.fromtimestamp(t, tz=timezone.utc)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_messages(source: str | Path | Iterable[str]) -> tuple[list[BusPositionMessage], ParseReport]:
    """Read the message CSV (trip_id, timestamp, lon, lat[, route_id]).

    Bad lines are reported and skipped; repeated (trip, timestamp) pairs keep
    the first occurrence. An unreadable path raises ``OSError``.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return parse_messages(fh.read().splitlines())
    lines = list(source)
    report = ParseReport()
    if not lines:
        return [], report
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip() for h in next(reader)]
    missing = [f for f in MESSAGE_FIELDS if f not in header]
    if missing:
        raise ValueError(f"message CSV is missing columns: {missing}")
    col = {name: header.index(name) for name in header}
    seen = set()
    out = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        report.n_lines += 1
        try:
            trip = row[col["trip_id"]].strip()
            if not trip:
                raise ValueError("empty trip_id")
            ts = parse_timestamp(row[col["timestamp"]])
            p = GeoPoint(float(row[col["lon"]]), float(row[col["lat"]])).validate()
            route = row[col["route_id"]].strip() if "route_id" in col else ""
        except (ValueError, IndexError, GeometryError) as exc:
            report.rejected.append((line_no, str(exc)))
            continue
        key = (trip, ts)
        if key in seen:
            report.n_duplicates += 1
            continue
        seen.add(key)
        out.append(BusPositionMessage(trip, route, ts, p.lon, p.lat))
    return out, report


def write_messages(messages: Iterable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*MESSAGE_FIELDS, "route_id"])
        for m in messages:
            w.writerow([m.trip_id, format_timestamp(m.timestamp), repr(m.lon), repr(m.lat), m.route_id])


class SnapResult(NamedTuple):
    offset_m: float
    distance_m: float
    accepted: bool


def snap_to_route(msg: BusPositionMessage, route: RoutePolyline, max_distance_m: float = 50.0) -> SnapResult:
    dist, off = nearest_point_on_polyline((msg.lon, msg.lat), route)
    return SnapResult(off, dist, dist <= max_distance_m)


def repair_monotone(offsets: Sequence[float], backward_tol_m: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Make a trip's arc offsets non-decreasing.

    Keeps the longest chain of messages in which no step goes backwards by
    more than ``backward_tol_m`` (earliest chain on ties), then clamps the
    remaining small backward wiggles to the running maximum.
    Returns ``(keep_mask, repaired_offsets_of_kept)``.
    """
    off = np.asarray(offsets, dtype=float)
    n = len(off)
    if n == 0:
        return np.zeros(0, dtype=bool), off
    best = np.ones(n, dtype=int)
    prev = np.full(n, -1)
    for j in range(n):
        ok = np.flatnonzero(off[:j] <= off[j] + backward_tol_m)
        if ok.size:
            k = ok[np.argmax(best[ok])]
            best[j] = best[k] + 1
            prev[j] = k
    j = int(np.argmax(best))
    keep = np.zeros(n, dtype=bool)
    while j >= 0:
        keep[j] = True
        j = int(prev[j])
    return keep, np.maximum.accumulate(off[keep])


@dataclass
class SnappedTrip:
    trip_id: str
    route_id: str
    times: np.ndarray
    offsets: np.ndarray
    n_rejected: int = 0


def _assemble_one(
    item: tuple[str, list[BusPositionMessage]],
    routes: Mapping[str, RoutePolyline],
    max_distance_m: float,
    backward_tol_m: float,
) -> SnappedTrip | None:
    trip_id, msgs = item
    msgs = sorted(msgs, key=lambda m: m.timestamp)
    pts = np.array([[m.lon, m.lat] for m in msgs])
    rid = next((m.route_id for m in msgs if m.route_id), "")
    if rid and rid not in routes:
        log.warning("trip %s references unknown route %s", trip_id, rid)
        return None
    if rid:
        dist, off = snap_points(pts, routes[rid])
    else:
        cands = {r: snap_points(pts, routes[r]) for r in sorted(routes)}
        rid = min(cands, key=lambda r: (float(np.median(cands[r][0])), r))
        dist, off = cands[rid]
    ok = dist <= max_distance_m
    times = np.array([m.timestamp for m in msgs])[ok]
    keep, repaired = repair_monotone(off[ok], backward_tol_m)
    return SnappedTrip(trip_id, rid, times[keep], repaired, int((~ok).sum() + (~keep).sum()))


def assemble_trips(
    messages: Iterable[BusPositionMessage],
    routes: Mapping[str, RoutePolyline],
    max_distance_m: float = 50.0,
    backward_tol_m: float = 100.0,
    jobs: int = 1,
) -> list[SnappedTrip]:
    """Group messages into trips, snap to their route, repair monotonicity.

    Messages without a route id are matched to the route with the smallest
    median snapping distance for their trip. Trips are processed
    independently, in parallel when ``jobs`` > 1.
    """
    by_trip: dict[str, list[BusPositionMessage]] = defaultdict(list)
    for m in messages:
        by_trip[m.trip_id].append(m)
    fn = partial(_assemble_one, routes=dict(routes), max_distance_m=max_distance_m,
                 backward_tol_m=backward_tol_m)
    trips = parallel_map(fn, [(t, by_trip[t]) for t in sorted(by_trip)], jobs)
    return [t for t in trips if t is not None]


@dataclass(frozen=True)
class DwellObservation:
    segment_id: str
    day: str
    slot: int
    dwell_s: float
    trip_id: str


def _first_time_at(times: np.ndarray, offsets: np.ndarray, x: float) -> float:
    k = int(np.searchsorted(offsets, x, side="left"))
    if k == 0:
        return float(times[0])
    o0, o1 = offsets[k - 1], offsets[k]
    return float(times[k - 1] + (x - o0) / (o1 - o0) * (times[k] - times[k - 1]))


def dwell_times(
    trip_id: str,
    times: Sequence[float],
    offsets: Sequence[float],
    spans: Sequence[RouteSpan],
    segment_ids: Sequence[str],
    segment_lengths: Sequence[float] | None = None,
    slots: SlotConfig = SlotConfig(),
) -> list[DwellObservation]:
    """Per-segment traversal times for one trip.

    Entry and exit times are linearly interpolated in arc offset between
    consecutive messages. Only spans lying between the first and last message
    count. When ``segment_lengths`` is given, a route's traversal of a span
    is rescaled to the segment's own length (spans differ slightly per route
    after merging).
    """
    t = np.asarray(times, dtype=float)
    off = np.asarray(offsets, dtype=float)
    if len(t) < 2:
        return []
    out = []
    for span in spans:
        if span.start_m < off[0] or span.end_m > off[-1] or span.length_m <= 0:
            continue
        t_in = _first_time_at(t, off, span.start_m)
        t_out = _first_time_at(t, off, span.end_m)
        dwell = t_out - t_in
        if segment_lengths is not None:
            dwell *= segment_lengths[span.segment_index] / span.length_m
        loc = slots.locate(t_in)
        if loc is None or not (0 < dwell <= SLOT_SECONDS):
            continue
        out.append(DwellObservation(segment_ids[span.segment_index], loc[0], loc[1], dwell, trip_id))
    return out


def observations_from_trips(
    trips: Iterable[SnappedTrip], network: SegmentNetwork, slots: SlotConfig = SlotConfig()
) -> list[DwellObservation]:
    ids = network.segment_ids
    lengths = [s.length_m for s in network.segments]
    out = []
    for trip in trips:
        spans = network.route_sequences.get(trip.route_id)
        if spans is None:
            continue
        out.extend(dwell_times(trip.trip_id, trip.times, trip.offsets, spans, ids, lengths, slots))
    return out


@dataclass
class FeatureMatrix:
    """Dwell seconds per segment (rows) and (day, hour slot) column."""

    values: np.ndarray
    mask: np.ndarray
    segment_ids: list[str]
    slot_labels: list[str]
    slots_per_day: int = 12

    @property
    def n_days(self) -> int:
        return self.values.shape[1] // self.slots_per_day

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.mask.mean()) if self.mask.size else 0.0

    def days(self) -> list[str]:
        return [self.slot_labels[d * self.slots_per_day].split("T")[0] for d in range(self.n_days)]

    def to_csv(self, path: str | Path, mask_path: str | Path | None = None) -> None:
        path = Path(path)
        mask_path = Path(mask_path) if mask_path else path.with_name(path.stem + "_mask.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment_id", *self.slot_labels])
            for sid, row in zip(self.segment_ids, self.values):
                w.writerow([sid, *(repr(float(v)) for v in row)])
        with open(mask_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment_id", *self.slot_labels])
            for sid, row in zip(self.segment_ids, self.mask):
                w.writerow([sid, *(int(v) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path, mask_path: str | Path | None = None) -> "FeatureMatrix":
        path = Path(path)
        mask_path = Path(mask_path) if mask_path else path.with_name(path.stem + "_mask.csv")
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        with open(mask_path, newline="") as fh:
            mrows = list(csv.reader(fh))
        labels = rows[0][1:]
        hours = [lab.split("T")[1] for lab in labels]
        per_day = hours.index(hours[0], 1) if hours.count(hours[0]) > 1 else len(hours)
        return cls(
            values=np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(rows) - 1, len(labels)),
            mask=np.array([[v == "1" for v in r[1:]] for r in mrows[1:]], dtype=bool).reshape(len(rows) - 1, len(labels)),
            segment_ids=[r[0] for r in rows[1:]],
            slot_labels=labels,
            slots_per_day=per_day,
        )


def build_feature_matrix(
    observations: Iterable[DwellObservation],
    segment_ids: Sequence[str],
    segment_lengths: Sequence[float],
    slots: SlotConfig = SlotConfig(),
    days: Sequence[str] | None = None,
) -> FeatureMatrix:
    """Average observations per (segment, day, slot) and impute the gaps.

    Empty cells take the segment's mean over its observed cells; a segment
    with no observations at all gets the free-flow dwell at 30 km/h.
    """
    obs = list(observations)
    if days is None:
        days = sorted({o.day for o in obs})
    day_idx = {d: i for i, d in enumerate(days)}
    row = {sid: i for i, sid in enumerate(segment_ids)}
    n, p = len(segment_ids), slots.n_slots * len(days)
    total = np.zeros((n, p))
    count = np.zeros((n, p), dtype=int)
    for o in obs:
        if o.day not in day_idx or o.segment_id not in row:
            continue
        j = day_idx[o.day] * slots.n_slots + o.slot
        total[row[o.segment_id], j] += o.dwell_s
        count[row[o.segment_id], j] += 1
    mask = count > 0
    values = np.zeros((n, p))
    values[mask] = total[mask] / count[mask]
    for i in range(n):
        if mask[i].any():
            values[i, ~mask[i]] = values[i, mask[i]].mean()
        else:
            values[i, :] = segment_lengths[i] / FREE_FLOW_MPS
    labels = [slots.slot_label(d, s) for d in days for s in range(slots.n_slots)]
    return FeatureMatrix(values, mask, list(segment_ids), labels, slots.n_slots)
