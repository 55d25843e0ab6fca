"""Real-time arrival estimates from segment dwell predictions and sparse fixes.

Between position messages a tracker advances the bus along its route at the
speed implied by the predicted dwell of the segment it is on. When a message
arrives the predicted distance is blended with the measured one,

    updated = alpha' * predicted + (1 - alpha') * measured

and never allowed to move backwards. Remaining ETA is the prorated dwell of
the current segment plus the dwells of all later ones.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .geo_core import RoutePolyline, nearest_point_on_polyline

log = logging.getLogger(__name__)


def alpha_beta_update(predicted_m: float, measured_m: float, alpha_prime: float) -> float:
    if not 0.0 <= alpha_prime <= 1.0:
        raise ValueError(f"alpha_prime must lie in [0, 1], got {alpha_prime}")
    return alpha_prime * predicted_m + (1.0 - alpha_prime) * measured_m


@dataclass
class EtaReport:
    trip_id: str
    timestamp: float
    distance_m: float
    eta_s: list[float]
    stops_m: list[float]
    source: str  # "predicted" or "measurement"

    @property
    def eta_end_s(self) -> float:
        return self.eta_s[-1] if self.eta_s else 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "trip_id": self.trip_id,
                "timestamp": self.timestamp,
                "distance_m": round(self.distance_m, 3),
                "stops_m": [round(s, 3) for s in self.stops_m],
                "eta_s": [round(e, 3) for e in self.eta_s],
                "source": self.source,
            },
            sort_keys=True,
        )


@dataclass
class TripTracker:
    """Alpha-beta style position tracker for one trip.

    ``lengths_m`` and ``dwell_s`` describe the route's segment traversals in
    order. ``stops_m`` are the arc offsets reported in each :class:`EtaReport`
    (route end is always appended). ``beta`` is an optional speed-correction
    gain, off by default.
    """

    trip_id: str
    lengths_m: np.ndarray
    dwell_s: np.ndarray
    alpha_prime: float = 0.9
    tick_s: float = 10.0
    distance_m: float = 0.0
    clock: float = 0.0
    stops_m: list[float] = field(default_factory=list)
    beta: float = 0.0
    speed_scale: float = 1.0

    def __post_init__(self):
        self.lengths_m = np.asarray(self.lengths_m, dtype=float)
        self.refresh_dwell(self.dwell_s)
        if not 0.0 <= self.alpha_prime <= 1.0:
            raise ValueError("alpha_prime must lie in [0, 1]")
        self.bounds = np.concatenate([[0.0], np.cumsum(self.lengths_m)])
        end = float(self.bounds[-1])
        self.stops_m = sorted(s for s in self.stops_m if 0.0 <= s < end) + [end]
        self.distance_m = min(max(self.distance_m, 0.0), end)

    @property
    def route_length_m(self) -> float:
        return float(self.bounds[-1])

    def refresh_dwell(self, dwell_s: Sequence[float]) -> None:
        dwell = np.asarray(dwell_s, dtype=float)
        if dwell.shape != self.lengths_m.shape or np.any(dwell <= 0) or not np.all(np.isfinite(dwell)):
            raise ValueError("dwell predictions must be positive, one per segment")
        self.dwell_s = dwell

    def _segment_at(self, d: float) -> int:
        i = int(np.searchsorted(self.bounds, d, side="right")) - 1
        return min(max(i, 0), len(self.lengths_m) - 1)

    def predict_advance(self, dt: float, start_m: float | None = None) -> float:
        """Distance reached after ``dt`` seconds at the predicted segment speeds."""
        if dt < 0:
            raise ValueError("dt must be non-negative")
        d = self.distance_m if start_m is None else start_m
        remaining = float(dt)
        i = self._segment_at(d)
        while remaining > 0 and d < self.route_length_m:
            speed = self.speed_scale * self.lengths_m[i] / self.dwell_s[i]
            to_end = self.bounds[i + 1] - d
            need = to_end / speed
            if remaining >= need:
                d = float(self.bounds[i + 1])
                remaining -= need
                i += 1
                if i >= len(self.lengths_m):
                    break
            else:
                d += speed * remaining
                remaining = 0.0
        return min(d, self.route_length_m)

    def time_between(self, d0: float, d1: float) -> float:
        """Predicted seconds to travel from offset d0 to d1 (d0 <= d1)."""
        if d1 <= d0:
            return 0.0
        total = 0.0
        i = self._segment_at(d0)
        while i < len(self.lengths_m) and self.bounds[i] < d1:
            lo, hi = max(d0, self.bounds[i]), min(d1, self.bounds[i + 1])
            if hi > lo:
                total += (hi - lo) / self.lengths_m[i] * self.dwell_s[i]
            i += 1
        return total / self.speed_scale

    def remaining_eta(self, source: str = "predicted") -> EtaReport:
        d = self.distance_m
        stops = [s for s in self.stops_m if s >= d] or [self.route_length_m]
        etas = []
        acc, prev = 0.0, d
        for s in stops:
            acc += self.time_between(prev, s)
            etas.append(acc)
            prev = s
        return EtaReport(self.trip_id, self.clock, d, etas, stops, source)

    def tick(self, now: float) -> EtaReport:
        """Advance the prediction to wall-clock ``now``."""
        if now > self.clock:
            self.distance_m = self.predict_advance(now - self.clock)
            self.clock = now
        return self.remaining_eta("predicted")

    def on_measurement(self, timestamp: float, measured_m: float) -> EtaReport:
        """Blend a snapped position fix into the track and report."""
        prior = self.distance_m
        predicted = self.predict_advance(max(0.0, timestamp - self.clock))
        updated = alpha_beta_update(predicted, measured_m, self.alpha_prime)
        if self.beta > 0 and predicted > prior:
            # optional speed correction from the innovation
            rel = (measured_m - predicted) / (predicted - prior)
            self.speed_scale = float(np.clip(self.speed_scale * (1.0 + self.beta * rel), 0.2, 5.0))
        self.distance_m = min(max(updated, prior), self.route_length_m)
        self.clock = max(self.clock, timestamp)
        return self.remaining_eta("measurement")

    def on_position(
        self, timestamp: float, position: Sequence[float], route: RoutePolyline, max_distance_m: float = 50.0
    ) -> EtaReport | None:
        """Snap a raw (lon, lat) fix to ``route`` and blend it; off-route fixes are ignored."""
        dist, offset = nearest_point_on_polyline(position, route)
        if dist > max_distance_m:
            log.warning("trip %s: fix at %s is %.1f m off route, ignored", self.trip_id, timestamp, dist)
            return None
        # route arc length and segment lengths can disagree slightly after merging
        return self.on_measurement(timestamp, offset * self.route_length_m / route.length_m)


def arrival_errors(
    reports: Iterable[EtaReport],
    route_length_m: float,
    arrival: float,
    true_offset: Callable[[float], float] | None = None,
) -> list[tuple[float, float]]:
    """(remaining distance, |predicted arrival - actual arrival|) for each report.

    Without ``true_offset`` the remaining distance is the tracker's own. With
    it (time -> true arc offset) the bus's actual remaining distance is used
    and reports issued after the actual arrival are not scored.
    """
    out = []
    for r in reports:
        if true_offset is None:
            remaining = route_length_m - r.distance_m
        elif r.timestamp > arrival:
            continue
        else:
            remaining = route_length_m - float(true_offset(r.timestamp))
        out.append((remaining, abs(r.timestamp + r.eta_end_s - arrival)))
    return out


def error_by_remaining_distance(
    records: Iterable[tuple[float, float]], bin_m: float = 500.0
) -> list[tuple[float, float, int, float]]:
    """Mean absolute error per remaining-distance bin, nearest-to-end bin first."""
    if bin_m <= 0:
        raise ValueError("bin width must be positive")
    bins: dict[int, list[float]] = {}
    for remaining, err in records:
        bins.setdefault(int(max(remaining, 0.0) // bin_m), []).append(err)
    return [(b * bin_m, (b + 1) * bin_m, len(v), float(np.mean(v))) for b, v in sorted(bins.items())]


def replay(
    tracker: TripTracker,
    measurements: Iterable[tuple[float, float]],
    until: float | None = None,
    dwell_for_time: Callable[[float], Sequence[float] | None] | None = None,
    slot_of: Callable[[float], object] | None = None,
) -> Iterator[EtaReport]:
    """Drive a tracker with ticks every ``tick_s`` plus timestamped fixes.

    ``measurements`` are ``(timestamp, arc offset)`` pairs in time order. When
    ``slot_of`` reports a new slot, fresh dwell predictions are pulled from
    ``dwell_for_time``. Ticks stop once the tracker reaches the route end or
    the clock passes ``until``.
    """
    fixes = sorted(measurements)
    if until is None:
        until = fixes[-1][0] if fixes else tracker.clock
    current_slot = slot_of(tracker.clock) if slot_of else None
    next_tick = tracker.clock + tracker.tick_s
    k = 0

    def maybe_refresh(t: float):
        nonlocal current_slot
        if slot_of is None or dwell_for_time is None:
            return
        s = slot_of(t)
        if s != current_slot:
            current_slot = s
            fresh = dwell_for_time(t)
            if fresh is not None:
                tracker.refresh_dwell(fresh)

    while True:
        t_fix = fixes[k][0] if k < len(fixes) else float("inf")
        if t_fix <= next_tick and k < len(fixes):
            maybe_refresh(t_fix)
            yield tracker.on_measurement(*fixes[k])
            k += 1
            continue
        if next_tick > until or tracker.distance_m >= tracker.route_length_m:
            if k >= len(fixes):
                break
            next_tick = t_fix
            continue
        maybe_refresh(next_tick)
        yield tracker.tick(next_tick)
        next_tick += tracker.tick_s


class SlotDwellPredictor:
    """Per-segment dwell predictions for the hour slot containing a timestamp.

    The model input for slot ``s`` of a day is the previous ``H`` slots of that
    day from the feature matrix. Slots before the ``H``-th, days missing from
    the matrix, and times outside the slot range fall back to each segment's
    training mean for the missing inputs (the slot index is clamped).
    Predictions are floored at ``min_fraction`` of the mean so the tracker
    never receives a non-positive dwell.
    """

    def __init__(self, model, features=None, slots=None, min_fraction: float = 0.1):
        from .ingest import SlotConfig

        self.model = model
        self.features = features
        self.slots = slots or SlotConfig()
        self.min_fraction = min_fraction
        self._day_col = {}
        if features is not None:
            for j, label in enumerate(features.slot_labels):
                day = label[:10]
                self._day_col.setdefault(day, j)
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def slot_key(self, t: float) -> tuple[str, int]:
        from .ingest import format_timestamp

        loc = self.slots.locate(t)
        if loc is not None:
            return loc
        day = format_timestamp(t + self.slots.utc_offset_h * 3600.0)[:10]
        hour = ((t / 3600.0 + self.slots.utc_offset_h) % 24.0) - self.slots.first_hour
        return day, 0 if hour < 0 else self.slots.n_slots - 1

    def dwell_at(self, t: float) -> np.ndarray:
        key = self.slot_key(t)
        if key not in self._cache:
            self._cache[key] = self._predict(*key)
        return self._cache[key]

    def _predict(self, day: str, slot: int) -> np.ndarray:
        h = self.model.h
        mean = self.model.mean
        x = np.repeat(mean[:, None], h, axis=1)
        start = self._day_col.get(day)
        if start is not None:
            for k in range(h):
                s = slot - h + k
                if s >= 0:
                    x[:, k] = self.features.values[:, start + s]
        y = self.model.predict(x)
        return np.maximum(y, self.min_fraction * mean)
