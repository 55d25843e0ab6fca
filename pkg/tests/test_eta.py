import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import euler_advance, replay_synth_trip
from transit_eta.eta import (
    EtaReport,
    TripTracker,
    alpha_beta_update,
    arrival_errors,
    error_by_remaining_distance,
    replay,
)
from transit_eta.geo_core import RoutePolyline, unproject_local
from transit_eta.synth import SynthConfig, generate_city


def tracker(lengths=(200.0, 300.0, 500.0), dwell=(20.0, 60.0, 50.0), **kw):
    return TripTracker("t", np.array(lengths), np.array(dwell), **kw)


# --- blend ----------------------------------------------------------------------


def test_alpha_beta_endpoints_and_operating_value():
    assert alpha_beta_update(1000.0, 900.0, 1.0) == 1000.0
    assert alpha_beta_update(1000.0, 900.0, 0.0) == 900.0
    assert alpha_beta_update(1000.0, 900.0, 0.9) == pytest.approx(990.0, abs=1e-12)
    with pytest.raises(ValueError):
        alpha_beta_update(1.0, 2.0, 1.1)


# --- prediction -------------------------------------------------------------------


def test_advance_one_full_segment_and_half():
    tr = tracker()
    assert tr.predict_advance(20.0) == 200.0
    assert tr.predict_advance(30.0, start_m=200.0) == pytest.approx(350.0)


def test_advance_clamped_at_route_end():
    tr = tracker()
    assert tr.predict_advance(1e6) == 1000.0
    with pytest.raises(ValueError):
        tr.predict_advance(-1.0)


def test_advance_matches_fine_step_euler():
    lengths, dwell = np.array([120.0, 80.0, 260.0, 40.0]), np.array([17.0, 23.0, 31.0, 9.0])
    tr = tracker(lengths, dwell)
    for start, dt in [(0.0, 45.3), (50.0, 60.0), (110.0, 70.25)]:
        assert abs(tr.predict_advance(dt, start) - euler_advance(lengths, dwell, start, dt)) < 0.1


# --- remaining ETA -----------------------------------------------------------------


def test_eta_at_start_and_end():
    tr = tracker()
    assert tr.remaining_eta().eta_end_s == pytest.approx(130.0)
    tr.distance_m = 1000.0
    assert tr.remaining_eta().eta_end_s == 0.0


def test_eta_proration():
    # 25% into a 200 s segment, followed by 300 s of segments
    tr = tracker((400.0, 100.0, 200.0), (200.0, 100.0, 200.0), distance_m=100.0)
    assert tr.remaining_eta().eta_end_s == pytest.approx(450.0, abs=1e-12)


def test_eta_additive_over_stops():
    tr = tracker(stops_m=[150.0, 420.0, 777.0], distance_m=35.0)
    rep = tr.remaining_eta()
    assert rep.eta_s == sorted(rep.eta_s)
    for k, s in enumerate(rep.stops_m[:-1]):
        from_k = tr.time_between(s, tr.route_length_m)
        assert rep.eta_s[k] + from_k == pytest.approx(rep.eta_end_s, abs=1e-9)


def test_refresh_rejects_bad_dwell():
    with pytest.raises(ValueError):
        tracker(dwell=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        tracker(alpha_prime=1.5)


# --- measurements -------------------------------------------------------------------


def test_measurement_equal_to_prediction():
    tr = tracker(clock=0.0)
    pred = tr.predict_advance(25.0)
    rep = tr.on_measurement(25.0, pred)
    assert rep.distance_m == pytest.approx(pred) and rep.source == "measurement"


def test_backward_measurement_is_clamped():
    tr = tracker(distance_m=500.0, clock=100.0)
    rep = tr.on_measurement(100.0, 0.0)  # 0.9*500 + 0.1*0 = 450 < 500
    assert rep.distance_m == 500.0


def test_off_route_fix_ignored(caplog):
    pts = unproject_local(np.array([[0.0, 0.0], [1000.0, 0.0]]), (72.83, 21.17))
    route = RoutePolyline.from_points("r", pts)
    tr = tracker(clock=0.0)
    far = unproject_local(np.array([[300.0, 400.0]]), (72.83, 21.17))[0]
    with caplog.at_level(logging.WARNING):
        assert tr.on_position(10.0, far, route) is None
    assert tr.distance_m == 0.0 and tr.clock == 0.0
    assert "off route" in caplog.text
    near = unproject_local(np.array([[300.0, 5.0]]), (72.83, 21.17))[0]
    assert tr.on_position(10.0, near, route).distance_m > 0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(0.0, 60.0), st.floats(0.0, 1000.0)), max_size=40))
def test_distance_monotone_under_any_interleaving(events):
    tr = tracker(clock=0.0)
    now, last = 0.0, 0.0
    for is_fix, dt, where in events:
        now += dt
        rep = tr.on_measurement(now, where) if is_fix else tr.tick(now)
        assert last <= rep.distance_m <= tr.route_length_m
        assert all(e >= 0 for e in rep.eta_s)
        last = rep.distance_m


def test_report_json_is_stable():
    rep = tracker(stops_m=[300.0]).remaining_eta()
    assert rep.to_json() == (
        '{"distance_m": 0.0, "eta_s": [40.0, 130.0], "source": "predicted", '
        '"stops_m": [300.0, 1000.0], "timestamp": 0.0, "trip_id": "t"}'
    )


# --- replay ------------------------------------------------------------------------


def test_replay_orders_ticks_and_fixes():
    tr = tracker(clock=0.0, tick_s=10.0)
    reps = list(replay(tr, [(15.0, 160.0), (35.0, 450.0)], until=50.0))
    times = [r.timestamp for r in reps]
    assert times == sorted(times)
    assert [r.source for r in reps[:3]] == ["predicted", "measurement", "predicted"]


def test_replay_refreshes_dwell_on_slot_change():
    tr = tracker(clock=0.0, tick_s=10.0)
    calls = []

    def fresh(t):
        calls.append(t)
        return np.array([100.0, 100.0, 100.0])

    list(replay(tr, [], until=60.0, dwell_for_time=fresh, slot_of=lambda t: int(t // 30)))
    assert calls == [30.0, 60.0]


def synth_city():
    return generate_city(SynthConfig(seed=3, n_routes=2, points_per_route=200, n_days=2))


def test_exact_dwell_final_error_within_tick():
    gt = synth_city()
    for trip in gt.trips[::25]:
        zl = np.array([gt.zones[z].length_m for z in gt.zones_of(trip.route_id)])
        reps, total = replay_synth_trip(trip, zl, np.diff(trip.times), tick=10.0)
        errs = arrival_errors(reps, total, trip.arrival)
        assert max(e for _, e in errs) <= 10.0
        assert reps[-1].distance_m == pytest.approx(total)


def test_error_bins():
    rows = error_by_remaining_distance([(10.0, 1.0), (20.0, 3.0), (700.0, 5.0)], 500.0)
    assert rows == [(0.0, 500.0, 2, 2.0), (500.0, 1000.0, 1, 5.0)]
    with pytest.raises(ValueError):
        error_by_remaining_distance([], 0.0)


def test_arrival_errors_with_true_trajectory():
    reps = [EtaReport("t", 0.0, 100.0, [50.0], [1000.0], "predicted"),
            EtaReport("t", 40.0, 300.0, [70.0], [1000.0], "predicted"),
            EtaReport("t", 120.0, 900.0, [5.0], [1000.0], "predicted")]
    assert arrival_errors(reps, 1000.0, 100.0) == [(900.0, 50.0), (700.0, 10.0), (100.0, 25.0)]
    truth = lambda t: 10.0 * t  # noqa: E731 - bus at 10 m/s
    assert arrival_errors(reps, 1000.0, 100.0, truth) == [(1000.0, 50.0), (600.0, 10.0)]
