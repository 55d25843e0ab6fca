"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np

from transit_eta.delay_model import DelayModelParams, loss_and_grad, normalize_adjacency


def gradient_toy(n=6, h=4, p=12, seed=0, gcn_hidden=5, lstm_hidden=7):
    """Small random instance: N segments, H-slot windows cut from P slots."""
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n, p))
    windows = np.stack([values[:, s : s + h] for s in range(p - h)])
    targets = np.stack([values[:, s + h] for s in range(p - h)])
    mask = rng.uniform(size=targets.shape) > 0.2
    a = (rng.uniform(size=(n, n)) > 0.5).astype(float)
    a = np.triu(a, 1)
    a_hat = normalize_adjacency(a + a.T)
    params = DelayModelParams.init(gcn_hidden, lstm_hidden, seed)
    # shift biases off zero so no ReLU sits exactly on its kink
    for name in ("b1", "b2", "bg", "bo"):
        getattr(params, name)[...] += rng.normal(0, 0.1, getattr(params, name).shape)
    return a_hat, windows, targets, mask, params


def finite_difference_check(a_hat, x, y, mask, params, step=1e-5, floor=1e-6):
    """Max elementwise relative error between analytic and central-difference gradients.

    Relative error is |a - f| / max(|a|, |f|, floor).
    """
    _, grad = loss_and_grad(a_hat, x, y, mask, params)
    worst = 0.0
    for name, w in params.items():
        g = getattr(grad, name)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + step
            lp, _ = loss_and_grad(a_hat, x, y, mask, params)
            w[idx] = orig - step
            lm, _ = loss_and_grad(a_hat, x, y, mask, params)
            w[idx] = orig
            fd = (lp - lm) / (2 * step)
            an = g[idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
    return worst


def euler_advance(lengths, dwell, start_m, dt, step=1e-3):
    """Integrate position at piecewise-constant segment speeds with a fixed step."""
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    d = float(start_m)
    n = int(round(dt / step))
    for _ in range(n):
        if d >= bounds[-1]:
            break
        i = min(int(np.searchsorted(bounds, d, side="right")) - 1, len(lengths) - 1)
        d = min(d + step * lengths[i] / dwell[i], bounds[-1])
    return d


def replay_synth_trip(trip, zone_lengths, dwell, alpha_prime=0.9, tick=10.0, gap=(60.0, 300.0), rng=None):
    """Track one synthetic trip from noiseless fixes; returns (reports, route length).

    ``dwell`` is the per-zone dwell the tracker believes; fixes are the true
    trajectory sampled at uniformly random gaps.
    """
    from transit_eta.eta import TripTracker, replay

    rng = rng or np.random.default_rng(0)
    t0 = float(trip.times[0])
    tracker = TripTracker(trip.trip_id, zone_lengths, dwell, alpha_prime, tick,
                          distance_m=float(trip.offsets[0]), clock=t0)
    fixes, t = [], t0 + rng.uniform(*gap)
    while t < trip.arrival:
        fixes.append((t, float(trip.offset_at(t))))
        t += rng.uniform(*gap)
    reports = [tracker.remaining_eta("measurement")]
    reports += list(replay(tracker, fixes, until=trip.arrival + 3600.0))
    return reports, float(np.sum(zone_lengths))
