import numpy as np
import pytest
from shapely.ops import unary_union

from transit_eta.geo_core import RoutePolyline, dilate_polyline, douglas_peucker, unproject_local
from transit_eta.hexgrid import HexDensityMap, HexGridConfig, build_density_map, hex_of, hexes_on_line
from transit_eta.segmentation import (
    DEFAULT_DILATION,
    RouteSpan,
    Segment,
    SegmentNetwork,
    build_network,
    connectivity_matrix,
    default_epsilon_grid,
    merge_segments,
    message_density,
    optimize_epsilon,
    segment_messages,
    segment_route,
    segmentation_cost,
)

ORIGIN = (72.83, 21.17)
GRID = HexGridConfig(ORIGIN, 25.0)


def route(rid, xy):
    return RoutePolyline.from_points(rid, unproject_local(np.asarray(xy, dtype=float), ORIGIN))


def wiggly(rid, n=200, step=20.0, seed=0, offset=(0.0, 0.0), heading=0.0):
    rng = np.random.default_rng(seed)
    h = heading + np.cumsum(rng.normal(0, 0.08, n))
    xy = np.cumsum(np.column_stack([step * np.cos(h), step * np.sin(h)]), axis=0) + offset
    return route(rid, xy)


def messages_along(routes, per_trip=30, trips=5, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    for r in routes:
        for t in range(trips):
            for o in rng.uniform(0, r.length_m, per_trip):
                out.append((f"{r.route_id}-{t}", tuple(r.point_at(o))))
    return out


def seg(sid, length, n_s):
    return Segment(sid, (np.zeros((2, 2)),), length, n_s)


# --- densities and cost --------------------------------------------------------


def test_message_density_reference_values():
    assert message_density(24, 1144) == pytest.approx(0.021, abs=5e-4)
    assert message_density(24, 154) == pytest.approx(0.156, abs=5e-4)
    assert message_density(0, 10) == 0.0
    with pytest.raises(ValueError):
        message_density(3, 0.0)


def test_segment_messages_sum():
    a, b = tuple(unproject_local(np.array([[0.0, 0.0]]), ORIGIN)[0]), tuple(
        unproject_local(np.array([[100.0, 0.0]]), ORIGIN)[0])
    empty = HexDensityMap(GRID)
    assert segment_messages(a, b, empty) == 0.0
    cells = hexes_on_line(a, b, GRID)
    m = HexDensityMap(GRID, {cells[0]: 1.0, cells[1]: 2.0, cells[2]: 3.0})
    assert segment_messages(a, b, m) == 6.0


def test_segment_messages_compositional_oracle():
    r = wiggly("r", 100, seed=3)
    dmap = build_density_map(messages_along([r]), GRID)
    rng = np.random.default_rng(0)
    for _ in range(20):
        i, j = sorted(rng.choice(len(r), 2, replace=False))
        a, b = r.points[i], r.points[j]
        expect = sum(dmap.entries.get(h, 0.0) for h in hexes_on_line(a, b, GRID))
        assert segment_messages(a, b, dmap) == expect


def test_cost_hand_arithmetic():
    segs = [seg("a", 100.0, 10.0), seg("b", 300.0, 60.0)]  # densities 0.1, 0.2
    assert segmentation_cost(segs) == pytest.approx(2.5e-4, rel=1e-12)


def test_cost_zero_when_uniform_and_homogeneous_in_length():
    assert segmentation_cost([seg("a", 50.0, 5.0), seg("b", 80.0, 8.0)]) == 0.0
    segs = [seg("a", 100.0, 10.0), seg("b", 300.0, 60.0)]
    doubled = [seg("a", 200.0, 20.0), seg("b", 600.0, 120.0)]
    assert segmentation_cost(doubled) == pytest.approx(segmentation_cost(segs) / 2, rel=1e-12)


# --- segment_route / optimize_epsilon -------------------------------------------


def test_straight_route_single_segment():
    r = route("s", [[0, 0], [500, 0]])
    dmap = HexDensityMap(GRID)
    assert len(segment_route(r, 1e-4, dmap)) == 1


def test_segments_cover_simplified_chain():
    r = wiggly("w", 300, seed=4)
    dmap = build_density_map(messages_along([r]), GRID)
    eps = 2e-4
    segs = segment_route(r, eps, dmap)
    keep = douglas_peucker(r, eps)
    ends = [s.parts[0][0] for s in segs] + [segs[-1].parts[0][-1]]
    assert np.array_equal(np.array(ends), r.points[keep])
    assert sum(s.length_m for s in segs) == pytest.approx(r.length_m, rel=1e-12)


def test_default_grid_open_interval():
    g = default_epsilon_grid()
    assert len(g) == 20 and g.min() > 1e-4 and g.max() < 1e-3
    assert np.all(np.diff(np.log(g)) == pytest.approx(np.diff(np.log(g))[0]))


def test_optimize_single_value_and_bounds():
    r = wiggly("w", 100, seed=5)
    dmap = build_density_map(messages_along([r]), GRID)
    assert optimize_epsilon(r, dmap, [3e-4]).best_epsilon == 3e-4
    with pytest.raises(ValueError):
        optimize_epsilon(r, dmap, [1e-4])
    with pytest.raises(ValueError):
        optimize_epsilon(r, dmap, [2e-3])


def test_optimize_matches_reevaluation():
    r = wiggly("w", 300, seed=6)
    dmap = build_density_map(messages_along([r], per_trip=60), GRID)
    grid = np.logspace(-4, -3, 12)[1:-1]
    res = optimize_epsilon(r, dmap, grid)
    costs = [segmentation_cost(segment_route(r, e, dmap)) for e in grid]
    assert res.best_cost == min(costs)
    assert all(res.best_cost <= c for c in costs)
    assert res.best_epsilon == max(e for e, c in zip(grid, costs) if c == min(costs))


def test_optimize_tie_goes_to_larger_epsilon():
    r = route("s", [[0, 0], [300, 0], [600, 0]])  # collinear: one segment at every tolerance
    res = optimize_epsilon(r, HexDensityMap(GRID), [2e-4, 5e-4])
    assert res.costs[0] == res.costs[1]
    assert res.best_epsilon == 5e-4


def test_long_route_gives_tens_of_segments():
    r = wiggly("long", 1260, step=20.0, seed=7)
    dmap = build_density_map(messages_along([r], per_trip=300), GRID)
    res = optimize_epsilon(r, dmap)
    n = len(segment_route(r, res.best_epsilon, dmap))
    assert 5 <= n < 200


# --- merging -------------------------------------------------------------------


def _per_route(routes, dmap, eps=3e-4):
    return {r.route_id: segment_route(r, eps, dmap) for r in routes}


def test_disjoint_routes_merge_to_sum():
    a = wiggly("A", 80, seed=1)
    b = wiggly("B", 80, seed=2, offset=(0.0, 3000.0))
    dmap = build_density_map(messages_along([a, b]), GRID)
    per = _per_route([a, b], dmap)
    net = merge_segments(per, {"A": a, "B": b}, dmap)
    assert len(net) == len(per["A"]) + len(per["B"])
    adj = connectivity_matrix(net)
    ia = [i for i, s in enumerate(net.segments) if s.source_route_ids == ("A",)]
    ib = [i for i, s in enumerate(net.segments) if s.source_route_ids == ("B",)]
    assert adj[np.ix_(ia, ib)].sum() == 0


def test_duplicate_route_is_idempotent():
    a = wiggly("A", 150, seed=3)
    b = RoutePolyline.from_points("B", a.points)
    dmap = build_density_map(messages_along([a, b]), GRID)
    per = _per_route([a, b], dmap)
    net = merge_segments(per, {"A": a, "B": b}, dmap)
    assert len(net) == len(per["A"])
    assert [s.segment_index for s in net.route_sequences["A"]] == [
        s.segment_index for s in net.route_sequences["B"]]


def test_plus_sign_area_accounting():
    h = route("H", [[-600, 0], [600, 0]])
    v = route("V", [[0, -400], [0, 400]])
    dmap = build_density_map(messages_along([h, v]), GRID)
    per = _per_route([h, v], dmap)
    net = merge_segments(per, {"H": h, "V": v}, dmap)
    before = unary_union([dilate_polyline(s.geometry, DEFAULT_DILATION) for ss in per.values() for s in ss]).area
    after = unary_union([s.polygon for s in net.segments]).area
    assert abs(after - before) <= 1e-6 * before
    # the larger (horizontal) polygon is kept whole; the vertical one loses the overlap
    total = sum(s.polygon.area for s in net.segments)
    assert abs(total - after) <= 1e-6 * after
    assert len(net) == 3
    for i, s in enumerate(net.segments):
        for j, t in enumerate(net.segments):
            if i < j:
                assert s.polygon.intersection(t.polygon).area <= 1e-12


def test_every_route_fully_sequenced():
    routes = [wiggly("A", 120, seed=8), wiggly("B", 120, seed=8, heading=0.4)]
    dmap = build_density_map(messages_along(routes), GRID)
    net, _ = build_network(routes, dmap, default_epsilon_grid(5))
    for r in routes:
        spans = net.route_sequences[r.route_id]
        assert spans[0].start_m == pytest.approx(0.0, abs=1e-9)
        assert spans[-1].end_m == pytest.approx(r.length_m, rel=1e-9)
        for p, q in zip(spans[:-1], spans[1:]):
            assert p.end_m == q.start_m


# --- connectivity ----------------------------------------------------------------


def _chain_net(n=3):
    segs = [seg(f"S{i}", 100.0, 1.0) for i in range(n)]
    spans = [RouteSpan(i, 100.0 * i, 100.0 * (i + 1)) for i in range(n)]
    return SegmentNetwork(segs, np.zeros((n, n)), {"R": spans})


def test_chain_is_tridiagonal():
    adj = connectivity_matrix(_chain_net(3))
    assert adj.tolist() == [[0, 1, 0], [1, 0, 1], [0, 1, 0]]


def test_disjoint_block_diagonal():
    segs = [seg(f"S{i}", 100.0, 1.0) for i in range(4)]
    net = SegmentNetwork(segs, np.zeros((4, 4)), {
        "A": [RouteSpan(0, 0, 100), RouteSpan(1, 100, 200)],
        "B": [RouteSpan(2, 0, 100), RouteSpan(3, 100, 200)],
    })
    adj = connectivity_matrix(net)
    assert adj[:2, 2:].sum() == 0 and adj[2:, :2].sum() == 0
    assert adj[0, 1] == adj[2, 3] == 1


def test_connectivity_edge_list_oracle_and_permutation():
    routes = [wiggly("A", 150, seed=9), wiggly("B", 150, seed=9, heading=0.6), wiggly("C", 150, seed=10)]
    dmap = build_density_map(messages_along(routes), GRID)
    net, _ = build_network(routes, dmap, default_epsilon_grid(4))
    adj = connectivity_matrix(net)
    edges = set()
    for spans in net.route_sequences.values():
        for p, q in zip(spans[:-1], spans[1:]):
            if p.segment_index != q.segment_index:
                edges.add(frozenset((p.segment_index, q.segment_index)))
    edges |= {frozenset(p) for p in net.boundary_pairs if p[0] != p[1]}
    oracle = np.zeros_like(adj)
    for e in edges:
        i, j = tuple(e)
        oracle[i, j] = oracle[j, i] = 1
    assert np.array_equal(adj, oracle)
    assert np.array_equal(adj, net.adjacency)

    perm = np.random.default_rng(0).permutation(len(net))
    inv = np.argsort(perm)  # new index of old segment
    pnet = SegmentNetwork(
        [net.segments[k] for k in perm],
        net.adjacency,
        {r: [RouteSpan(int(inv[s.segment_index]), s.start_m, s.end_m) for s in sp]
         for r, sp in net.route_sequences.items()},
        {(int(inv[i]), int(inv[j])) for i, j in net.boundary_pairs},
    )
    padj = connectivity_matrix(pnet)
    assert np.array_equal(padj[np.ix_(inv, inv)], adj)
