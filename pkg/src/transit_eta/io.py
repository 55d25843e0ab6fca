"""GeoJSON and CSV persistence for routes and segment networks.

Coordinates follow RFC 7946 order (lon, lat). Floats are written with
``repr`` precision so that reading back reproduces them exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely.geometry import mapping, shape

from .geo_core import RoutePolyline
from .segmentation import EpsilonSearchResult, RouteSpan, Segment, SegmentNetwork


def _dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def _coords(a: np.ndarray) -> list[list[float]]:
    return [[float(x), float(y)] for x, y in np.asarray(a)]


def write_routes(routes: Iterable[RoutePolyline], path: str | Path) -> None:
    features = [
        {
            "type": "Feature",
            "properties": {"route_id": r.route_id},
            "geometry": {"type": "LineString", "coordinates": _coords(r.points)},
        }
        for r in routes
    ]
    _dump({"type": "FeatureCollection", "features": features}, Path(path))


def read_routes(path: str | Path) -> list[RoutePolyline]:
    """Routes from a FeatureCollection of LineStrings with a ``route_id`` property."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: expected a GeoJSON FeatureCollection")
    out = []
    for i, feat in enumerate(doc["features"]):
        geom = feat.get("geometry") or {}
        if geom.get("type") != "LineString":
            raise ValueError(f"{path}: feature {i} is not a LineString")
        rid = (feat.get("properties") or {}).get("route_id", feat.get("id", f"route{i}"))
        out.append(RoutePolyline.from_points(str(rid), geom["coordinates"]))
    return out


def _line_geometry(parts: Sequence[np.ndarray]) -> dict:
    if len(parts) == 1:
        return {"type": "LineString", "coordinates": _coords(parts[0])}
    return {"type": "MultiLineString", "coordinates": [_coords(p) for p in parts]}


def segments_feature_collection(segments: Iterable[Segment]) -> dict:
    feats = []
    for s in segments:
        feats.append(
            {
                "type": "Feature",
                "properties": {
                    "segment_id": s.segment_id,
                    "length_m": s.length_m,
                    "n_s": s.n_s,
                    "density": s.density,
                    "source_route_ids": list(s.source_route_ids),
                },
                "geometry": _line_geometry(s.parts),
            }
        )
    return {"type": "FeatureCollection", "features": feats}


def write_network(net: SegmentNetwork, routes: Iterable[RoutePolyline], out_dir: str | Path) -> None:
    """Write segments, polygons, adjacency edge list, route sequences and routes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(segments_feature_collection(net.segments), out / "segments.geojson")
    polys = [
        {
            "type": "Feature",
            "properties": {"segment_id": s.segment_id},
            "geometry": mapping(s.polygon) if s.polygon is not None else None,
        }
        for s in net.segments
    ]
    _dump({"type": "FeatureCollection", "features": polys}, out / "segment_polygons.geojson")
    ids = net.segment_ids
    with open(out / "adjacency.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_a", "segment_b"])
        for i, j in zip(*np.nonzero(np.triu(net.adjacency))):
            w.writerow([ids[i], ids[j]])
    with open(out / "route_sequences.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["route_id", "order", "segment_id", "start_m", "end_m"])
        for rid in sorted(net.route_sequences):
            for k, span in enumerate(net.route_sequences[rid]):
                w.writerow([rid, k, ids[span.segment_index], repr(span.start_m), repr(span.end_m)])
    with open(out / "boundary_pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_a", "segment_b"])
        for i, j in sorted(net.boundary_pairs):
            w.writerow([ids[i], ids[j]])
    write_routes(routes, out / "routes.geojson")


def read_network(net_dir: str | Path) -> tuple[SegmentNetwork, dict[str, RoutePolyline]]:
    d = Path(net_dir)
    with open(d / "segments.geojson") as fh:
        doc = json.load(fh)
    polys = {}
    if (d / "segment_polygons.geojson").exists():
        with open(d / "segment_polygons.geojson") as fh:
            for f in json.load(fh)["features"]:
                if f["geometry"] is not None:
                    polys[f["properties"]["segment_id"]] = shape(f["geometry"])
    segments = []
    for f in doc["features"]:
        p, g = f["properties"], f["geometry"]
        parts = [g["coordinates"]] if g["type"] == "LineString" else g["coordinates"]
        segments.append(
            Segment(
                p["segment_id"],
                tuple(np.asarray(c, dtype=float) for c in parts),
                float(p["length_m"]),
                float(p["n_s"]),
                tuple(p.get("source_route_ids", [])),
                polys.get(p["segment_id"]),
            )
        )
    index = {s.segment_id: i for i, s in enumerate(segments)}
    n = len(segments)
    adj = np.zeros((n, n), dtype=np.int8)
    with open(d / "adjacency.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i, j = index[row["segment_a"]], index[row["segment_b"]]
            adj[i, j] = adj[j, i] = 1
    seqs: dict[str, list[RouteSpan]] = {}
    with open(d / "route_sequences.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            seqs.setdefault(row["route_id"], []).append(
                (int(row["order"]), RouteSpan(index[row["segment_id"]], float(row["start_m"]), float(row["end_m"])))
            )
    sequences = {rid: [s for _, s in sorted(v, key=lambda t: t[0])] for rid, v in seqs.items()}
    boundary = set()
    if (d / "boundary_pairs.csv").exists():
        with open(d / "boundary_pairs.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                boundary.add((index[row["segment_a"]], index[row["segment_b"]]))
    routes = {r.route_id: r for r in read_routes(d / "routes.geojson")}
    return SegmentNetwork(segments, adj, sequences, boundary), routes


def write_epsilon_search(results: Iterable[EpsilonSearchResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["route_id", "epsilon", "cost", "n_segments", "chosen"])
        for r in results:
            for e, c, n in zip(r.grid, r.costs, r.segment_counts):
                w.writerow([r.route_id, repr(float(e)), repr(float(c)), int(n), int(e == r.best_epsilon)])


def write_polygons(polygons, path: str | Path, ids: Sequence[str] | None = None) -> None:
    feats = []
    for k, poly in enumerate(polygons):
        feats.append(
            {
                "type": "Feature",
                "properties": {"id": ids[k] if ids else k},
                "geometry": mapping(poly),
            }
        )
    _dump({"type": "FeatureCollection", "features": feats}, Path(path))


def read_polygons(path: str | Path) -> list:
    with open(path) as fh:
        doc = json.load(fh)
    return [shapely.geometry.shape(f["geometry"]) for f in doc["features"]]
