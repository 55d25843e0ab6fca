"""``transit-eta`` command-line entry point.

Every subcommand writes its outputs plus a ``*.manifest.json`` recording the
argv, effective configuration, input/output hashes and library versions.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import heapq
import json
import logging
import platform
import sys
from functools import partial
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .delay_model import (
    Dataset,
    DelayModel,
    TrainConfig,
    TrainingWindows,
    evaluate_rmse,
    fit,
    hyperparameter_search,
)
from .eta import SlotDwellPredictor, TripTracker, arrival_errors, error_by_remaining_distance, replay
from .geo_core import GeometryError
from .hexgrid import HexGridConfig, build_density_map
from .ingest import (
    FeatureMatrix,
    SlotConfig,
    assemble_trips,
    build_feature_matrix,
    format_timestamp,
    observations_from_trips,
    parse_messages,
    write_messages,
)
from .io import read_network, read_routes, write_epsilon_search, write_network, write_polygons, write_routes
from .io import segments_feature_collection
from .parallel import parallel_map
from .segmentation import build_network, default_epsilon_grid
from .synth import EPOCH_UNIX, SynthConfig, emit_messages, generate_city

log = logging.getLogger("transit_eta")


class CliError(Exception):
    """User-facing failure: printed without a traceback, exit code 2."""


# --- helpers --------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and not p.name.endswith(".manifest.json") and p.name != "manifest.json":
                h.update(p.relative_to(path).as_posix().encode())
                h.update(_sha256(p).encode())
        return h.hexdigest()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict[str, str]:
    import shapely

    return {
        "transit_eta": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "shapely": shapely.__version__,
    }


def write_manifest(
    path: Path, args: argparse.Namespace, cfg: PipelineConfig, inputs: Sequence[Path], outputs: Sequence[Path]
) -> None:
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": args.command,
        "arguments": argv,
        "config": cfg.to_dict(),
        "inputs": {str(p): _sha256(p) for p in inputs if p is not None and p.exists()},
        "outputs": {str(p): _sha256(p) for p in outputs if p.exists()},
        "versions": _versions(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise CliError(f"missing required {what}")
    if str(path) != "-" and not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _grid(cfg: PipelineConfig) -> HexGridConfig:
    return HexGridConfig((cfg.grid.origin_lon, cfg.grid.origin_lat), cfg.grid.edge_m)


def _slots(cfg: PipelineConfig) -> SlotConfig:
    return SlotConfig(cfg.ingest.first_hour, cfg.ingest.n_slots, cfg.ingest.utc_offset_h)


def _train_config(cfg: PipelineConfig) -> TrainConfig:
    m = cfg.model
    return TrainConfig(m.lr, m.epochs, m.seed, m.gcn_hidden, m.lstm_hidden, m.optimizer, m.h)


def _read_messages(path: Path):
    if str(path) == "-":
        msgs, report = parse_messages(sys.stdin.read().splitlines())
    else:
        msgs, report = parse_messages(path)
    for line_no, reason in report.rejected[:20]:
        log.warning("%s:%d rejected: %s", path, line_no, reason)
    if report.n_rejected > 20:
        log.warning("%s: %d more rejected lines", path, report.n_rejected - 20)
    if report.n_duplicates:
        log.info("%s: dropped %d duplicate messages", path, report.n_duplicates)
    return msgs, report


def _load_dataset(net_dir: Path, features: Path, cfg: PipelineConfig):
    net, _ = read_network(net_dir)
    fm = FeatureMatrix.from_csv(features)
    if fm.segment_ids != net.segment_ids:
        raise CliError(f"{features}: segment rows do not match network {net_dir}")
    ds = Dataset.from_feature_matrix(fm, net.adjacency.astype(float), cfg.model.h, cfg.model.train_fraction)
    if len(ds.train) == 0 or len(ds.test) == 0:
        raise CliError(f"{features}: too few days for a train/test split ({fm.n_days} days)")
    return net, fm, ds


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# --- subcommands ----------------------------------------------------------------


def cmd_simulate(args, cfg: PipelineConfig) -> list[Path]:
    sc = SynthConfig(
        seed=args.seed,
        n_routes=args.routes,
        n_days=args.days,
        gps_noise_m=args.gps_noise,
        message_interval_s=(args.interval[0], args.interval[1]),
        center=(cfg.grid.origin_lon, cfg.grid.origin_lat),
    )
    gt = generate_city(sc)
    msgs = emit_messages(gt)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_routes(gt.routes, out / "routes.geojson")
    write_messages(msgs, out / "messages.csv")
    _write_csv(
        out / "zones.csv",
        ["zone", "route_id", "index", "start_m", "end_m", "group", "base_speed_mps"],
        [[i, z.route_id, z.index, repr(z.start_m), repr(z.end_m), z.group, repr(z.base_speed)]
         for i, z in enumerate(gt.zones)],
    )
    d, n, p = gt.dwell.shape
    _write_csv(
        out / "zone_dwell.csv",
        ["zone", "day", "slot", "dwell_s"],
        [[z, day, s, repr(float(gt.dwell[day, z, s]))] for z in range(n) for day in range(d) for s in range(p)],
    )
    _write_csv(
        out / "trips.csv",
        ["trip_id", "route_id", "knot", "timestamp", "offset_m"],
        [[t.trip_id, t.route_id, k, repr(EPOCH_UNIX + float(tt)), repr(float(o))]
         for t in gt.trips for k, (tt, o) in enumerate(zip(t.times, t.offsets))],
    )
    log.info("simulated %d routes, %d trips, %d messages", len(gt.routes), len(gt.trips), len(msgs))
    return [out / f for f in ("routes.geojson", "messages.csv", "zones.csv", "zone_dwell.csv", "trips.csv")]


def cmd_segment(args, cfg: PipelineConfig) -> list[Path]:
    routes = read_routes(_require(args.routes, "routes file"))
    msgs, _ = _read_messages(_require(args.messages, "messages file"))
    if args.eps_grid is not None:
        cfg.segment.eps_grid = args.eps_grid
    if args.dilation is not None:
        cfg.segment.dilation = args.dilation
    grid = _grid(cfg)
    dmap = build_density_map(((m.trip_id, (m.lon, m.lat)) for m in msgs), grid)
    eps = default_epsilon_grid(cfg.segment.eps_grid)
    net, results = build_network(routes, dmap, eps, cfg.segment.dilation, cfg.segment.sliver_m, jobs=args.jobs)
    out: Path = args.out
    write_network(net, routes, out)
    dmap.to_csv(out / "density.csv")
    write_epsilon_search(results, out / "epsilon_search.csv")
    log.info("network: %d segments from %d routes", len(net), len(routes))
    return [out]


def cmd_ingest(args, cfg: PipelineConfig) -> list[Path]:
    net, routes = read_network(_require(args.network, "network directory"))
    msgs, report = _read_messages(_require(args.messages, "messages file"))
    trips = assemble_trips(msgs, routes, cfg.ingest.snap_max_m, cfg.ingest.backward_tol_m, jobs=args.jobs)
    obs = observations_from_trips(trips, net, _slots(cfg))
    fm = build_feature_matrix(obs, net.segment_ids, [s.length_m for s in net.segments], _slots(cfg))
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    fm.to_csv(out / "features.csv")
    _write_csv(
        out / "observations.csv",
        ["segment_id", "day", "slot", "dwell_s", "trip_id"],
        [[o.segment_id, o.day, o.slot, repr(o.dwell_s), o.trip_id] for o in obs],
    )
    _write_csv(
        out / "ingest_report.csv",
        ["metric", "value"],
        [
            ["lines", report.n_lines],
            ["rejected_lines", report.n_rejected],
            ["duplicates", report.n_duplicates],
            ["trips", len(trips)],
            ["rejected_fixes", sum(t.n_rejected for t in trips)],
            ["observations", len(obs)],
            ["masked_fraction", _fmt(fm.masked_fraction)],
        ],
    )
    log.info("%d trips, %d dwell observations, %.1f%% cells imputed",
             len(trips), len(obs), 100 * fm.masked_fraction)
    return [out / "features.csv", out / "features_mask.csv", out / "observations.csv", out / "ingest_report.csv"]


def _apply_model_flags(args, cfg: PipelineConfig) -> None:
    for key in ("alpha", "k", "epochs", "lr", "seed", "optimizer", "h"):
        v = getattr(args, key, None)
        if v is not None:
            cfg.set("model", key, v)


def cmd_train(args, cfg: PipelineConfig) -> list[Path]:
    _apply_model_flags(args, cfg)
    _, _, ds = _load_dataset(_require(args.network, "network directory"),
                             _require(args.features, "feature matrix"), cfg)
    model, history = fit(ds, cfg.model.alpha, cfg.model.k, _train_config(cfg))
    out: Path = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    metrics = args.metrics or out.with_suffix(".history.csv")
    _write_csv(metrics, ["epoch", "loss"], [[i, _fmt(v)] for i, v in enumerate(history)])
    log.info("trained %d epochs, final loss %.5f", len(history), history[-1])
    return [out, metrics]


def _baseline_rows(w: TrainingWindows, split: str, train_mean: np.ndarray):
    if len(w) == 0:
        return []
    m = w.mask
    rows = []
    for name, pred in (("last_slot", w.inputs[:, :, -1]), ("segment_mean", np.broadcast_to(train_mean, w.targets.shape))):
        err = (pred - w.targets)[m]
        rows.append([name, split, int(m.sum()), _fmt(np.sqrt(np.mean(err ** 2))), _fmt(np.mean(np.abs(err)))])
    return rows


def cmd_eval(args, cfg: PipelineConfig) -> list[Path]:
    model = DelayModel.load(_require(args.model, "model file"))
    cfg.model.h = model.h
    _, _, ds = _load_dataset(_require(args.network, "network directory"),
                             _require(args.features, "feature matrix"), cfg)
    rows = []
    for split, w in (("train", ds.train), ("test", ds.test)):
        pred = model.predict(w.inputs)
        err = (pred - w.targets)[w.mask]
        rows.append(["model", split, int(w.mask.sum()), _fmt(evaluate_rmse(model, w)), _fmt(np.mean(np.abs(err)))])
        rows.extend(_baseline_rows(w, split, ds.train_values.mean(axis=1)))
    _write_csv(args.out, ["predictor", "split", "n_targets", "rmse_s", "mae_s"], rows)
    return [args.out]


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def cmd_search(args, cfg: PipelineConfig) -> list[Path]:
    _apply_model_flags(args, cfg)
    _, _, ds = _load_dataset(_require(args.network, "network directory"),
                             _require(args.features, "feature matrix"), cfg)
    res = hyperparameter_search(args.alpha_grid, args.k_grid, ds, _train_config(cfg))
    _write_csv(
        args.out,
        ["alpha", "K", "rmse_s", "best"],
        [[_fmt(r["alpha"]), _fmt(r["K"]), _fmt(r["rmse"]),
          int(r["alpha"] == res.best_alpha and r["K"] == res.best_k)] for r in res.table],
    )
    log.info("best alpha=%.3f K=%.3f rmse=%.3f s", res.best_alpha, res.best_k, res.best_rmse)
    return [args.out]


def _read_truth(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    knots: dict[str, list[tuple[int, float, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            knots.setdefault(row["trip_id"], []).append(
                (int(row["knot"]), float(row["timestamp"]), float(row["offset_m"])))
    out = {}
    for tid, ks in knots.items():
        ks.sort()
        out[tid] = (np.array([k[1] for k in ks]), np.array([k[2] for k in ks]))
    return out


def _interp(times: np.ndarray, offsets: np.ndarray, t: float) -> float:
    return float(np.interp(t, times, offsets))


def _track_trip(trip, net, route_len: float, predictor: SlotDwellPredictor, eta_cfg, stops: str, horizon_s: float):
    spans = net.route_sequences[trip.route_id]
    seg_len = np.array([s.length_m for s in net.segments])
    idx = np.array([s.segment_index for s in spans])
    span_len = np.array([s.length_m for s in spans])
    keep = span_len > 0
    idx, span_len = idx[keep], span_len[keep]
    scale = span_len / seg_len[idx]

    def dwell_for(t: float) -> np.ndarray:
        return predictor.dwell_at(t)[idx] * scale

    t0, d0 = float(trip.times[0]), float(trip.offsets[0])
    stop_list = list(np.cumsum(span_len)[:-1]) if stops == "segments" else []
    tracker = TripTracker(trip.trip_id, span_len, dwell_for(t0), eta_cfg.alpha_prime, eta_cfg.tick_s,
                          distance_m=d0 * span_len.sum() / route_len, clock=t0, stops_m=stop_list)
    fixes = [(float(t), float(o) * span_len.sum() / route_len) for t, o in zip(trip.times[1:], trip.offsets[1:])]
    first = tracker.remaining_eta("measurement")
    reports = [first] + list(
        replay(tracker, fixes, until=float(trip.times[-1]) + horizon_s,
               dwell_for_time=dwell_for, slot_of=predictor.slot_key)
    )
    return reports, span_len.sum()


def cmd_predict_eta(args, cfg: PipelineConfig) -> list[Path]:
    if args.tick is not None:
        cfg.eta.tick_s = args.tick
    if args.alpha_prime is not None:
        cfg.eta.alpha_prime = args.alpha_prime
    if not 0.0 <= cfg.eta.alpha_prime <= 1.0:
        raise CliError("--alpha-prime must lie in [0, 1]")
    if cfg.eta.tick_s <= 0:
        raise CliError("--tick must be positive")
    net, routes = read_network(_require(args.network, "network directory"))
    model = DelayModel.load(_require(args.model, "model file"))
    if model.a_hat.shape[0] != len(net):
        raise CliError("model and network disagree on the number of segments")
    fm = FeatureMatrix.from_csv(_require(args.features, "feature matrix")) if args.features else None
    msgs, _ = _read_messages(_require(args.messages, "messages"))
    slots = _slots(cfg)
    if args.day:
        # keep whole trips whose first fix falls on a requested local date
        first: dict[str, float] = {}
        for m in msgs:
            first[m.trip_id] = min(first.get(m.trip_id, m.timestamp), m.timestamp)
        days = set(args.day)
        msgs = [m for m in msgs if format_timestamp(first[m.trip_id] + 3600.0 * slots.utc_offset_h)[:10] in days]
    trips = assemble_trips(msgs, routes, cfg.ingest.snap_max_m, cfg.ingest.backward_tol_m, jobs=args.jobs)
    trips = [t for t in trips if len(t.times) >= 1 and t.route_id in net.route_sequences]
    predictor = SlotDwellPredictor(model, fm, slots)
    fn = partial(_track_trip, net=net, predictor=predictor, eta_cfg=cfg.eta, stops=args.stops,
                 horizon_s=args.horizon)
    results = parallel_map(_TrackJob(fn, {r: routes[r].length_m for r in routes}), trips, args.jobs)

    merged = heapq.merge(*[r for r, _ in results], key=lambda rep: (rep.timestamp, rep.trip_id))
    outputs = []
    if args.out is None:
        for rep in merged:
            sys.stdout.write(rep.to_json() + "\n")
    else:
        with open(args.out, "w") as fh:
            for rep in merged:
                fh.write(rep.to_json() + "\n")
        outputs.append(args.out)

    if args.truth is not None:
        truth = _read_truth(_require(args.truth, "ground-truth trips file"))
        records = []
        final = []
        for trip, (reports, total) in zip(trips, results):
            if trip.trip_id not in truth:
                continue
            times, offsets = truth[trip.trip_id]
            arrival = float(times[-1])
            scale = total / offsets[-1] if offsets[-1] > 0 else 1.0
            errs = arrival_errors(reports, total, arrival, partial(_interp, times, offsets * scale))
            records.extend(errs)
            if errs:
                final.append(errs[-1][1])
        rows = [[_fmt(lo), _fmt(hi), n, _fmt(mae)] for lo, hi, n, mae in error_by_remaining_distance(records, args.bin_m)]
        metrics = args.metrics or Path("eta_metrics.csv")
        _write_csv(metrics, ["remaining_from_m", "remaining_to_m", "n_reports", "mae_s"], rows)
        if final:
            log.info("%d trips scored; mean final-report error %.1f s", len(final), float(np.mean(final)))
        outputs.append(metrics)
    return outputs


class _TrackJob:
    """Picklable wrapper for per-trip tracking in worker processes."""

    def __init__(self, fn, route_lengths):
        self.fn, self.route_lengths = fn, route_lengths

    def __call__(self, trip):
        return self.fn(trip, route_len=self.route_lengths[trip.route_id])


def cmd_export_geojson(args, cfg: PipelineConfig) -> list[Path]:
    net, routes = read_network(_require(args.network, "network directory"))
    out: Path = args.out
    if args.layer == "segments":
        with open(out, "w") as fh:
            json.dump(segments_feature_collection(net.segments), fh, sort_keys=True)
            fh.write("\n")
    elif args.layer == "polygons":
        write_polygons([s.polygon for s in net.segments], out, net.segment_ids)
    else:
        write_routes(routes.values(), out)
    return [out]


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transit-eta", description="Bus ETA from sparse GPS: segmentation, "
                                "dwell-time modelling and real-time tracking.")
    p.add_argument("--config", type=Path, help="INI config file (default: $TRANSIT_ETA_CONFIG)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-route/per-trip stages")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", help="generate a synthetic city")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--routes", type=int, default=4)
    s.add_argument("--days", type=int, default=28)
    s.add_argument("--gps-noise", type=float, default=5.0, help="GPS noise sigma in meters")
    s.add_argument("--interval", type=float, nargs=2, default=(60.0, 300.0), metavar=("MIN_S", "MAX_S"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("segment", help="segment routes into a merged network")
    s.add_argument("--routes", type=Path, required=True)
    s.add_argument("--messages", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--eps-grid", type=int, help="number of tolerance values searched")
    s.add_argument("--dilation", type=float, help="dilation radius in degrees")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("ingest", help="build the hourly dwell feature matrix")
    s.add_argument("--network", type=Path, required=True)
    s.add_argument("--messages", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_ingest)

    def model_flags(s):
        s.add_argument("--network", type=Path, required=True)
        s.add_argument("--features", type=Path, required=True)
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--optimizer", choices=("adam", "gd"))
        s.add_argument("--h", type=int, help="input window length in slots")

    s = sub.add_parser("train", help="train the delay model")
    model_flags(s)
    s.add_argument("--alpha", type=float)
    s.add_argument("--k", type=float)
    s.add_argument("--out", type=Path, required=True, help="model file (.npz)")
    s.add_argument("--metrics", type=Path, help="loss history CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("search", help="grid search over alpha and K")
    model_flags(s)
    s.add_argument("--alpha-grid", type=_float_list, default=[0.7, 0.85, 1.0])
    s.add_argument("--k-grid", type=_float_list, default=[0.5, 0.65, 0.8])
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("eval", help="score a trained model")
    s.add_argument("--network", type=Path, required=True)
    s.add_argument("--features", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict-eta", help="replay messages through real-time trackers")
    s.add_argument("--network", type=Path, required=True)
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--messages", type=Path, required=True, help="message CSV, or - for stdin")
    s.add_argument("--features", type=Path, help="feature matrix supplying recent slot history")
    s.add_argument("--tick", type=float)
    s.add_argument("--alpha-prime", type=float)
    s.add_argument("--day", action="append", help="only trips on this ISO date (repeatable)")
    s.add_argument("--stops", choices=("end", "segments"), default="end",
                   help="report ETA to route end only, or to every segment boundary")
    s.add_argument("--horizon", type=float, default=1800.0, help="seconds to keep ticking after the last fix")
    s.add_argument("--out", type=Path, help="NDJSON output (default stdout)")
    s.add_argument("--truth", type=Path, help="trips.csv from simulate, to score ETA errors")
    s.add_argument("--metrics", type=Path, help="ETA error CSV (with --truth)")
    s.add_argument("--bin-m", type=float, default=500.0, help="remaining-distance bin width")
    s.set_defaults(func=cmd_predict_eta)

    s = sub.add_parser("export-geojson", help="export network layers as GeoJSON")
    s.add_argument("--network", type=Path, required=True)
    s.add_argument("--layer", choices=("segments", "polygons", "routes"), default="segments")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_export_geojson)
    return p


def run_subcommand(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        inputs = [getattr(args, k) for k in ("routes", "messages", "network", "features", "model", "truth")
                  if isinstance(getattr(args, k, None), Path)]
        outputs = args.func(args, cfg)
        if outputs:
            target = args.out if getattr(args, "out", None) is not None else outputs[0]
            write_manifest(_manifest_path(target), args, cfg, inputs, outputs)
    except (CliError, FileNotFoundError, KeyError, ValueError, GeometryError, OSError) as exc:
        print(f"transit-eta {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
