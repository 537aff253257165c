"""Command-line interface: ``cvcs <command> ...``.

Every command writes its outputs atomically and records a run manifest next
to them (``<file>.manifest.json`` or ``<dir>/manifest.json``).  Wall-clock
measurements go to separate timing files that the manifest lists as
volatile, so ``cvcs rerun`` can demand byte-identical results for the rest.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .archive import Archive, ArchiveError, capture_trip, decode, encode
from .evaluation import binned_rmse, ratio_sweep, rmse, speed_bins, yaw_bins
from .manifest import RunManifest, now_utc, sha256_file, write_atomic
from .recovery import SolverConfig, recover_trip
from .sampler import CaptureConfig
from .synth import SPEED_MAX_MPH, YAW_MAX_DEG_S, generate_corpus
from .traffic.scenarios import rows_to_csv, run_grid, scenario_grid
from .traffic.sim import SimConfig
from .tripcsv import CHANNEL_UNITS, CHANNELS, Trip, TripCsvError, read_trips, write_trips

log = logging.getLogger("cvcs")

EXIT_OK, EXIT_WARN, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_solver_flags(p: argparse.ArgumentParser, max_iters: int = 2000) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--method", choices=("admm", "lasso"), default="admm")
    g.add_argument("--max-iters", type=int, default=max_iters)
    g.add_argument("--abs-tol", type=float, default=1e-7)
    g.add_argument("--rel-tol", type=float, default=1e-4)
    g.add_argument("--rho", type=float, default=1.0, help="initial ADMM penalty")
    g.add_argument("--lasso-lambda", type=float, default=1e-3,
                   help="lasso weight, relative to max|Theta^T y|")
    g.add_argument("--no-enforce-observed", action="store_true",
                   help="keep the solver's values at stored samples")
    g.add_argument("--no-center", action="store_true",
                   help="solve on raw samples instead of mean-removed ones")
    g.add_argument("--no-polish", action="store_true",
                   help="skip the least-squares refit on the recovered support")


def _solver(args) -> SolverConfig:
    return SolverConfig(max_iters=args.max_iters, abs_tol=args.abs_tol, rel_tol=args.rel_tol,
                        penalty_rho=args.rho, enforce_observed=not args.no_enforce_observed,
                        method=args.method, lasso_lambda=args.lasso_lambda,
                        center=not args.no_center, polish=not args.no_polish)


def _manifest(args, argv) -> RunManifest:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    return RunManifest(command=args.command, argv=list(argv), config=cfg,
                       seed=getattr(args, "seed", None), cwd=os.getcwd(), started_utc=now_utc())


def _finish(man: RunManifest, path: Path, t0: float) -> None:
    man.wall_time_s = round(time.perf_counter() - t0, 6)
    man.write(path)


# -- gen ---------------------------------------------------------------------

def cmd_gen(args, argv) -> int:
    t0 = time.perf_counter()
    out = Path(args.output)
    trips = [Trip(tid, t, s, y) for tid, t, s, y in
             generate_corpus(args.trips, args.len, args.seed, args.profile, args.rate_hz)]
    write_trips(out, trips)
    man = _manifest(args, argv)
    man.record_outputs(out)
    _finish(man, out.with_name(out.name + ".manifest.json"), t0)
    print(f"wrote {len(trips)} trips x {args.len} samples to {out}")
    return EXIT_OK


# -- capture -----------------------------------------------------------------

def cmd_capture(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = CaptureConfig(args.block_n, args.ratio, args.seed, args.exact_m)
    trips = read_trips(args.input)
    if not trips:
        raise CliError(f"{args.input}: no trips")
    channels = [(name, CHANNEL_UNITS[name]) for name in CHANNELS]
    archive = Archive(cfg, channels, trips[0].rate_hz)
    for trip in trips:
        values = np.vstack([trip.channel(name) for name in CHANNELS])
        archive.trips.append(capture_trip(trip.trip_id, trip.t[0], trip.rate_hz, values, cfg))
    out = Path(args.output)
    write_atomic(out, encode(archive))
    man = _manifest(args, argv)
    man.record_inputs(args.input)
    man.record_outputs(out)
    _finish(man, out.with_name(out.name + ".manifest.json"), t0)
    print(f"stored fraction {archive.stored_fraction:.4f} "
          f"({archive.n_kept} of {archive.n_samples} samples, {out.stat().st_size} bytes)")
    return EXIT_OK


# -- recover -----------------------------------------------------------------

_LIMITS = {"speed_mph": (0.0, SPEED_MAX_MPH), "yaw_deg_s": (-YAW_MAX_DEG_S, YAW_MAX_DEG_S)}


def cmd_recover(args, argv) -> int:
    t0 = time.perf_counter()
    data = Path(args.input).read_bytes()
    archive = decode(data)
    solver = _solver(args)
    truth = None
    if args.truth:
        truth = {t.trip_id: t for t in read_trips(args.truth)}

    names = [name for name, _ in archive.channels]
    out_trips, diag_trips, timing_trips, warnings = [], [], [], []
    for at in archive.trips:
        recovered, diag_ch, time_ch = {}, {}, {}
        for c, (name, unit) in enumerate(archive.channels):
            sig, diag = recover_trip(at.compressed(c, archive.config.block_len, unit), solver)
            x = sig.samples
            if name in _LIMITS:
                # keep the output inside the record schema's value range
                x = np.clip(x, *_LIMITS[name])
            recovered[name] = x
            entry = {"blocks": [{k: v for k, v in asdict(b).items() if k != "wall_time_s"}
                                for b in diag.blocks],
                     "unconverged": diag.unconverged, "fallbacks": diag.fallbacks}
            if truth is not None:
                entry["rmse"] = _truth_rmse(truth, at.trip_id, name, x)
            diag_ch[name] = entry
            time_ch[name] = {"mean_time_per_recovery_s": diag.mean_time_per_recovery_s}
            warnings += [f"{at.trip_id}/{name}: block {k} did not converge"
                         for k in diag.unconverged]
            warnings += [f"{at.trip_id}/{name}: block {k} had no stored samples"
                         for k in diag.fallbacks]
        t = at.t0 + np.arange(at.n_samples) / at.rate_hz
        zeros = np.zeros(at.n_samples)
        out_trips.append(Trip(at.trip_id, t, recovered.get("speed_mph", zeros),
                              recovered.get("yaw_deg_s", zeros)))
        diag_trips.append({"trip_id": at.trip_id, "channels": diag_ch})
        timing_trips.append({"trip_id": at.trip_id, "channels": time_ch})

    out = Path(args.output)
    diag_path = out.with_name(out.stem + ".diagnostics.json")
    timing_path = out.with_name(out.stem + ".timing.json")
    write_trips(out, out_trips)
    diagnostics = {"solver": asdict(solver), "channels": names, "trips": diag_trips,
                   "warnings": warnings}
    if truth is not None:
        diagnostics["corpus_rmse"] = _corpus_rmse(truth, out_trips, names)
    write_atomic(diag_path, json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
    write_atomic(timing_path, json.dumps(
        {"trips": timing_trips, "wall_time_s": time.perf_counter() - t0}, indent=2) + "\n")

    man = _manifest(args, argv)
    man.record_inputs(*[p for p in (args.input, args.truth) if p])
    man.record_outputs(out, diag_path)
    man.record_outputs(timing_path, volatile=True)
    _finish(man, out.with_name(out.name + ".manifest.json"), t0)

    for w in warnings[:5]:
        log.warning(w)
    if len(warnings) > 5:
        log.warning("... %d more; see %s", len(warnings) - 5, diag_path)
    print(f"recovered {len(out_trips)} trips to {out}; {len(warnings)} warnings")
    if truth is not None:
        for name, val in diagnostics["corpus_rmse"].items():
            print(f"corpus RMSE {name}: {val['rmse']:.6g} (normalised {val['nrmse']:.6g})")
    if warnings and args.strict:
        return EXIT_WARN
    return EXIT_OK


def _truth_rmse(truth: dict, trip_id: str, name: str, x) -> float:
    if trip_id not in truth:
        raise CliError(f"truth file has no trip {trip_id!r}")
    ref = truth[trip_id].channel(name)
    if ref.size != x.size:
        raise CliError(f"trip {trip_id!r}: truth has {ref.size} samples, archive {x.size}")
    return rmse(ref, x)


def _corpus_rmse(truth: dict, trips: list[Trip], names) -> dict:
    out = {}
    for name in names:
        ref = np.concatenate([truth[t.trip_id].channel(name) for t in trips])
        rec = np.concatenate([t.channel(name) for t in trips])
        err = rmse(ref, rec)
        sd = float(np.std(ref))
        out[name] = {"rmse": err, "nrmse": err / sd if sd > 0 else None}
    return out


# -- sweep -------------------------------------------------------------------

_BIN_CHANNEL = {"speed": "speed_mph", "yaw": "yaw_deg_s"}


def cmd_sweep(args, argv) -> int:
    t0 = time.perf_counter()
    for r in args.ratios:
        if not 0.0 < r <= 1.0:
            raise CliError(f"--ratios: {r} outside (0, 1]")
    for n in args.ns:
        if n < 2:
            raise CliError(f"--ns: block length {n} must be >= 2")
    trips = read_trips(args.input)
    if not trips:
        raise CliError(f"{args.input}: no trips")
    solver = _solver(args)
    outdir = Path(args.output)
    signals = [t.signal(args.channel) for t in trips]
    keep = (args.bin_n, args.bin_ratio)
    result, kept = ratio_sweep(signals, args.ns, args.ratios, solver, args.seed,
                               keep_recovered=keep)
    files = []
    write_atomic(outdir / "sweep.csv", result.to_csv(timing=False))
    files.append(outdir / "sweep.csv")
    write_atomic(outdir / "sweep_timing.csv", result.to_csv(timing=True))

    for kind in args.bins or []:
        channel = _BIN_CHANNEL[kind]
        truth_sigs = [t.signal(channel) for t in trips]
        if channel == args.channel and kept is not None:
            rec = kept
        else:
            _, rec = ratio_sweep(truth_sigs, [args.bin_n], [args.bin_ratio], solver, args.seed,
                                 keep_recovered=keep)
        spec = speed_bins() if kind == "speed" else yaw_bins()
        res = binned_rmse(np.concatenate([s.samples for s in truth_sigs]),
                          np.concatenate([s.samples for s in rec]), spec)
        path = outdir / f"binned_{kind}.csv"
        write_atomic(path, res.to_csv())
        files.append(path)

    man = _manifest(args, argv)
    man.record_inputs(args.input)
    man.record_outputs(*files)
    man.record_outputs(outdir / "sweep_timing.csv", volatile=True)
    _finish(man, outdir / "manifest.json", t0)
    for row in result.rows:
        print(f"N={row.block_len:<5d} ratio={row.compression_ratio:<5g} "
              f"rmse={row.mean_rmse:.6g} time/block={row.mean_time_per_recovery_s:.3g}s")
    return EXIT_OK


# -- simulate ----------------------------------------------------------------

def cmd_simulate(args, argv) -> int:
    t0 = time.perf_counter()
    try:
        base = SimConfig(road_length_miles=args.road_miles, lanes=args.lanes,
                         num_segments=args.segments, interval_s=args.interval_s,
                         horizon_intervals=args.horizon_intervals, mpr=args.mpr,
                         missing_penalty=args.missing_penalty)
        grid = scenario_grid(base, obu_capacity=args.obu_capacity,
                             capture_rate_hz=args.capture_hz,
                             arrival_rate_vph=args.arrival_rate,
                             compression_ratio=args.ratio)
    except ValueError as exc:
        raise CliError(f"invalid scenario grid: {exc}") from exc
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1")
    seeds = list(range(args.seed, args.seed + args.seeds))
    rows = run_grid(grid, seeds)
    outdir = Path(args.output)
    path = outdir / "mape.csv"
    write_atomic(path, rows_to_csv(rows))
    man = _manifest(args, argv)
    man.record_outputs(path)
    _finish(man, outdir / "manifest.json", t0)

    means: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        means.setdefault((r.scenario, r.source), []).append(r.mape)
    for sc in grid:
        parts = "  ".join(f"{d} {np.mean(means[(sc.name, d)]):.4f}" for d in ("LP", "CV", "CS"))
        print(f"{sc.name}: {parts}")
    return EXIT_OK


# -- rerun -------------------------------------------------------------------

def cmd_rerun(args, argv) -> int:
    man = RunManifest.read(args.manifest)
    for path, digest in man.inputs.items():
        if not Path(path).exists():
            raise CliError(f"input {path} is missing")
        if sha256_file(path) != digest:
            raise CliError(f"input {path} changed since the recorded run")
    old_cwd = os.getcwd()
    os.chdir(man.cwd)
    try:
        code = main(man.argv)
    finally:
        os.chdir(old_cwd)
    if code == EXIT_ERROR:
        return code
    bad = [p for p, d in man.outputs.items() if not Path(p).exists() or sha256_file(p) != d]
    for p in bad:
        print(f"MISMATCH {p}")
    print(f"{len(man.outputs) - len(bad)} of {len(man.outputs)} outputs identical")
    return EXIT_WARN if bad else code


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvcs", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic trip corpus")
    g.add_argument("--trips", type=int, default=10)
    g.add_argument("--len", type=int, default=2000, help="samples per trip")
    g.add_argument("--profile", choices=("speed", "yaw", "both"), default="both")
    g.add_argument("--rate-hz", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("capture", help="randomly thin a trip CSV into a CZT1 archive")
    c.add_argument("input")
    c.add_argument("--ratio", type=float, default=0.2)
    c.add_argument("--block-n", type=int, default=500)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--exact-m", action="store_true",
                   help="keep exactly round(ratio*N) samples per block")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_capture)

    r = sub.add_parser("recover", help="recover full-rate trips from an archive")
    r.add_argument("input")
    r.add_argument("--truth", help="original CSV, for per-trip RMSE")
    r.add_argument("--strict", action="store_true",
                   help="exit 1 if any block is unconverged or empty")
    _add_solver_flags(r)
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_recover)

    s = sub.add_parser("sweep", help="RMSE and time over compression ratios and block sizes")
    s.add_argument("input")
    s.add_argument("--ratios", type=_floats, default=[0.1, 0.2, 0.4, 0.6, 0.8])
    s.add_argument("--ns", type=_ints, default=[100, 500, 1000])
    s.add_argument("--channel", choices=CHANNELS, default="speed_mph")
    s.add_argument("--bins", choices=("speed", "yaw"), action="append",
                   help="binned RMSE panel (repeatable)")
    s.add_argument("--bin-n", type=int, default=500)
    s.add_argument("--bin-ratio", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    _add_solver_flags(s)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("simulate", help="travel-time MAPE over a scenario grid")
    m.add_argument("--obu-capacity", type=_ints, default=[50, 100, 200, 400])
    m.add_argument("--capture-hz", type=_floats, default=[10.0, 1.0])
    m.add_argument("--arrival-rate", type=_floats, default=[1200.0], help="vehicles per hour")
    m.add_argument("--ratio", type=_floats, default=[0.2], help="CS compression ratio")
    m.add_argument("--mpr", type=float, default=0.6, help="CV market penetration")
    m.add_argument("--road-miles", type=float, default=5.0)
    m.add_argument("--lanes", type=int, default=2)
    m.add_argument("--segments", type=int, default=10)
    m.add_argument("--interval-s", type=float, default=300.0)
    m.add_argument("--horizon-intervals", type=int, default=24)
    m.add_argument("--missing-penalty", type=float, default=1.0)
    m.add_argument("--seeds", type=int, default=20, help="number of seeded runs")
    m.add_argument("--seed", type=int, default=0, help="first seed; runs use seed, seed+1, ...")
    m.add_argument("-o", "--output", required=True)
    m.set_defaults(func=cmd_simulate)

    rr = sub.add_parser("rerun", help="re-execute a recorded run and compare outputs")
    rr.add_argument("manifest")
    rr.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args, argv)
    except (CliError, TripCsvError, ArchiveError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
