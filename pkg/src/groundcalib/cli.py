"""Command line driver: simulate, calibrate, evaluate, sweep.

Exit codes: 0 success, 2 config error, 3 scenario error, 4 pipeline failure
without recovery.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, load_mapping
from .errors import ConfigError, EmptyScene, ScenarioError
from .metrics import summarize
from .pipeline import CalibrationReport, run_pipeline
from .scenario_io import export_scenario, import_scenario
from .simulator import ScenarioConfig, generate

EXIT_OK, EXIT_CONFIG, EXIT_SCENARIO, EXIT_PIPELINE = 0, 2, 3, 4

log = logging.getLogger("groundcalib")

CSV_FIELDS = (
    "keyframe", "frame", "timestamp", "coarse", "fine", "epipolar_accepted", "plane_accepted", "used", "failure",
    "pair_height", "window_height", "window_nx", "window_ny", "window_nz", "reported",
    "roll_deg", "pitch_deg", "yaw_deg", "height_m",
)


def scenario_config(path, seed=None) -> ScenarioConfig:
    """ScenarioConfig from a file holding a ``scenario`` section or bare fields."""
    d = load_mapping(path) if path else {}
    if "scenario" in d:
        d = d["scenario"]
    else:
        d = {k: v for k, v in d.items() if k != "pipeline"}
    if seed is not None:
        d = {**d, "seed": int(seed)}
    try:
        return ScenarioConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario config: {exc}") from exc


def write_json(obj, path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return p


def write_keyframe_csv(report: CalibrationReport, path):
    """One row per keyframe pair; the extrinsic columns hold the event reported there."""
    reported = {e.keyframe: e for e in report.events}
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for k in report.keyframes:
            e = reported.get(k.keyframe)
            n = k.window_normal or [None] * 3
            row = {
                "keyframe": k.keyframe, "frame": k.frame, "timestamp": repr(k.timestamp), "coarse": k.coarse, "fine": k.fine,
                "epipolar_accepted": k.epipolar_accepted, "plane_accepted": k.plane_accepted, "used": k.used,
                "failure": k.failure or "", "pair_height": k.pair_height, "window_height": k.window_height,
                "window_nx": n[0], "window_ny": n[1], "window_nz": n[2], "reported": e is not None,
            }
            if e is not None:
                row.update(roll_deg=np.degrees(e.xi[0]), pitch_deg=np.degrees(e.xi[1]), yaw_deg=np.degrees(e.xi[2]), height_m=e.xi[5])
            w.writerow({key: ("" if v is None else v) for key, v in row.items()})
    return p


def recovered(report: CalibrationReport) -> bool:
    """False when the run aborted or the last failure was never followed by a report."""
    if report.aborted:
        return False
    if not report.failures:
        return True
    last = report.failures[-1].keyframe
    return any(e.keyframe > last for e in report.events)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = scenario_config(args.config, args.seed)
    sc = generate(cfg)
    export_scenario(sc, args.out)
    print(f"wrote {args.out}: {len(sc.keyframes)} frames, {len(sc.wheel_samples)} wheel samples")
    return EXIT_OK


def cmd_calibrate(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    sc = import_scenario(args.scenario)
    report = run_pipeline(sc, cfg)
    write_json(report.to_dict(), args.out)
    if args.csv:
        from .plotting import render_report

        out = Path(args.csv)
        stem = Path(args.out).stem
        write_keyframe_csv(report, out / f"{stem}_keyframes.csv")
        render_report(report, sc, out, stem)
    print(f"{len(report.events)} report events, {len(report.failures)} failures -> {args.out}")
    if not recovered(report):
        print("pipeline failed without recovery: " + (report.abort_reason or "no report after the last failure"), file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def cmd_evaluate(args):
    sc = import_scenario(args.scenario)
    try:
        report = CalibrationReport.from_dict(json.loads(Path(args.report).read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise ScenarioError(f"cannot read report {args.report}: {exc}") from exc
    summary = summarize(report, sc)
    write_json(summary, args.out)
    t = summary["truth"]
    print(f"dr {t['delta_r_deg']:.4f} dp {t['delta_p_deg']:.4f} dy {t['delta_y_deg']:.4f} deg, dh {t['delta_h_cm']:.3f} cm over {t['count']} events")
    return EXIT_OK


def _replica(job):
    base, pcfg, sigma, r = job
    cfg = replace(base, seed=base.seed + r, pixel_noise_sigma=sigma)
    sc = generate(cfg)
    report = run_pipeline(sc, pcfg)
    s = summarize(report, sc)
    ef = np.array(s["transfer_error"]["per_pair"])
    row = {
        "pixel_noise_sigma": sigma, "replica": r, "seed": cfg.seed, "events": s["events"], "failures": s["failures"],
        "aborted": report.aborted,
        "final_roll_deg": np.nan, "final_pitch_deg": np.nan, "final_yaw_deg": np.nan, "final_height_cm": np.nan,
        "transfer_error_mean": float(ef.mean()) if ef.size else np.nan,
        "transfer_within_2sigma": float(np.mean(ef <= 2 * sigma)) if ef.size and sigma > 0 else np.nan,
    }
    if "final_error" in s:
        a = s["final_error"]["angles_deg"]
        row.update(final_roll_deg=abs(a[0]), final_pitch_deg=abs(a[1]), final_yaw_deg=abs(a[2]), final_height_cm=abs(s["final_error"]["height_cm"]))
    return row, report


def cmd_sweep(args):
    base = scenario_config(args.config)
    pcfg = load_config(args.config) if args.config else PipelineConfig()
    try:
        grid = [float(x) for x in args.noise_grid.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad --noise-grid {args.noise_grid!r}") from exc
    if not grid or args.replicas < 1 or any(g < 0 for g in grid):
        raise ConfigError("need a non-empty, non-negative noise grid and at least one replica")
    jobs = [(base, pcfg, s, r) for s in grid for r in range(args.replicas)]
    # each replica owns its scenario and pipeline; results keep job order
    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(_replica, jobs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r for r, _ in results]
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    summary = {}
    for s in grid:
        sel = [r for r in rows if r["pixel_noise_sigma"] == s]
        summary[repr(s)] = {
            k: float(np.nanmean([r[k] for r in sel])) if not all(np.isnan(r[k]) for r in sel) else None
            for k in ("final_roll_deg", "final_pitch_deg", "final_yaw_deg", "final_height_cm", "transfer_error_mean", "transfer_within_2sigma")
        }
        summary[repr(s)]["replicas"] = len(sel)
    write_json({"schema_version": 1, "noise_grid": grid, "replicas": args.replicas, "summary": summary}, out / "sweep.json")
    if args.reports:
        for (row, rep) in results:
            write_json(rep.to_dict(), out / f"report_s{row['pixel_noise_sigma']:g}_r{row['replica']}.json")
    for s, v in summary.items():
        print(f"sigma {s}: " + ", ".join(f"{k} {v[k]:.4g}" for k in v if isinstance(v[k], float)))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="groundcalib", description="Online camera-to-ground extrinsic calibration on synthetic drives.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a scenario file")
    s.add_argument("--config", help="scenario config (JSON or YAML)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="run the pipeline on a scenario file")
    c.add_argument("--scenario", required=True)
    c.add_argument("--config", help="pipeline config (JSON or YAML)")
    c.add_argument("--out", required=True)
    c.add_argument("--csv", help="directory for the per-keyframe CSV and PNG figures")
    c.set_defaults(func=cmd_calibrate)

    e = sub.add_parser("evaluate", help="compare a report with scenario truth")
    e.add_argument("--report", required=True)
    e.add_argument("--scenario", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="Monte-Carlo runs over a pixel-noise grid")
    w.add_argument("--config", help="file with optional 'scenario' and 'pipeline' sections")
    w.add_argument("--noise-grid", required=True, help="pixel noise values, e.g. '0,0.5,1'")
    w.add_argument("--replicas", type=int, default=5)
    w.add_argument("--workers", type=int, default=1)
    w.add_argument("--out", required=True)
    w.add_argument("--reports", action="store_true", help="also write every replica report")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ScenarioError, EmptyScene) as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
