"""Command-line front end: simulate, fit, detect, calibrate, evaluate, plot.

Exit codes: 0 success, 1 computation error, 2 usage or I/O error. All
randomness flows through --seed; repeated runs over identical inputs produce
identical output bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from datetime import timedelta
from pathlib import Path

import numpy as np

from . import baselines, detector, evaluation, ingest, levelset, simgen, svg
from .kde import evaluate_grid, fit as kde_fit, select_bandwidth

EXIT_OK = 0
EXIT_COMPUTE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # computation failures from the library
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowsentry", description=__doc__)
    sub = parser.add_subparsers(required=True, metavar="command")

    p = sub.add_parser("simulate", help="generate a labelled synthetic link")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weeks", type=int, default=6)
    p.add_argument("--incidents", type=int, default=10)
    p.add_argument("--bimodal", action="store_true", help="enable the periodic bottleneck regime")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="learn the typical region from a training series")
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bandwidth-method", choices=["normal_reference", "plug_in"], default="normal_reference")
    p.add_argument("--link", default=None, help="link id when the series holds several")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect", help="stream a series against a fitted region")
    p.add_argument("--series", required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["duration", "severity"], default="severity")
    p.add_argument("--threshold", type=float, default=None, help="severity score or duration minutes")
    p.add_argument("--percentile", type=float, default=None, help="duration percentile of this stream's excursions")
    p.add_argument("--link", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", help="pick detector parameters minimising PI on labelled data")
    p.add_argument("--series", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--detector", choices=["dftb", "snd", "mcmaster"], required=True)
    p.add_argument("--region", default=None, help="region JSON (dftb only)")
    p.add_argument("--out", required=True)
    p.add_argument("--tz-offset", type=int, default=0, help="minutes added to UTC for weekly binning")
    p.add_argument("--link", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="score detectors or reproduce the embedded benchmark")
    p.add_argument("--fixture", choices=["table1"], default=None)
    p.add_argument("--series", default=None)
    p.add_argument("--events", default=None)
    p.add_argument("--flags", default=None, help="flags CSV from detect")
    p.add_argument("--flags-b", default=None, help="second detector's flags for paired tests")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="emit SVG plots for a fitted region and stream")
    p.add_argument("--series", required=True)
    p.add_argument("--region", required=True)
    p.add_argument("--flags", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--link", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def grid_resolution() -> tuple[int, int]:
    """Default 512x512; the FLOWSENTRY_GRID env var overrides ("256" or "256x384")."""
    raw = os.environ.get("FLOWSENTRY_GRID", "").strip()
    if not raw:
        return (512, 512)
    try:
        if "x" in raw:
            a, b = raw.lower().split("x")
            return (int(a), int(b))
        n = int(raw)
        return (n, n)
    except ValueError:
        raise UsageError(f"bad FLOWSENTRY_GRID value {raw!r}") from None


def _load_series(path: str, link: str | None) -> list[ingest.TrafficSample]:
    samples = ingest.parse_series(_require_file(path))
    grouped = ingest.by_link(samples)
    if not grouped:
        raise UsageError(f"no samples in {path}")
    if link is not None:
        if link not in grouped:
            raise UsageError(f"link {link!r} not present in {path}")
        return grouped[link]
    if len(grouped) > 1:
        raise UsageError(f"{path} holds links {sorted(grouped)}; pick one with --link")
    return next(iter(grouped.values()))


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    bottleneck = simgen.BottleneckSpec() if args.bimodal else None
    plan = simgen.plan_incidents(args.incidents, args.weeks, args.seed, avoid=bottleneck)
    config = simgen.ScenarioConfig(seed=args.seed, weeks=args.weeks, incidents=plan, bottleneck=bottleneck)
    samples, labels = simgen.generate(config)
    ingest.write_series(samples, out / "series.csv")
    ingest.write_events(labels, out / "events.csv")
    print(f"wrote {len(samples)} samples and {len(labels)} labels to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if not 0.0 < args.alpha < 1.0:
        raise UsageError(f"alpha {args.alpha} outside (0, 1)")
    samples = _load_series(args.series, args.link)
    out = _out_dir(args.out)
    pts = np.array([(s.density, s.flow) for s in samples if s.has_density])
    config = levelset.RegionConfig(alpha=args.alpha)
    bandwidth = select_bandwidth(pts, args.bandwidth_method)
    model = kde_fit(pts, bandwidth, min_samples=50)
    grid = evaluate_grid(model, resolution=grid_resolution())
    region = levelset.fit_typical_region(pts, config, model=model, grid=grid)
    region = detector.calibrate_normalizer(region, pts)
    (out / "region.json").write_text(region.to_json(), encoding="utf-8")
    in_fraction = levelset.contains_many(region, pts).mean()
    print(f"samples: {len(pts)}")
    print(f"z_star: {region.z_star:.6e}")
    print(f"components: {len(region.polygons)}")
    print(f"in_region_fraction: {in_fraction:.4f}")
    print(f"region: {out / 'region.json'}")
    return EXIT_OK


def _detector_config(args, samples, region) -> detector.DetectorConfig:
    if args.mode == "severity":
        if args.threshold is None:
            raise UsageError("severity mode needs --threshold")
        return detector.DetectorConfig("severity_threshold", severity_threshold=args.threshold)
    if args.threshold is not None:
        return detector.DetectorConfig("duration_threshold", duration_threshold_min=args.threshold)
    if args.percentile is None:
        raise UsageError("duration mode needs --threshold or --percentile")
    probe = detector.DetectorConfig("duration_threshold", duration_threshold_min=float("inf"))
    excursions, _ = detector.track(samples, region, probe)
    minutes = detector.duration_threshold_from_percentile([e.duration_min for e in excursions], args.percentile)
    print(f"duration threshold from percentile {args.percentile}: {minutes} min")
    return detector.DetectorConfig("duration_threshold", duration_threshold_min=minutes)


def cmd_detect(args) -> int:
    samples = _load_series(args.series, args.link)
    region = levelset.TypicalRegion.from_json(_require_file(args.region).read_text(encoding="utf-8"))
    out = _out_dir(args.out)
    config = _detector_config(args, samples, region)
    excursions, flags = detector.track(samples, region, config)
    detector.write_excursions_csv(excursions, flags, out / "excursions.csv")
    detector.write_flags_csv(flags, out / "flags.csv")
    print(f"excursions: {len(excursions)}")
    print(f"flags: {len(flags)}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    samples = _load_series(args.series, args.link)
    labels = ingest.nonrecurrent_filter(ingest.parse_events(_require_file(args.events)))
    labels = [lab for lab in labels if lab.link_id == samples[0].link_id]
    out = _out_dir(args.out)
    if args.detector == "dftb":
        if args.region is None:
            raise UsageError("dftb calibration needs --region")
        region = levelset.TypicalRegion.from_json(_require_file(args.region).read_text(encoding="utf-8"))
        result = evaluation.calibrate_dftb(samples, region, labels)
        payload = {"detector": "dftb", "severity_threshold": result.parameter}
    elif args.detector == "snd":
        profile = baselines.snd_fit(samples, tz_offset_min=args.tz_offset)
        result = evaluation.calibrate_snd(samples, profile, labels)
        payload = {"detector": "snd", "c": result.parameter}
        (out / "snd_profile.json").write_text(profile.to_json(), encoding="utf-8")
    else:
        result = evaluation.calibrate_mcmaster(samples, labels)
        payload = {"detector": "mcmaster", "params": asdict(result.parameter)}
    payload["training_score"] = {
        "dr": result.score.dr,
        "far": result.score.far,
        "mttd": result.score.mttd,
        "pi": result.score.pi,
    }
    (out / "calibration.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = _out_dir(args.out)
    if args.fixture == "table1":
        return _evaluate_fixture(out)
    if not (args.series and args.events and args.flags):
        raise UsageError("evaluate needs --fixture table1 or --series/--events/--flags")
    samples = ingest.parse_series(_require_file(args.series))
    labels = ingest.nonrecurrent_filter(ingest.parse_events(_require_file(args.events)))
    if not labels:
        raise evaluation.UndefinedMetricError("no non-recurrent labels; detection rate undefined")
    flag_sets = {"a": detector.read_flags_csv(_require_file(args.flags))}
    if args.flags_b:
        flag_sets["b"] = detector.read_flags_csv(_require_file(args.flags_b))
    grouped = ingest.by_link(samples)
    scores: dict[str, dict[str, evaluation.DetectorScore]] = {}
    for name, rows in flag_sets.items():
        per_link = {}
        for link_id, link_samples in grouped.items():
            link_labels = [lab for lab in labels if lab.link_id == link_id]
            if not link_labels:
                continue
            intervals = [(r.start, r.end) for r in rows if r.link_id == link_id and r.flagged]
            n_applications = sum(1 for s in link_samples if s.has_density)
            per_link[link_id] = evaluation.score_detector(intervals, link_labels, n_applications)
        scores[name] = per_link
    payload: dict = {"links": {}}
    for name, per_link in scores.items():
        for link_id, s in per_link.items():
            payload["links"].setdefault(link_id, {})[name] = {
                "dr": s.dr,
                "far": s.far,
                "mttd": s.mttd,
                "pi": s.pi,
            }
    if "b" in scores:
        common = sorted(set(scores["a"]) & set(scores["b"]))
        payload["tests"] = {}
        for metric in ("dr", "far", "mttd"):
            pairs = []
            for link_id in common:
                va = getattr(scores["a"][link_id], metric)
                vb = getattr(scores["b"][link_id], metric)
                if va is not None and vb is not None:
                    pairs.append((va, vb))
            payload["tests"][metric] = _paired_tests_payload(pairs)
    (out / "evaluation.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def _paired_tests_payload(pairs) -> dict:
    result: dict = {"n_pairs": len(pairs)}
    for name, test in (
        ("wilcoxon_signed_rank", evaluation.wilcoxon_signed_rank),
        ("sign", evaluation.sign_test),
        ("paired_t", evaluation.paired_t_test),
    ):
        try:
            r = test(pairs)
            result[name] = {
                "statistic": r.statistic,
                "p_value": r.p_value,
                "n_effective": r.n_effective,
                "method": r.method,
            }
        except (evaluation.InsufficientPairsError, evaluation.DegenerateTestError) as exc:
            result[name] = {"skipped": str(exc)}
    return result


def _evaluate_fixture(out: Path) -> int:
    rows = evaluation.load_table1()
    evaluation.write_report_csv(rows, out / "report.csv")
    report = evaluation.fixture_report(rows)
    payload = {
        "aggregates": {m: asdict(a) for m, a in report["aggregates"].items()},
        "differences": report["differences"],
        "tests": {
            metric: {
                name: {
                    "statistic": r.statistic,
                    "p_value": r.p_value,
                    "n_effective": r.n_effective,
                    "method": r.method,
                }
                for name, r in tests.items()
            }
            for metric, tests in report["tests"].items()
        },
    }
    (out / "tests.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    for metric in ("dr", "far", "mttd"):
        tests = payload["tests"][metric]
        print(
            f"{metric}: mean diff {payload['differences'][metric]['mean']:+.3f}, "
            f"median diff {payload['differences'][metric]['median']:+.3f}, "
            f"wilcoxon p {tests['wilcoxon_signed_rank']['p_value']:.4f}, "
            f"sign p {tests['sign']['p_value']:.4f}"
        )
    print(f"report: {out / 'report.csv'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    samples = _load_series(args.series, args.link)
    region = levelset.TypicalRegion.from_json(_require_file(args.region).read_text(encoding="utf-8"))
    flags = detector.read_flags_csv(_require_file(args.flags)) if args.flags else []
    out = _out_dir(args.out)

    usable = [s for s in samples if s.has_density]
    points = np.array([(s.density, s.flow) for s in usable])
    boundary = np.vstack(region.polygons)
    frame = svg.Frame(
        min(points[:, 0].min(), boundary[:, 0].min()),
        max(points[:, 0].max(), boundary[:, 0].max()),
        min(points[:, 1].min(), boundary[:, 1].min()),
        max(points[:, 1].max(), boundary[:, 1].max()),
    )
    stride = max(1, len(points) // 15000)
    body = svg.axes(frame, "density (veh/km)", "flow (veh/h)")
    body += svg.scatter(frame, points[::stride, 0], points[::stride, 1])
    body += [svg.closed_path(frame, poly) for poly in region.polygons]
    (out / "scatter.svg").write_text(svg.document(body, "density-flow with typical region"), encoding="utf-8")

    with_tt = [s for s in samples if s.travel_time is not None]
    flagged_minutes = set()
    for row in flags:
        if not row.flagged:
            continue
        t = row.start
        while t <= row.end:
            flagged_minutes.add(t)
            t += timedelta(minutes=1)
    t0 = samples[0].timestamp
    xs = [(s.timestamp - t0).total_seconds() / 3600.0 for s in with_tt]
    ys = [s.travel_time for s in with_tt]
    frame_tt = svg.Frame(min(xs, default=0.0), max(xs, default=1.0), min(ys, default=0.0), max(ys, default=1.0))
    body = svg.axes(frame_tt, "hours since start", "travel time (s)")
    body.append(svg.polyline(frame_tt, xs, ys))
    marks = [(x, y) for x, y, s in zip(xs, ys, with_tt) if s.timestamp in flagged_minutes]
    body += svg.scatter(
        frame_tt, [m[0] for m in marks], [m[1] for m in marks], fill="crimson", radius=2.5, css="flag"
    )
    (out / "travel_time.svg").write_text(svg.document(body, "travel time with flags"), encoding="utf-8")

    durations = [row.duration_min for row in flags] if flags else []
    if durations:
        hi = max(durations) + 1
        counts, edges = np.histogram(durations, bins=min(20, max(3, hi)), range=(0, hi))
    else:
        counts, edges = np.histogram([], bins=3, range=(0, 3))
    frame_h = svg.Frame(float(edges[0]), float(edges[-1]), 0.0, float(max(counts.max(), 1)))
    body = svg.axes(frame_h, "duration (min)", "count")
    body += svg.bars(frame_h, edges, counts)
    (out / "durations.svg").write_text(svg.document(body, "excursion durations"), encoding="utf-8")
    print(f"plots: {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
