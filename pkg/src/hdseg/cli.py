"""Command-line entry point: ``hdseg generate | eval | synth``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .evaluate import XodrParseError, compare_files
from .geo import ProjectionDomainError
from .ingest import ConfigError, ParseError, ValidationError, load_config, load_recording
from .osm import GraphConsistencyError, OSMParseError, parse_extract
from .pipeline import RunResult, run_pipeline, write_outputs
from .synth import SpecError, corner_case_suite, generate_scene, load_spec

log = logging.getLogger("hdseg")

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2


def summary(result: RunResult, paths: dict, wall: float) -> str:
    """Human-readable digest of a run."""
    counts = {s: sum(r.status == s for r in result.segments) for s in ("ok", "flagged", "failed")}
    lines = [
        f"segments: {len(result.segments)} "
        f"(ok {counts['ok']}, flagged {counts['flagged']}, failed {counts['failed']})",
        f"success rate: {result.success_rate:.3f} of "
        f"{sum(r.edge_length for r in result.segments):.1f} m",
        f"unmatched frames: {result.unmatched_frames}",
    ]
    for r in result.segments:
        if r.status != "ok":
            lines.append(f"  {r.status:8s} {r.key}: {r.reason}")
    stages = ", ".join(f"{k} {v:.2f}s" for k, v in result.timings.items())
    lines.append(f"timings: {stages}, total {wall:.2f}s")
    for name, p in sorted(paths.items()):
        lines.append(f"{name}: {p}")
    return "\n".join(lines)


def cmd_generate(args) -> int:
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config, **overrides)
        frames, dropped = load_recording(args.frames, args.poses)
        graph = parse_extract(args.osm, country_default=args.country, strict=args.strict_osm)
    except (ConfigError, ParseError, ValidationError, OSMParseError, GraphConsistencyError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    if dropped:
        log.warning("%d sweep(s) had no pose", dropped)
    out = Path(args.out)
    debug = out / "debug" if args.debug_dumps else None
    try:
        result = run_pipeline(frames, graph, cfg, args.regulations, name=args.name,
                              debug_dir=debug)
    except ProjectionDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    paths = write_outputs(result, out)
    text = summary(result, {k: str(v) for k, v in paths.items()}, time.perf_counter() - t0)
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    if result.exit_code == EXIT_FATAL:
        print("error: no segment produced a reference line", file=sys.stderr)
    return result.exit_code


def cmd_eval(args) -> int:
    try:
        stats = compare_files(args.generated, args.reference, args.spacing, args.align)
    except (XodrParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    print(stats.table())
    return EXIT_OK


def _synth_one(spec, out_dir) -> str:
    g = generate_scene(spec, out_dir)
    return f"{spec.name}: {len(g.frames)} frames, {spec.length:.0f} m"


def cmd_synth(args) -> int:
    try:
        if args.suite:
            specs = corner_case_suite(args.length, args.seed or 0)
        elif args.spec:
            loaded = load_spec(args.spec)
            specs = loaded if isinstance(loaded, list) else [loaded]
        else:
            print("error: give a spec file or --suite", file=sys.stderr)
            return EXIT_FATAL
        out = Path(args.out)
        for spec in specs:
            if args.seed is not None and not args.suite:
                spec.seed = args.seed
            spec.validate()
        dirs = [out / spec.name if len(specs) > 1 else out for spec in specs]
        workers = min(args.workers or os.cpu_count() or 1, len(specs))
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                lines = list(ex.map(_synth_one, specs, dirs))
        else:
            lines = [_synth_one(spec, d) for spec, d in zip(specs, dirs)]
        print("\n".join(lines))
    except (SpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hdseg", description="Lane-level road maps from LiDAR drives.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the pipeline on a recording")
    g.add_argument("--frames", required=True, help="point table (CSV)")
    g.add_argument("--poses", required=True, help="pose table (CSV)")
    g.add_argument("--osm", required=True, help="OSM XML extract")
    g.add_argument("--config", help="INI file with a [pipeline] section")
    g.add_argument("--regulations", help="regulation profiles INI (default: bundled)")
    g.add_argument("--workers", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", default="out")
    g.add_argument("--country", default="DE", help="country when the extract has none")
    g.add_argument("--name", default="hdseg")
    g.add_argument("--strict-osm", action="store_true",
                   help="reject ways without a lanes tag instead of defaulting")
    g.add_argument("--debug-dumps", action="store_true",
                   help="write per-segment clouds and chains under OUT/debug")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="compare two OpenDRIVE files")
    e.add_argument("generated")
    e.add_argument("reference")
    e.add_argument("--spacing", type=float, default=1.0)
    e.add_argument("--align", action="store_true", help="rigidly align before measuring")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("spec", nargs="?", help="scene spec JSON (object or list)")
    s.add_argument("--suite", action="store_true", help="emit the corner-case suite")
    s.add_argument("--length", type=float, default=300.0, help="suite scene length")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int, help="scenes generated in parallel (default: cores)")
    s.add_argument("--out", default="scenes")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
