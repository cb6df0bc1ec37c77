"""Command-line interface: simulate -> run -> eval, and the ablation report.

Exit codes: 0 success, 2 usage error, 3 missing file, 4 malformed input
file, 5 invalid configuration, 6 results/session mismatch, 1 anything
else.  Output files are written to a temp file and renamed, so a failed
command never leaves a partial file behind.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .benchmark import CANONICAL_SCENES, CANONICAL_SEEDS, AblationMatrix, canonical_sessions, run_ablation
from .errors import ConfigError, MismatchError, ScaleDBError, SequencingError, SessionFormatError, UnknownCategoryError
from .evalkit import AR_MAX_DETS, EVAL_FRAMES, coco_metrics, format_report
from .formats import (
    ground_truth,
    load_pipeline_config,
    load_spec,
    read_results,
    read_session,
    save_session,
    write_map,
    write_report,
    write_results,
)
from .pipeline import Pipeline, PipelineConfig
from .simulator import MODES, generate_session

log = logging.getLogger("viodet")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CONFIG = 5
EXIT_MISMATCH = 6


def _config(args) -> PipelineConfig:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    return cfg.with_modules(
        cfg.enable_oc and not args.no_oc,
        cfg.enable_sf and not args.no_sf,
        cfg.enable_osm and not args.no_osm,
    )


def cmd_simulate(args) -> int:
    scene = load_spec("scene", args.scene)
    traj = load_spec("trajectory", args.trajectory)
    noise = load_spec("noise", args.noise)
    intr = load_spec("intrinsics", args.intrinsics)
    if args.seed is not None:
        noise = replace(noise, rng_seed=args.seed)
    if args.frames is not None:
        traj = replace(traj, n_frames=args.frames)
    session = generate_session(scene, traj, noise, intr, mode=args.mode)
    n = save_session(args.out, session)
    print(f"wrote {n} frames to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    reader = read_session(args.session)
    pipe = Pipeline(cfg, categories=reader.categories)
    write_results(args.out_results, (pipe.process_frame(f) for f in reader), cfg, reader.name)
    if args.out_map:
        write_map(args.out_map, pipe.snapshot(), reader.name)
    print(f"{cfg.label}: wrote results to {args.out_results} ({len(pipe.map)} superpoints)")
    return EXIT_OK


def cmd_eval(args) -> int:
    header, results = read_results(args.results)
    gts = ground_truth(read_session(args.session))
    report = coco_metrics(results, gts, args.max_dets, args.frame)
    rows = {header.get("row", "results"): report}
    print(format_report(rows), end="")
    if args.out:
        write_report(args.out, rows, [Path(args.session).name])
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_pipeline_config(args.config) if args.config else PipelineConfig()
    matrix = AblationMatrix.default(base)
    sessions = [list(read_session(path)) for path in args.session]
    rows = run_ablation(sessions, matrix, ar_max_dets=args.max_dets, frame=args.frame)
    print(format_report(rows), end="")
    if args.out_report:
        write_report(args.out_report, rows, [Path(p).name for p in args.session])
    if args.figures:
        from .plotting import ablation_bars

        fig_dir = Path(args.figures)
        if not fig_dir.is_dir():
            raise FileNotFoundError(f"figure directory {str(fig_dir)!r} does not exist")
        path = ablation_bars(rows, fig_dir / "ablation.png")
        print(f"wrote {path}")
    return EXIT_OK


def cmd_canonical(args) -> int:
    out = Path(args.out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {str(out)!r} does not exist")
    for session in canonical_sessions(args.frames):
        path = out / f"{session.name}.jsonl"
        save_session(path, session)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_plot_map(args) -> int:
    from .formats import read_map
    from .plotting import map_topdown
    from .categories import COCO_CATEGORIES

    header, records = read_map(args.map)
    map_topdown(records, COCO_CATEGORIES, args.out, title=f"{header.get('session', '')}: {len(records)} superpoints")
    print(f"wrote {args.out}")
    return EXIT_OK


def _module_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON (defaults: all modules on)")
    p.add_argument("--no-oc", action="store_true", help="disable orientation correction")
    p.add_argument("--no-sf", action="store_true", help="disable the scale filter")
    p.add_argument("--no-osm", action="store_true", help="disable the semantic map")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--frame",
        choices=EVAL_FRAMES,
        default="native",
        help="score detections in the frame the detector ran in (native) or in the original frame",
    )
    p.add_argument("--max-dets", type=int, default=AR_MAX_DETS, help="detections per frame for AR (default 10)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viodet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("simulate", help="generate a synthetic session log")
    p.add_argument("--scene", required=True, help="scene JSON or preset name")
    p.add_argument("--trajectory", required=True, help="trajectory JSON or preset name")
    p.add_argument("--noise", default="default", help="detector noise JSON or preset name (default: default)")
    p.add_argument("--intrinsics", default="default", help="camera intrinsics JSON or preset name")
    p.add_argument("--seed", type=int, help="overrides the noise model's rng_seed")
    p.add_argument("--frames", type=int, help="overrides the trajectory's n_frames")
    p.add_argument("--mode", choices=MODES, default="both", help="which detector passes to record (default both)")
    p.add_argument("--out", required=True, help="output session log (.jsonl)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the pipeline over a session log")
    p.add_argument("--session", required=True, help="session log")
    _module_flags(p)
    p.add_argument("--out-results", required=True, help="output results (.jsonl)")
    p.add_argument("--out-map", help="output map dump (.jsonl)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="COCO metrics of a results file against its session's ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--session", required=True)
    _eval_flags(p)
    p.add_argument("--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the five ablation rows and print AP/AR tables")
    p.add_argument("--session", required=True, action="append", help="session log (repeat to pool sessions)")
    p.add_argument("--config", help="base pipeline config JSON; module switches are set per row")
    _eval_flags(p)
    p.add_argument("--out-report", help="also write the report as JSON")
    p.add_argument("--figures", metavar="DIR", help="render report figures into DIR")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser(
        "canonical",
        help=f"write the canonical benchmark sessions ({', '.join(CANONICAL_SCENES)}; seeds {CANONICAL_SEEDS})",
    )
    p.add_argument("--out-dir", required=True)
    p.add_argument("--frames", type=int, help="frames per session (default: preset length)")
    p.set_defaults(func=cmd_canonical)

    p = sub.add_parser("plot-map", help="render a map dump as a top-down figure")
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True, help="output image (.png)")
    p.set_defaults(func=cmd_plot_map)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SessionFormatError, SequencingError) as exc:
        print(f"error: malformed input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, ScaleDBError, UnknownCategoryError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MismatchError as exc:
        print(f"error: results do not match the session: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except Exception as exc:  # last resort; keep the message, drop the traceback
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
