"""Command line interface: synth, solve, baseline, eval, export.

Exit codes: 0 success (for solve/baseline: at least one object produced),
1 a non-empty scene produced no successful object, 2 input or usage error.
All commands are deterministic given identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .association import integrate_scene
from .baseline import VARIANTS, baseline_alignments, load_class_stats
from .benchmark import write_spec_files
from .config import RunConfig, load_run_config
from .datamodel import (
    export_scene_mesh,
    load_alignments,
    load_ground_truth,
    load_scene,
    save_alignments,
    save_ground_truth,
    save_scene,
    write_jsonl,
    _load_records,
    model_from_record,
)
from .errors import MvcadError
from .evaluation import (
    box_iou_prf,
    format_report,
    match_and_score,
    report_to_record,
    sweep_curves,
)
from .incremental import IncrementalSession
from .solver import report_to_record as solve_report_to_record
from .synth import generate, load_synth_spec

logger = logging.getLogger("mvcad")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2


def _write_reports(reports, path: Path) -> None:
    records = []
    for oid in sorted(reports):
        rec = {"object_id": oid}
        rec.update(solve_report_to_record(reports[oid]))
        records.append(rec)
    write_jsonl(path, "reports", records)


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    scene, ground_truth = generate(spec)
    save_scene(scene, args.out, ground_truth)
    logger.info("wrote scene with %d frames / %d observations / %d objects to %s",
                len(scene.frames), len(scene.observations), len(ground_truth),
                args.out)
    return EXIT_OK


def _solve_batch(scene, config: RunConfig, out: Path, jobs: int) -> int:
    alignments, reports = integrate_scene(
        scene, config.weights, config.solver, config.cluster, config.tracker,
        jobs=jobs)
    save_alignments(alignments, out / "alignments.jsonl")
    _write_reports(reports, out / "reports.jsonl")
    if scene.observations and not alignments:
        return EXIT_PARTIAL
    return EXIT_OK


def _solve_online(scene, config: RunConfig, out: Path, chunk: int) -> int:
    session = IncrementalSession(scene.cad_db, config.weights, config.solver,
                                 config.cluster, config.tracker,
                                 config.update_iterations)
    frames = sorted(scene.frames, key=lambda f: f.frame_index)
    obs_by_frame: dict[int, list] = {}
    for o in scene.observations:
        obs_by_frame.setdefault(o.frame_index, []).append(o)
    alignments = []
    for ci in range(0, len(frames), chunk):
        chunk_frames = frames[ci:ci + chunk]
        chunk_obs = [o for f in chunk_frames for o in obs_by_frame.get(f.frame_index, [])]
        alignments = session.update(chunk_frames, chunk_obs)
        save_alignments(alignments,
                        out / f"alignments_chunk_{ci // chunk:04d}.jsonl")
    save_alignments(alignments, out / "alignments.jsonl")
    _write_reports(session.reports, out / "reports.jsonl")
    if scene.observations and not alignments:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_solve(args) -> int:
    config = load_run_config(args.config)
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs if args.jobs is not None else config.jobs
    if jobs is None:
        jobs = os.cpu_count() or 1
    chunk = args.online_chunk if args.online_chunk is not None else config.online_chunk
    if chunk is not None:
        return _solve_online(scene, config, out, chunk)
    return _solve_batch(scene, config, out, jobs)


def cmd_baseline(args) -> int:
    config = load_run_config(args.config)
    scene = load_scene(args.scene)
    stats = None
    if args.variant == "class_avg":
        if args.class_stats is None:
            print("baseline: --class-stats is required for the class_avg variant",
                  file=sys.stderr)
            return EXIT_USAGE
        stats = load_class_stats(args.class_stats)
    alignments = baseline_alignments(scene, args.variant, stats, config.cluster)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_alignments(alignments, out / "alignments.jsonl")
    if scene.observations and not alignments:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    alignments = load_alignments(args.alignments)
    ground_truth = load_ground_truth(args.ground_truth)
    report = match_and_score(alignments, ground_truth, config.thresholds,
                             config.symmetry_by_class)
    curves = sweep_curves(alignments, ground_truth, config.sweep_grids,
                          config.thresholds, config.symmetry_by_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report_to_record(report, curves), indent=2) + "\n",
        encoding="utf-8")
    (out / "report.txt").write_text(format_report(report) + "\n", encoding="utf-8")
    with (out / "sweep_curves.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["transformation", "threshold", "class_avg", "global_avg"])
        for kind in sorted(curves):
            for row in curves[kind]:
                writer.writerow([kind, row["threshold"], row["class_avg"],
                                 row["global_avg"]])
    print(format_report(report))
    return EXIT_OK


def cmd_export(args) -> int:
    alignments = load_alignments(args.alignments)
    models = _load_records(Path(args.models), "models", model_from_record)
    export_scene_mesh(alignments, models, args.out)
    return EXIT_OK


def cmd_write_benchmarks(args) -> int:
    paths = write_spec_files(args.out)
    logger.info("wrote %d benchmark specs to %s", len(paths), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvcad",
        description="Multi-view integration of per-frame detections into "
                    "9-DoF CAD alignments")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("spec", help="SynthSpec JSON file")
    p.add_argument("out", help="output scene directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("solve", help="run multi-view integration on a scene")
    p.add_argument("scene", help="scene directory")
    p.add_argument("out", help="output directory")
    p.add_argument("--config", default=None, help="RunConfig JSON file")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel object solves (default: available cores)")
    p.add_argument("--online-chunk", type=int, default=None,
                   help="process frames in chunks of N, snapshot per chunk")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("baseline", help="single-frame baseline alignments")
    p.add_argument("scene", help="scene directory")
    p.add_argument("out", help="output directory")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--class-stats", default=None,
                   help="per-class scale/depth JSON (class_avg variant)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score alignments against ground truth")
    p.add_argument("alignments", help="alignments.jsonl")
    p.add_argument("ground_truth", help="ground_truth.jsonl or scene directory")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export posed models as an OBJ point set")
    p.add_argument("alignments", help="alignments.jsonl")
    p.add_argument("models", help="models.jsonl")
    p.add_argument("out", help="output .obj path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("write-benchmarks",
                       help="write the 10 standard benchmark spec files")
    p.add_argument("out", help="output directory")
    p.set_defaults(func=cmd_write_benchmarks)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MvcadError, OSError) as exc:
        print(f"mvcad {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
