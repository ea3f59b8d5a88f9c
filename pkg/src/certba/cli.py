"""Command line entry point: ``certba solve | synth | eval``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .manifold import FactorPoint
from .metrics import compute_metrics, rotation_angle
from .pipeline import PipelineConfig, run_pipeline, two_frame_registration
from .recovery import Solution
from .staircase import StaircaseOptions, TrustRegionOptions
from .viewgraph import (
    GroundTruth,
    lift_with_ground_truth,
    read_bal,
    read_graph_json,
    read_ground_truth_json,
    synth_scene,
    write_graph_json,
    write_ground_truth_json,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_UNCERTIFIED = 0, 1, 2


def export_ply(solution, path):
    """ASCII PLY with the landmarks (white) followed by the camera centers (red)."""
    pts = np.asarray(solution.points, dtype=float).reshape(-1, 3)
    cams = np.asarray(solution.translations, dtype=float).reshape(-1, 3)
    n = len(pts) + len(cams)
    lines = [
        "ply",
        "format ascii 1.0",
        "comment landmarks first, then camera centers",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p in pts:
        lines.append("%.9g %.9g %.9g 255 255 255" % tuple(p))
    for c in cams:
        lines.append("%.9g %.9g %.9g 255 0 0" % tuple(c))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply_vertices(path):
    """Vertex table of an ASCII PLY written by :func:`export_ply` (x, y, z, r, g, b)."""
    with open(path) as fh:
        header = []
        for line in fh:
            header.append(line.strip())
            if line.strip() == "end_header":
                break
        count = next(int(h.split()[2]) for h in header if h.startswith("element vertex"))
        rows = [fh.readline().split() for _ in range(count)]
    return np.array(rows, dtype=float)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _clean(value):
    """Replace non-finite floats with None so the report stays valid JSON."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (float, np.floating)) and not math.isfinite(value):
        return None
    return value


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_clean(json.loads(json.dumps(obj, default=_json_default))), fh, indent=2)


def _reflected_start(num_frames):
    """Identity start with one block reflected; rank 3 cannot leave that component."""
    pt = FactorPoint.identity(num_frames)
    R = pt.stiefel.copy()
    if num_frames > 1:
        R[1] = np.diag([1.0, 1.0, -1.0])
    return FactorPoint(R, pt.scales)


def _config_from_args(args, num_frames):
    tr = TrustRegionOptions(gradient_tolerance=args.grad_tol)
    solver = StaircaseOptions(trust_region=tr, max_rank=args.max_rank)
    init = args.init
    if init == "reflected":
        init = _reflected_start(num_frames)
    return PipelineConfig(
        enable_filter=args.filter,
        filter_multiplier=args.filter_multiplier,
        enable_xm2=args.xm2,
        xm2_drop_fraction=args.xm2_fraction,
        lambda_reg=args.lambda_reg,
        solver=solver,
        seed=args.seed,
        init=init,
        polish=not args.no_polish,
    )


def _load_problem(args):
    """Returns ``(graph, gt or None, extra report fields)``."""
    path = args.input
    if not os.path.exists(path):
        raise FileNotFoundError(f"input not found: {path}")
    extra = {}
    gt = None
    if path.lower().endswith(".json"):
        graph = read_graph_json(path)
    else:
        graph2d, gt = read_bal(path, pixel_coordinates=args.bal_pixels)
        if not args.depth_from_gt:
            raise ValueError("BAL input carries no depth: pass --depth-from-gt")
        graph, gt, dropped = lift_with_ground_truth(graph2d, gt)
        extra["dropped_behind_camera"] = dropped
    if args.gt:
        gt = read_ground_truth_json(args.gt)
    return graph, gt, extra


def cmd_solve(args):
    t_start = time.perf_counter()
    graph, gt, extra = _load_problem(args)
    t_parse = time.perf_counter() - t_start
    config = _config_from_args(args, graph.num_frames)
    os.makedirs(args.output, exist_ok=True)

    trace_fh = open(args.trace, "w") if args.trace else None
    trace = None
    if trace_fh is not None:

        def trace(record):
            trace_fh.write(json.dumps(_clean(record), default=_json_default) + "\n")

    try:
        sol, used_graph = run_pipeline(graph, config, trace=trace)
    finally:
        if trace_fh is not None:
            trace_fh.close()

    cert = sol.certificate
    certified = sol.certified
    timings = dict(sol.info["timings"])
    first = sol.info.get("first_solution")
    if first is not None:
        for key, value in first.info["timings"].items():
            timings[key] += value
    timings["parse"] = t_parse

    report = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "input": os.path.abspath(args.input),
        "config": {**config.to_dict(), "init": args.init, "bal_pixels": args.bal_pixels, "depth_from_gt": args.depth_from_gt},
        "uncertified": not certified,
        "solution": {
            "num_frames": sol.num_frames,
            "num_landmarks": sol.num_landmarks,
            "num_edges": used_graph.num_edges,
            "objective": sol.objective,
            "flip_count": sol.flip_count,
            "rank_trajectory": sol.info["rank_trajectory"],
            "iterations": sol.info["iterations"],
            "converged": sol.info["converged"],
            "scales": sol.scales,
        },
        "certificate": cert.summary(include_y=args.verbose_certificate),
        **extra,
    }
    if first is not None:
        report["first_certificate"] = first.certificate.summary(include_y=args.verbose_certificate)
        report["xm2_dropped_edges"] = sol.info["dropped_edges"]
    if "filter" in sol.info:
        report["filter"] = sol.info["filter"]
    if graph.num_frames == 2:
        s, R, t = two_frame_registration(used_graph)
        ang = float(np.degrees(rotation_angle(R.T @ sol.rotations[1])))
        report["two_frame_check"] = {
            "closed_form": {"scale": s, "rotation": R, "translation": t},
            "rotation_error_deg": ang,
            "scale_relative_error": abs(sol.scales[1] - s) / s,
        }

    t_out = time.perf_counter()
    export_ply(sol, os.path.join(args.output, "solution.ply"))
    _write_json(sol.to_dict(), os.path.join(args.output, "solution.json"))
    if gt is not None:
        if gt.num_frames != sol.num_frames:
            raise ValueError("frame count mismatch between solution and ground truth")
        if sol.num_frames >= 3:
            m = compute_metrics(sol, gt)
            report["metrics"] = m.to_dict(sol, timings["solve"])
    timings["write"] = time.perf_counter() - t_out
    timings["total"] = time.perf_counter() - t_start
    report["timings"] = timings
    _write_json(report, os.path.join(args.output, "report.json"))

    status = "certified" if certified else "UNCERTIFIED"
    print(
        f"{status}: N={sol.num_frames} M={sol.num_landmarks} objective={sol.objective:.6g} "
        f"eta={cert.eta:.3g} min_eig={cert.min_eigenvalue:.3g} ranks={sol.info['rank_trajectory']} "
        f"({timings['total']:.2f}s)"
    )
    return EXIT_OK if certified else EXIT_UNCERTIFIED


def cmd_synth(args):
    graph, gt = synth_scene(
        args.frames,
        args.landmarks,
        visibility_prob=args.visibility,
        noise_eps=args.eps,
        seed=args.seed,
    )
    os.makedirs(args.output, exist_ok=True)
    write_graph_json(graph, os.path.join(args.output, "scene.json"))
    write_ground_truth_json(gt, os.path.join(args.output, "gt.json"))
    print(f"wrote {graph.num_frames} frames, {graph.num_landmarks} landmarks, {graph.num_edges} edges to {args.output}")
    return EXIT_OK


def _load_solution(path):
    with open(path) as fh:
        return Solution.from_dict(json.load(fh))


def cmd_eval(args):
    sol = _load_solution(args.solution)
    with open(args.gt) as fh:
        data = json.load(fh)
    gt = GroundTruth.anchored(data["rotations"], data["translations"], data["scales"], data["points"])
    if gt.num_frames != sol.num_frames:
        raise ValueError(f"frame count mismatch: solution has {sol.num_frames}, ground truth {gt.num_frames}")
    metrics = compute_metrics(sol, gt).to_dict(sol)
    if args.output:
        _write_json(metrics, args.output)
    print(json.dumps(_clean(metrics), default=_json_default))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="certba", description="Certifiable scaled bundle adjustment")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve a view graph and write solution, PLY and report")
    p.add_argument("--input", required=True, help="view graph JSON or BAL text file")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--gt", help="ground truth JSON for metrics")
    p.add_argument("--depth-from-gt", action="store_true", help="lift BAL keypoints with ground-truth depth")
    p.add_argument("--bal-pixels", action="store_true", help="BAL keypoints are raw pixels (divide by focal, -z camera)")
    p.add_argument("--filter", action="store_true", help="enable the two-view outlier filter")
    p.add_argument("--filter-multiplier", type=float, default=3.0)
    p.add_argument("--xm2", action="store_true", help="drop the highest-residual edges and solve again")
    p.add_argument("--xm2-fraction", type=float, default=0.10)
    p.add_argument("--lambda", dest="lambda_reg", type=float, default=0.0, help="scale regularization weight")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=["identity", "random", "reflected"], default="identity")
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--no-polish", action="store_true", help="skip the rank-3 descent after rounding a rank>3 optimum")
    p.add_argument("--grad-tol", type=float, default=1e-8, help="gradient tolerance relative to max(1, |Q|_F)")
    p.add_argument("--trace", help="write a JSON-lines solver log here")
    p.add_argument("--verbose-certificate", action="store_true", help="include the multipliers y in the report")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("synth", help="write a synthetic scene and its ground truth")
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--landmarks", type=int, required=True)
    p.add_argument("--visibility", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=0.0, help="depth noise level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="trajectory metrics of a solution against ground truth")
    p.add_argument("--solution", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--output", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors must not look like the "uncertified" exit status
        return EXIT_OK if not exc.code else EXIT_ERROR
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"certba: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
