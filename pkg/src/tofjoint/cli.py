"""Command-line toolchain: scene generation, ToF simulation, calibration, optimization, evaluation.

Exit codes: 0 success, 1 contract violation (bad input), 2 I/O error,
3 numerical failure (e.g. no overlapping valid pixels).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field

import numpy as np

from . import formats, nnsearch
from .alignment import ICPConfig, averaged_icp
from .errors import ContractViolation, NumericalFailure
from .geometry import backproject, normals_from_depth
from .losses import (
    ErrorMap,
    JitterConfig,
    LossWeights,
    ReweightedL1Config,
    chamfer,
    combined_depth_loss,
    cosine_loss,
    reweighted_smoothed_l1,
    robust_chamfer,
)
from .metrics import depth_metrics, evaluate_pair, format_table, metrics_row, normal_metrics, write_metrics_csv
from .optimizer import OptimizeConfig, jitter_label, optimize_depth, write_trace_csv
from .refine import RefineConfig, estimate_error_map, joint_refine
from .scenegen import read_scene, render_cloud, render_depth
from .tofsim import SimulationConfig, average_frames, decode_depth, simulate_frames

log = logging.getLogger("tofjoint")

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list = field(default_factory=list)
    message: str = ""


def cmd_gen_scene(args) -> list[str]:
    spec = read_scene(args.scene)
    k = formats.read_intrinsics(args.intrinsics)
    depth, normals = render_depth(spec, k)
    out = [f"{args.prefix}.depth.tfdr", f"{args.prefix}.normal.tfnr", f"{args.prefix}.ply"]
    formats.write_depth(out[0], depth)
    formats.write_normals(out[1], normals)
    formats.write_ply(out[2], render_cloud(spec, k))
    return out


def cmd_simulate(args) -> list[str]:
    gt = formats.read_depth(args.gt_depth)
    cfg = SimulationConfig((args.freq1, args.freq2), args.amplitude, args.offset, args.noise_sigma, args.seed)
    frames = simulate_frames(gt, cfg, args.frames)
    decoded = []
    for fr in frames:
        d, _ = decode_depth(fr, args.min_confidence)
        decoded.append(d)
    _, conf = decode_depth(frames[0], args.min_confidence)
    depth = average_frames(decoded)
    wanted = set(args.outputs.split(","))
    unknown = wanted - {"raw", "conf", "depth"}
    if unknown:
        raise ContractViolation(f"unknown outputs {sorted(unknown)}; choose from raw, conf, depth")
    out = []
    if "raw" in wanted:
        out.append(f"{args.prefix}.tfrw")
        formats.write_raw(out[-1], frames[0])
    if "conf" in wanted:
        out.append(f"{args.prefix}.conf.tfdr")
        formats.write_raster(out[-1], conf)
    if "depth" in wanted:
        out.append(f"{args.prefix}.depth.tfdr")
        formats.write_depth(out[-1], depth)
    common = depth.mask & gt.mask
    if common.any():
        rmse = float(np.sqrt(np.mean((depth.values - gt.values)[common] ** 2)))
        log.info("decoded %d/%d pixels, RMSE %.4f mm over %d frame(s)", depth.n_valid, gt.n_valid, rmse, args.frames)
    return out


def _parse_pair(text):
    src, sep, tgt = text.partition(":")
    if not sep or not src or not tgt:
        raise ContractViolation(f"--pairs entries look like SOURCE.ply:TARGET.ply, got {text!r}")
    return src, tgt


def cmd_align(args) -> list[str]:
    paths = [(args.source, args.target)] + [_parse_pair(p) for p in args.pairs]
    pairs = [(formats.read_ply(s), formats.read_ply(t)) for s, t in paths]
    cfg = ICPConfig(args.max_iterations, args.eps, args.max_pair_distance, args.trim_fraction)
    init = formats.read_transform(args.init) if args.init else None
    rig, results = averaged_icp(pairs, init, cfg)
    rms = float(np.mean([r.rms_residual for r in results]))
    for (s, t), r in zip(paths, results):
        log.info("%s -> %s: rms %.4f mm after %d iterations (converged=%s)", s, t, r.rms_residual, r.iterations, r.converged)
    formats.write_transform(args.output, rig, rms=rms, scenes=len(results))
    return [args.output]


def _error_map(args, init, k):
    if args.error_map:
        values = formats.read_raster(args.error_map)
        mask = np.isfinite(values) & (values >= 0)
        return ErrorMap(np.where(mask, values, 0.0), mask)
    if args.uniform_error is not None:
        return ErrorMap.uniform(init.shape, args.uniform_error)
    return estimate_error_map(init, k, args.window)


def _loss_setup(args):
    weights = LossWeights(args.w_l1, args.w_chamfer, not args.no_normalize_chamfer)
    l1 = ReweightedL1Config(args.delta, args.epsilon, args.reduction)
    jitter = None if args.no_jitter else JitterConfig(args.jitter_mm)
    return weights, l1, jitter


def cmd_optimize(args) -> list[str]:
    init = formats.read_depth(args.init_depth)
    gt_cloud = formats.read_ply(args.gt_ply)
    gt_depth = formats.read_depth(args.gt_depth)
    k = formats.read_intrinsics(args.intrinsics)
    err = _error_map(args, init, k)
    weights, l1, jitter = _loss_setup(args)
    cfg = OptimizeConfig(args.steps, args.step_size, args.momentum, weights, l1, jitter, log_every=args.log_every)
    depth, trace = optimize_depth(init, gt_cloud, gt_depth, err, k, cfg)
    out = [f"{args.prefix}.depth.tfdr", f"{args.prefix}.trace.csv"]
    formats.write_depth(out[0], depth)
    write_trace_csv(out[1], trace)
    log.info("loss %.6g -> %.6g in %d steps", trace[0].total, trace[-1].total, trace[-1].step)
    return out


def cmd_refine(args) -> list[str]:
    depth = formats.read_depth(args.depth)
    k = formats.read_intrinsics(args.intrinsics)
    cfg = RefineConfig(args.iterations, args.window, args.gamma, args.blend)
    if args.normals:
        normals = formats.read_normals(args.normals)
    else:
        normals = normals_from_depth(depth, k, cfg.window)
    new_depth, new_normals = joint_refine(depth, normals, k, cfg)
    out = [f"{args.prefix}.depth.tfdr", f"{args.prefix}.normal.tfnr"]
    formats.write_depth(out[0], new_depth)
    formats.write_normals(out[1], new_normals)
    return out


def cmd_eval(args) -> list[str]:
    pred = formats.read_depth(args.pred_depth)
    k = formats.read_intrinsics(args.intrinsics)
    if args.gt_ply:
        dm, nm = evaluate_pair(pred, formats.read_ply(args.gt_ply), k, args.window)
    else:
        gt = formats.read_depth(args.gt_depth)
        dm = depth_metrics(pred, gt)
        nm = normal_metrics(normals_from_depth(pred, k, args.window), normals_from_depth(gt, k, args.window))
    row = metrics_row(dm, nm)
    write_metrics_csv(args.output, [row])
    print(format_table(row))
    return [args.output]


def cmd_eval_loss(args) -> list[str]:
    pred = formats.read_depth(args.pred_depth)
    gt_depth = formats.read_depth(args.gt_depth)
    gt_cloud = formats.read_ply(args.gt_ply)
    k = formats.read_intrinsics(args.intrinsics)
    err = _error_map(args, pred, k)
    weights, l1, jitter = _loss_setup(args)
    p = backproject(pred, k)
    plain = chamfer(p, gt_cloud)
    robust = robust_chamfer(p, gt_cloud, jitter or JitterConfig(args.jitter_mm))
    row = {
        "reweighted_l1": reweighted_smoothed_l1(pred, gt_depth, err, l1).value,
        "chamfer": plain.value,
        "robust_chamfer": robust.value,
        "selected_jitter": jitter_label(robust.selected_jitter),
        "combined": combined_depth_loss(pred, gt_cloud, gt_depth, err, k, weights, l1, jitter).value,
        "cosine": float("nan"),
    }
    if args.pred_normals and args.gt_normals:
        row["cosine"] = cosine_loss(formats.read_normals(args.pred_normals), formats.read_normals(args.gt_normals)).value
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([v if isinstance(v, str) else repr(float(v)) for v in row.values()])
    for key, v in row.items():
        print(f"{key:<15} {v}")
    return [args.output]


class _Parser(argparse.ArgumentParser):
    """Report usage errors as contract violations (exit 1) instead of argparse's exit 2."""

    def error(self, message):
        raise ContractViolation(f"{self.prog}: {message}")


def _add_loss_flags(p):
    p.add_argument("--w-l1", type=float, default=1.0, help="weight of the reweighted smoothed l1 term")
    p.add_argument("--w-chamfer", type=float, default=1.0, help="weight of the Chamfer term (0 disables it)")
    p.add_argument("--no-normalize-chamfer", action="store_true", help="do not divide Chamfer by the point count")
    p.add_argument("--jitter-mm", type=float, default=10.0, help="jitter shift for the robust Chamfer, mm")
    p.add_argument("--no-jitter", action="store_true", help="use plain Chamfer")
    p.add_argument("--delta", type=float, default=20.0, help="smoothed-l1 threshold, mm")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    p.add_argument("--error-map", help="TFDR error map (mm); default: estimated from the depth")
    p.add_argument("--uniform-error", type=float, help="use a constant error map instead (disables reweighting)")
    p.add_argument("--window", type=int, default=5, help="window for the estimated error map / normals")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="NN query threads (0 = auto)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="tofjoint", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="NN query threads (0 = auto)")
    parser.add_argument("--seed", type=int, default=0, help="RNG seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", parents=[common], help="render a scene file to depth, normals and PLY")
    p.add_argument("scene")
    p.add_argument("intrinsics")
    p.add_argument("prefix")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("simulate", parents=[common], help="simulate raw ToF frames and decode them")
    p.add_argument("gt_depth")
    p.add_argument("prefix")
    p.add_argument("--freq1", type=float, default=20e6)
    p.add_argument("--freq2", type=float, default=100e6)
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--frames", type=int, default=1, help="shots to decode and average")
    p.add_argument("--min-confidence", type=float, default=0.0)
    p.add_argument("--outputs", default="raw,conf,depth", help="comma list of raw, conf, depth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("align", parents=[common], help="averaged ICP over calibration pairs")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--pairs", nargs="*", default=[], metavar="SRC:TGT", help="more calibration pairs")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--init", help="initial transform file")
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--max-pair-distance", type=float, default=100.0)
    p.add_argument("--trim-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("optimize", parents=[common], help="refine a depth map by descent on the combined loss")
    p.add_argument("init_depth")
    p.add_argument("gt_ply")
    p.add_argument("gt_depth")
    p.add_argument("intrinsics")
    p.add_argument("prefix")
    _add_loss_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--step-size", type=float)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("refine", parents=[common], help="joint depth/normal refinement")
    p.add_argument("depth")
    p.add_argument("intrinsics")
    p.add_argument("prefix")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--normals", help="TFNR normal map")
    g.add_argument("--estimate-normals", action="store_true", help="estimate normals from the depth")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--blend", type=float, default=0.5)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="depth and normal metrics")
    p.add_argument("pred_depth")
    p.add_argument("intrinsics")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt-ply")
    g.add_argument("--gt-depth")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--window", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-loss", parents=[common], help="evaluate the training losses")
    p.add_argument("pred_depth")
    p.add_argument("gt_depth")
    p.add_argument("gt_ply")
    p.add_argument("intrinsics")
    _add_loss_flags(p)
    p.add_argument("--pred-normals")
    p.add_argument("--gt-normals")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_eval_loss)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ContractViolation as exc:
        parser.print_usage(sys.stderr)
        return CommandResult(EXIT_CONTRACT, message=f"error: {exc}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    nnsearch.workers = -1 if args.threads == 0 else max(1, args.threads)
    try:
        return CommandResult(EXIT_OK, args.func(args))
    except ContractViolation as exc:
        return CommandResult(EXIT_CONTRACT, message=f"error: {exc}")
    except NumericalFailure as exc:
        return CommandResult(EXIT_NUMERIC, message=f"numerical failure: {exc}")
    except OSError as exc:
        return CommandResult(EXIT_IO, message=f"I/O error: {exc}")
    finally:
        nnsearch.workers = 1


def main(argv=None) -> int:
    result = run(argv)
    if result.message:
        print(result.message, file=sys.stderr)
    for path in result.artifacts:
        log.info("wrote %s", path)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
