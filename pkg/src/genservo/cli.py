"""Command line: ``genservo <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import io
from . import simulator as sim
from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    GenservoError,
    NonFiniteObjective,
    OptimizationDiverged,
)
from .learning import (
    VARIANTS,
    LearnConfig,
    WorldHints,
    expand_groups,
    learn_full,
    learn_pipeline,
    rms_px,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

log = logging.getLogger("genservo")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _int_list(text):
    try:
        out = []
        for part in text.split(","):
            if "-" in part.strip()[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            elif part.strip():
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad integer list {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _str_list(text):
    return [p.strip() for p in text.split(",") if p.strip()]


def _emit(obj):
    print(json.dumps(io.jsonable(obj), sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_collect(args):
    world = io.read_world(args.world, **_noise_overrides(args))
    if args.mode == "uniform":
        data = sim.collect_uniform(world, args.samples, seed=args.seed)
    else:
        data = sim.collect_random(world, args.samples, step_scale=args.step_scale, seed=args.seed)
    if args.hide_joints:
        data = data.without_joints()
    io.write_dataset(data, args.out)
    _emit({"samples": data.T, "cameras": data.c, "features": data.m, "out": str(args.out)})


def _noise_overrides(args):
    noise = {}
    if getattr(args, "pixel_noise", None) is not None:
        noise["pixel_sigma"] = args.pixel_noise
    if getattr(args, "controller_noise", None) is not None:
        noise["controller_sigma"] = args.controller_noise
    return {"noise": noise} if noise else {}


def _hints(args, data):
    if args.world:
        return WorldHints.from_world(io.read_world(args.world))
    if args.intrinsics:
        k = np.array([float(v) for v in args.intrinsics.split(",")])
        if k.size != 4:
            raise UsageError("--intrinsics takes fx,fy,cx,cy")
        return WorldHints(k)
    raise UsageError("learning needs prior intrinsics: pass --world or --intrinsics")


def cmd_learn(args):
    data = io.read_dataset(args.data)
    frozen = frozenset(_str_list(args.frozen)) if args.frozen else frozenset()
    changes = {"seed": args.seed, "unobserved_joints": args.unobserved_joints}
    if args.lam is not None:
        changes["lam"] = args.lam
    cfg = LearnConfig.for_variant(args.variant, **changes)
    if args.unobserved_joints and data.actions is None:
        raise UsageError("--unobserved-joints needs a dataset with actions")
    if args.init_model:
        model = io.read_model(args.init_model)
        unknown = expand_groups(frozen, model.m, model.c) - _known_groups(model)
        if unknown:
            raise UsageError(f"unknown parameter groups: {', '.join(sorted(unknown))}")
        result = learn_full(data, model, LearnConfig.for_variant(args.variant, frozen=frozen, seed=args.seed))
    else:
        if frozen:
            raise UsageError("--frozen needs --init-model to take the frozen values from")
        result = learn_pipeline(data, _hints(args, data), cfg)
    for rep in result.reports:
        print(
            f"{rep.stage or 'stage'}: objective {rep.initial_objective:.6g} -> {rep.final_objective:.6g} "
            f"in {rep.iterations} iterations ({rep.termination_reason})"
        )
    io.write_model(result.model, args.out)
    io.write_report(
        io.report_path(args.out),
        variant=result.variant,
        train_rms_px=result.train_rms_px,
        samples=data.T,
        stages=[r.to_dict() for r in result.reports],
        inferred_joints=result.inferred_joints,
    )
    if args.log:
        io.write_fit_log(result.reports, args.log)
    _emit({"train_rms_px": result.train_rms_px, "variant": result.variant, "out": str(args.out)})


def _known_groups(model):
    from .learning import all_groups

    return all_groups(model)


def cmd_eval(args):
    model = io.read_model(args.model)
    data = io.read_dataset(args.data)
    if data.joints is None:
        raise UsageError("evaluation needs joint readings")
    count = int(data.visible[:, : model.c, : model.m].sum())
    _emit({"rms_px": rms_px(model, data), "samples": data.T, "detections": count})


def cmd_servo(args):
    model = io.read_model(args.model)
    world = io.read_world(args.world, **_noise_overrides(args))
    summary = ex.run_servo(
        model,
        world,
        targets=args.targets,
        gain=args.gain,
        max_steps=args.max_steps,
        seed=args.seed,
        clamp=None if args.no_clamp else args.clamp,
        use_encoders=not args.pure_image,
        stop_px=args.stop_px,
    )
    rows = []
    header = None
    unreachable = 0
    for k, trace in enumerate(summary.traces):
        h, rs = trace.to_rows()
        header = ["target"] + h
        rows.extend([k] + r for r in rs)
        unreachable += trace.final_rms_px > args.unreachable_px
    if args.out:
        io.write_rows(args.out, header, rows)
    _emit(
        {
            "targets": args.targets,
            "mean_final_rms_px": summary.mean_final_px,
            "mean_final_true_rms_px": summary.mean_final_true_px,
            "mean_steps": float(np.mean(summary.steps)),
            "unconverged": int(unreachable),
        }
    )


def cmd_adapt(args):
    model = io.read_model(args.model)
    world = io.read_world(args.world, **_noise_overrides(args))
    train = None
    sidecar = io.report_path(args.model)
    if sidecar.exists():
        train = io.read_report(sidecar).get("train_rms_px")
    relearn = _str_list(args.relearn) if args.relearn else None
    curve = ex.adapt_curve(
        model,
        world,
        args.perturb,
        relearn=relearn,
        samples=args.samples,
        seed=args.seed,
        threshold_px=args.threshold,
        train_rms_px=train,
        magnitude=args.magnitude,
        update=args.update,
    )
    header, rows = curve.to_rows()
    if args.out:
        io.write_rows(args.out, header, rows)
    _emit({"perturb": args.perturb, "change_detections": curve.detections, "final_heldout_rms_px": rows[-1][1]})


def cmd_bench(args):
    model = io.read_model(args.model)
    ops = _str_list(args.ops) if args.ops else list(ex.BENCH_OPS)
    timings = ex.bench(model, ops, reps=args.reps, seed=args.seed, infer_reps=args.infer_reps)
    _emit({"seconds_per_call": timings, "reps": args.reps, "infer_reps": args.infer_reps or args.reps})


def cmd_table1(args):
    for v in args.variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    rows = ex.run_table(args.worlds, args.sizes, args.variants, args.seeds, args.pixel_noise, args.workers)
    table = ex.table_markdown(rows)
    if args.out:
        Path(args.out).write_text(table)
    if args.raw:
        io.write_json(rows, args.raw)
    sys.stdout.write(table)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genservo", description="Learn a camera-robot model from images and servo with it.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="simulate a dataset")
    p.add_argument("--world", required=True, help="preset name or world config JSON")
    p.add_argument("--samples", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("random-walk", "uniform"), default="random-walk")
    p.add_argument("--step-scale", type=float)
    p.add_argument("--pixel-noise", type=float)
    p.add_argument("--controller-noise", type=float)
    p.add_argument("--hide-joints", action="store_true", help="keep only the commanded actions")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("learn", help="learn a model from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="dvs")
    p.add_argument("--out", required=True)
    p.add_argument("--world", help="world whose datasheet intrinsics and DH table seed learning")
    p.add_argument("--intrinsics", help="fx,fy,cx,cy used when no world is given")
    p.add_argument("--init-model", help="start from this model (then only the joint refinement runs)")
    p.add_argument("--frozen", help="comma-separated parameter groups to keep fixed")
    p.add_argument("--unobserved-joints", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="write per-stage objective histories (JSON lines)")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("eval", help="held-out RMS of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("servo", help="servo to random reachable targets in the simulator")
    p.add_argument("--model", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--targets", type=_positive_int, default=50)
    p.add_argument("--gain", type=float, default=0.7)
    p.add_argument("--max-steps", type=_positive_int, default=50)
    p.add_argument("--stop-px", type=float, default=0.0)
    p.add_argument("--clamp", type=float, default=0.2, help="per-joint command limit (rad)")
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--pure-image", action="store_true", help="infer current joints from the image instead of encoders")
    p.add_argument("--unreachable-px", type=float, default=5.0, help="final error counted as not converged")
    p.add_argument("--pixel-noise", type=float)
    p.add_argument("--controller-noise", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_servo)

    p = sub.add_parser("adapt", help="perturb the world and relearn online")
    p.add_argument("--model", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--perturb", choices=ex.PERTURBATIONS, required=True)
    p.add_argument("--relearn", help="comma-separated parameter groups to relearn (default depends on --perturb)")
    p.add_argument("--samples", type=_positive_int, default=25)
    p.add_argument("--magnitude", type=float)
    p.add_argument("--threshold", type=float, help="change-detection threshold in px")
    p.add_argument("--update", choices=ex.UPDATE_MODES, default="on-change", help="when to relearn")
    p.add_argument("--pixel-noise", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("bench", help="time model queries")
    p.add_argument("--model", required=True)
    p.add_argument("--ops", help=f"comma-separated subset of {','.join(ex.BENCH_OPS)}")
    p.add_argument("--reps", type=_positive_int, default=1000)
    p.add_argument("--infer-reps", type=_positive_int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("table1", help="held-out accuracy over sizes, variants and seeds")
    p.add_argument("--worlds", type=_str_list, default=["ur5_sim", "xarm_sim"])
    p.add_argument("--sizes", type=_int_list, default=[50, 75, 100])
    p.add_argument("--variants", type=_str_list, default=list(VARIANTS))
    p.add_argument("--seeds", type=_int_list, default=list(range(10)))
    p.add_argument("--pixel-noise", type=float)
    p.add_argument("--workers", type=_positive_int, help=f"parallel workers (default ${ex.WORKERS_ENV} or 1)")
    p.add_argument("--out", help="write the Markdown table here")
    p.add_argument("--raw", help="write per-run rows as JSON")
    p.set_defaults(func=cmd_table1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigInvalid, DimensionMismatch, FileNotFoundError, ValueError) as exc:
        print(f"genservo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OptimizationDiverged, NonFiniteObjective, np.linalg.LinAlgError) as exc:
        print(f"genservo {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GenservoError as exc:
        print(f"genservo {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
