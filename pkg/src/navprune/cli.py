"""Command line entry point.

Subcommands: build, scenegen, profile, prune, eval, navigate. Exit codes:
0 success, 2 usage error, 1 runtime error. Reports are JSON with every
timing-derived field under a "timing" key so reproducibility checks can
mask them.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalharness, navpipe, pruner, profiler, scenegen
from .errors import NavpruneError
from .model import ArchitectureConfig, build_toyformer, load_model, save_model


def _ratio(value: str) -> float:
    try:
        r = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {value!r}") from None
    if not (0.0 < r < 1.0):
        raise argparse.ArgumentTypeError(
            f"pruning ratio must lie in the open range (0, 1), got {value}")
    return r


def _threshold(value: str) -> float:
    t = float(value)
    if not (0.0 < t < 1.0):
        raise argparse.ArgumentTypeError(
            f"threshold must lie in the open range (0, 1), got {value}")
    return t


def _latency_list(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated latencies in ms, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navprune",
        description="Latency-aware structured pruning and sidewalk navigation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="emit the default model")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--seed", type=int, default=0, help="weight init seed")

    p = sub.add_parser("scenegen", help="write synthetic (image, mask) frames")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=1, help="number of frames")
    p.add_argument("--drift", choices=("none", "left", "right"), default="none")
    p.add_argument("--pos", type=int, default=28, help="sidewalk strip column")
    p.add_argument("--width", type=int, default=10, help="sidewalk strip width")

    p = sub.add_parser("profile", help="measure per-block latency")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--power", type=float, default=None,
                   help="per-block watts for the energy estimate")
    p.add_argument("--out", default=None, help="write the JSON report here")

    p = sub.add_parser("prune", help="profile, allocate, and prune a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="pruned model path")
    p.add_argument("--ratio", type=_ratio, default=0.35,
                   help="global pruning ratio p in (0, 1)")
    p.add_argument("--method", choices=pruner.METHODS, default=pruner.METHOD_DISHA)
    p.add_argument("--seed", type=int, default=0, help="random-method selection seed")
    p.add_argument("--calib", type=int, default=8, help="calibration scene count")
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--latencies", type=_latency_list, default=None,
                   help="inject per-block latencies (ms) instead of measuring; "
                        "makes the run fully reproducible")
    p.add_argument("--plan-out", default=None,
                   help="audit JSON path (default: <out>.plan.json)")

    p = sub.add_parser("eval", help="compare baseline / disha / random models")
    p.add_argument("--model", required=True, help="unpruned baseline model")
    p.add_argument("--disha", required=True, help="disha-pruned model")
    p.add_argument("--random", required=True, help="randomly pruned model")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--power", type=float, default=None)
    p.add_argument("--out", default=None, help="write the JSON report here")

    p = sub.add_parser("navigate", help="run the frame loop over a directory")
    p.add_argument("--frames", required=True, help="directory of .ppm/.pgm frames")
    p.add_argument("--model", default=None,
                   help="segmentation model; without it, .pgm class masks are "
                        "consumed directly")
    p.add_argument("--threshold", type=_threshold, default=0.4)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--cue-hook", default=None,
                   help="command invoked with each cue as its final argument")
    p.add_argument("--out", default=None, help="also write the log here")
    return parser


def _dump(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _cmd_build(args) -> int:
    cfg = replace(ArchitectureConfig(), seed=args.seed)
    save_model(build_toyformer(cfg), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_scenegen(args) -> int:
    spec = scenegen.SceneSpec(seed=args.seed, sidewalk_pos=args.pos,
                              sidewalk_width=args.width)
    frames = scenegen.generate_walk_sequence(spec, args.frames, drift=args.drift)
    for i, (image, mask) in enumerate(frames):
        scenegen.save_scene_files(args.out, args.seed, i, image, mask)
    print(f"wrote {len(frames)} frame(s) to {args.out}")
    return 0


def _cmd_profile(args) -> int:
    model = load_model(args.model)
    profiles = profiler.profile_blocks(model, reps=args.reps, warmup=args.warmup,
                                       include_decoder=True)
    payload = {"model": args.model,
               "params": model.param_count(),
               "timing": profiler.profiles_to_dict(profiles)}
    if args.power is not None:
        report = profiler.estimate_energy(profiles, args.power)
        payload["timing"]["energy"] = report.to_dict()
    _dump(payload, args.out)
    return 0


def _cmd_prune(args) -> int:
    model = load_model(args.model)
    if args.latencies is not None:
        profiles = profiler.synthetic_profiles(model, args.latencies)
        measured = False
    else:
        profiles = profiler.profile_blocks(model, reps=args.reps, warmup=args.warmup)
        measured = True
    table = pruner.compute_kscores(profiles, use_prunable_params=True)
    alloc = pruner.allocate(args.ratio, table)
    calibration = scenegen.calibration_scenes(args.calib, seed=args.seed,
                                              size=model.input_size)
    stats = pruner.collect_activations(model, calibration)
    plan = pruner.make_prune_plan(stats, alloc, method=args.method, seed=args.seed)
    pruned = pruner.apply_prune(model, plan)
    save_model(pruned, args.out)

    audit = {"method": args.method, "ratio": args.ratio, "seed": args.seed,
             "params_before": model.param_count(),
             "params_after": pruned.param_count(),
             "removed_params_budget": pruner.plan_removed_params(model, plan),
             "allocation": alloc.to_dict(),
             "plan": plan.to_dict(),
             "timing": {"measured": measured,
                        "latencies_ms": {p.block: p.latency_ms for p in profiles}}}
    plan_path = args.plan_out or (args.out + ".plan.json")
    Path(plan_path).write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out} and {plan_path}")
    return 0


def _cmd_eval(args) -> int:
    base = load_model(args.model)
    disha = load_model(args.disha)
    rand = load_model(args.random)
    scenes = []
    for i in range(args.scenes):
        rng = np.random.default_rng(50_000 + args.seed + i)
        spec = scenegen.SceneSpec(seed=args.seed + i,
                                  sidewalk_pos=int(rng.integers(2, base.input_size - 14)),
                                  sidewalk_width=int(rng.integers(6, 13)))
        scenes.append(scenegen.generate_scene(spec))
    report = evalharness.compare_report(base, disha, rand, scenes,
                                        reps=args.reps, warmup=args.warmup,
                                        power_w=args.power)
    _dump(report.to_dict(), args.out)
    print(report.to_table())
    return 0


def _cmd_navigate(args) -> int:
    config = navpipe.NavConfig(threshold=args.threshold, window=args.window,
                               walkable_classes=scenegen.WALKABLE_CLASSES)
    if args.cue_hook:
        config.cue_hook = navpipe.command_hook(args.cue_hook)
    if args.model:
        segment = navpipe.model_segmenter(load_model(args.model))
        frames = navpipe.directory_frames(args.frames, masks=False)
    else:
        segment = None
        frames = navpipe.directory_frames(args.frames, masks=True)
    lines = []
    for result in navpipe.run_pipeline(frames, segment, config):
        line = result.log_line()
        lines.append(line)
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + ("\n" if lines else ""))
    return 0


_COMMANDS = {"build": _cmd_build, "scenegen": _cmd_scenegen, "profile": _cmd_profile,
             "prune": _cmd_prune, "eval": _cmd_eval, "navigate": _cmd_navigate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except NavpruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
