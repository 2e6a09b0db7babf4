"""Command-line entry point: teach, repeat, sweep, transfer, offset, bench, study."""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from tandem.controller import CorrectionGains, NotOnRoute, RepeatState, estimate_offsets
from tandem.controller import apply_along_path_correction, apply_orientation_correction
from tandem.imaging import PGMFormatError, RawImage, ncc_profile, pixel_to_angle, preprocess, read_pgm
from tandem.route import RecordingParams, RouteError
from tandem.se2 import Pose2
from tandem.sim import CAMERAS, WORLD_NAMES, LightingPerturbation, OdometryModel, UnknownWorld, build_world
from tandem.sim import default_waypoints, render_view
from tandem.studies import STUDIES, run_study, transfer_trial
from tandem.trials import (
    AXES,
    SweepConfig,
    TrialConfig,
    cmd_repeat,
    cmd_sweep,
    cmd_teach,
    cmd_transfer,
    default_sweep_base,
    robot_params,
    summary_csv,
)

EXIT_OK, EXIT_TRIAL_FAILED, EXIT_USAGE = 0, 1, 2

BENCH_TARGET_MS = 50.0

# config key -> (owner, field, converter)
CONFIG_KEYS = {
    "image_width": ("params", "image_width", int),
    "image_height": ("params", "image_height", int),
    "patch_size": ("params", "patch_size", int),
    "ncc_search_px": ("params", "search_px", int),
    "fov_deg": ("params", "fov", lambda s: math.radians(float(s))),
    "tau_d": ("params", "tau_d", float),
    "tau_alpha": ("params", "tau_alpha", lambda s: math.radians(float(s))),
    "rho_bar": ("gains", "rho_bar", float),
    "k_theta": ("gains", "k_theta", float),
    "k_p": ("gains", "k_p", float),
    "k_window": ("gains", "k_window", int),
}


class ConfigError(ValueError):
    pass


def parse_config(text: str, params: RecordingParams = RecordingParams(), gains: CorrectionGains = CorrectionGains()):
    """Flat ``key = value`` lines; ``#`` starts a comment. Angles are in degrees."""
    updates = {"params": {}, "gains": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r} (known: {', '.join(CONFIG_KEYS)})")
        owner, name, conv = CONFIG_KEYS[key]
        try:
            updates[owner][name] = conv(value)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    try:
        return replace(params, **updates["params"]), replace(gains, **updates["gains"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, params: RecordingParams = RecordingParams()) -> tuple[RecordingParams, CorrectionGains]:
    if path is None:
        return params, CorrectionGains()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, params)


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _waypoints(text: str) -> list[tuple[float, float]]:
    pts = []
    for pair in text.split(";"):
        x, y = _floats(pair, 2)
        pts.append((x, y))
    return pts


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key=value parameter file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (route dir, CSV or sweep dir)")

    parser = argparse.ArgumentParser(prog="tandem", description="Visual teach and repeat in a planar simulator.")
    parser.add_argument("--config", default=None, help="flat key=value parameter file")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", default=None, help="output path (route dir, CSV or sweep dir)")
    sub = parser.add_subparsers(dest="command", required=True)

    def world_opts(p):
        p.add_argument("--world", default="corridor-loop", choices=WORLD_NAMES)
        p.add_argument("--world-seed", type=int, default=0)

    def trial_opts(p):
        p.add_argument("--camera", default="jackal", choices=sorted(CAMERAS))
        p.add_argument("--odom-scale", type=_positive, default=1.0, help="linear odometry multiplier")
        p.add_argument("--heading-drift", type=float, default=0.0, help="odometry heading drift, rad per metre")
        p.add_argument("--start-offset", type=lambda s: _floats(s, 3), default=[0.0, 0.0, 0.0],
                       metavar="FWD,LEFT,DEG", help="start pose relative to keyframe 0")
        p.add_argument("--correction-rate", type=float, default=None, metavar="HZ", help="<= 0 disables corrections")
        p.add_argument("--lighting", type=lambda s: _floats(s, 3), default=None, metavar="GAIN,BIAS,SHADOW")

    p = sub.add_parser("teach", parents=[common], help="drive a route and record keyframes")
    world_opts(p)
    p.add_argument("--camera", default="jackal", choices=sorted(CAMERAS))
    p.add_argument("--waypoints", type=_waypoints, default=None, metavar="X,Y;X,Y;...")

    p = sub.add_parser("repeat", parents=[common], help="repeat a taught route once")
    p.add_argument("route")
    world_opts(p)
    trial_opts(p)

    p = sub.add_parser("sweep", parents=[common], help="success rate over one parameter axis")
    p.add_argument("axis", choices=AXES)
    p.add_argument("values", help="comma-separated; resolution values look like 115x44")
    p.add_argument("--route", default=None, help="taught route; a fresh teach run is used if omitted")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    world_opts(p)
    trial_opts(p)

    p = sub.add_parser("transfer", parents=[common], help="crop a route to another camera's field of view")
    p.add_argument("route")
    p.add_argument("--source", default="miro", choices=sorted(CAMERAS))
    p.add_argument("--target", default="jackal", choices=sorted(CAMERAS))

    p = sub.add_parser("offset", parents=[common], help="correlation profile between two PGM images")
    p.add_argument("reference")
    p.add_argument("query")
    p.add_argument("--profile", action="store_true", help="print every offset, not just the peak")

    p = sub.add_parser("bench", parents=[common], help="time one full correction")
    p.add_argument("--repeats", type=int, default=200)

    p = sub.add_parser("study", parents=[common], help="run one of the canned indoor studies")
    p.add_argument("name", choices=sorted(STUDIES) + ["transfer"])
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _trial_config(args, gains: CorrectionGains) -> TrialConfig:
    if args.correction_rate is not None:
        rate = args.correction_rate
        gains = replace(gains, correction_period=math.inf if rate <= 0 else 1.0 / rate)
    fwd, left, deg = args.start_offset
    lighting = LightingPerturbation()
    if args.lighting is not None:
        lighting = LightingPerturbation(*args.lighting)
    return TrialConfig(
        gains=gains,
        camera=CAMERAS[args.camera],
        odometry=OdometryModel(linear_scale=args.odom_scale, heading_drift=args.heading_drift),
        lighting=lighting,
        start_offset=(fwd, left, math.radians(deg)),
        seed=args.seed,
    )


def _run_teach(args, params, gains) -> int:
    if args.out is None:
        raise ConfigError("teach needs --out DIR")
    world = build_world(args.world, args.world_seed)
    camera = CAMERAS[args.camera]
    params = replace(params, fov=camera.fov)
    waypoints = args.waypoints if args.waypoints is not None else default_waypoints(world)
    route = cmd_teach(world, waypoints, params, args.out, camera)
    print(f"recorded {len(route)} keyframes over {route.arc_lengths[-1]:.2f} m -> {args.out}")
    return EXIT_OK


def _run_repeat(args, params, gains) -> int:
    world = build_world(args.world, args.world_seed)
    cfg = _trial_config(args, gains)
    try:
        rec = cmd_repeat(args.route, world, cfg, args.out)
    except NotOnRoute as exc:
        print(f"not on route: {exc}", file=sys.stderr)
        return EXIT_TRIAL_FAILED
    print(
        f"{rec.outcome}: reached goal {rec.reached}/{rec.route_length - 1}, "
        f"mean |lat| {rec.mean_lateral:.3f} m, max |lat| {rec.max_lateral:.3f} m, "
        f"mean |path| {rec.mean_abs_path:.3f} m {rec.message}".rstrip()
    )
    return EXIT_OK if rec.success else EXIT_TRIAL_FAILED


def _run_sweep(args, params, gains) -> int:
    if args.axis == "resolution":
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    else:
        values = _floats(args.values)
    base = replace(default_sweep_base(), **vars_of(_trial_config(args, gains), "gains", "camera",
                                                                  "odometry", "lighting", "start_offset"))
    config = SweepConfig(
        axis=args.axis, values=values, repetitions=args.reps, world=args.world, world_seed=args.world_seed,
        route=args.route, master_seed=args.seed, base=base, jobs=args.jobs,
    )
    route = None
    if args.route is None:
        world = build_world(args.world, args.world_seed)
        route = cmd_teach(world, default_waypoints(world), params, None, CAMERAS[args.camera])
    grouped = cmd_sweep(config, args.out, route)
    sys.stdout.write(summary_csv(grouped))
    return EXIT_OK


def vars_of(obj, *names) -> dict:
    return {n: getattr(obj, n) for n in names}


def _run_transfer(args, params, gains) -> int:
    if args.out is None:
        raise ConfigError("transfer needs --out DIR")
    route = cmd_transfer(args.route, CAMERAS[args.source], CAMERAS[args.target], args.out)
    print(f"cropped {len(route)} keyframes to {math.degrees(route.params.fov):.1f} deg -> {args.out}")
    return EXIT_OK


def _run_offset(args, params, gains) -> int:
    a, b = (RawImage(read_pgm(path)) for path in (args.reference, args.query))
    pa, pb = (preprocess(im, params.image_width, params.image_height, params.patch_size) for im in (a, b))
    prof = ncc_profile(pa, pb, params.search_px)
    angle = pixel_to_angle(prof.best_offset, params.fov, params.image_width)
    if args.profile:
        for d, v in zip(prof.offsets, prof.values):
            print(f"{int(d)} {v:.6f}")
    print(f"best_offset {prof.best_offset} px, peak {prof.peak:.6f}, angle {math.degrees(angle):.3f} deg")
    return EXIT_OK


def bench_correction(params: RecordingParams, gains: CorrectionGains, repeats: int, seed: int = 0) -> np.ndarray:
    """Per-call milliseconds for preprocess + windowed NCC + both goal corrections."""
    world = build_world("corridor-loop", 0)
    route = cmd_teach(world, default_waypoints(world), params, None)
    rng = np.random.default_rng(seed)
    n = len(route) // 2
    robot = route.pose(n - 1) @ Pose2(0.1, 0.05, 0.02)
    raw = render_view(world, CAMERAS["jackal"], robot)
    route.bank  # build the reference spectra outside the timed region
    times = np.empty(repeats)
    for i in range(repeats):
        state = RepeatState.start(route, n - 1, route.pose(0) @ route.pose(0).inverse())
        jitter = Pose2(*rng.normal(0.0, 0.01, 3))
        t0 = time.perf_counter()
        query = preprocess(raw, params.image_width, params.image_height, params.patch_size)
        profiles = estimate_offsets(state, query, gains)
        apply_orientation_correction(state, robot @ jitter, gains)
        apply_along_path_correction(state, robot @ jitter, profiles, gains)
        times[i] = (time.perf_counter() - t0) * 1e3
    return times


def _run_bench(args, params, gains) -> int:
    if args.repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    ms = bench_correction(params, gains, args.repeats, args.seed)
    window = 2 * (gains.k_window + 1)
    print(
        f"correction {params.image_width}x{params.image_height}, D={params.search_px}, {window} windows: "
        f"median {np.median(ms):.2f} ms, p95 {np.percentile(ms, 95):.2f} ms, max {ms.max():.2f} ms "
        f"(target < {BENCH_TARGET_MS:.0f} ms)"
    )
    return EXIT_OK if np.median(ms) < BENCH_TARGET_MS else EXIT_TRIAL_FAILED


def _run_study(args, params, gains) -> int:
    if args.name == "transfer":
        out_csv = None
        if args.out is not None:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            out_csv = Path(args.out) / "transfer.csv"
        rec = transfer_trial(args.seed, out_csv=out_csv)
        print(f"transfer {rec.outcome}: mean |lat| {rec.mean_lateral:.3f} m, max |lat| {rec.max_lateral:.3f} m {rec.message}".rstrip())
        return EXIT_OK
    grouped = run_study(args.name, args.seed, args.out, args.jobs)
    sys.stdout.write(summary_csv(grouped))
    return EXIT_OK


COMMANDS = {
    "teach": _run_teach,
    "repeat": _run_repeat,
    "sweep": _run_sweep,
    "transfer": _run_transfer,
    "offset": _run_offset,
    "bench": _run_bench,
    "study": _run_study,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        params, gains = load_config(args.config, robot_params(getattr(args, "camera", "jackal")))
        return COMMANDS[args.command](args, params, gains)
    except (ConfigError, RouteError, PGMFormatError, UnknownWorld, ValueError, OSError) as exc:
        print(f"tandem {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
