"""Simulated teach runs, repeat trials, parameter sweeps and route transfer."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tandem.controller import (
    CorrectionGains,
    Limits,
    NotOnRoute,
    PoseGains,
    Repeater,
    RepeatState,
    INIT_THRESHOLD,
    global_initialize,
    pose_control_step,
)
from tandem.imaging import preprocess
from tandem.route import KeyframeRecorder, RecordingParams, Route, crop_to_fov, load_route, save_route
from tandem.se2 import Pose2, compose
from tandem.sim import (
    CAMERAS,
    CameraConfig,
    JACKAL_CAMERA,
    LightingPerturbation,
    NO_LIGHTING,
    OdometryModel,
    Simulator,
    World,
    build_world,
)

CONTROL_DT = 0.02
CRASH_THRESHOLD = 1.0
STALL_TIMEOUT = 30.0

TICK_COLUMNS = (
    "t", "true_x", "true_y", "true_theta", "odom_x", "odom_y", "odom_theta",
    "goal_index", "u", "d_theta", "d_p", "lat_err", "path_err",
)
SUMMARY_COLUMNS = ("value", "successes", "total", "mean_lat_err", "max_lat_err", "mean_abs_path_err")


class UnreachableWaypoint(RuntimeError):
    pass


# -- metrics ----------------------------------------------------------------


class Polyline:
    """Teach ground-truth path with nearest-point projection."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if len(pts) < 2:
            raise ValueError("polyline needs at least 2 vertices")
        self.a = pts[:-1]
        d = pts[1:] - pts[:-1]
        self.len2 = np.einsum("ij,ij->i", d, d)
        keep = self.len2 > 1e-18
        self.a, d, self.len2 = self.a[keep], d[keep], self.len2[keep]
        self.d = d
        self.length = np.sqrt(self.len2)
        self.arc = np.concatenate([[0.0], np.cumsum(self.length)])[:-1]

    def project(self, x: float, y: float) -> tuple[float, float]:
        """(signed lateral offset, left positive; arc-length of the nearest point)."""
        rx, ry = x - self.a[:, 0], y - self.a[:, 1]
        t = np.clip((rx * self.d[:, 0] + ry * self.d[:, 1]) / self.len2, 0.0, 1.0)
        ex, ey = rx - t * self.d[:, 0], ry - t * self.d[:, 1]
        dist2 = ex * ex + ey * ey
        i = int(np.argmin(dist2))
        cross = self.d[i, 0] * ry[i] - self.d[i, 1] * rx[i]
        lateral = math.sqrt(dist2[i])
        if cross < 0:
            lateral = -lateral
        return lateral, float(self.arc[i] + t[i] * self.length[i])


def compute_metrics(true_pose: Pose2, teach_path: Polyline, believed_progress: float) -> tuple[float, float]:
    """Lateral error and along-path error (believed minus actual arc-length)."""
    lateral, arc = teach_path.project(true_pose.x, true_pose.y)
    return lateral, believed_progress - arc


def believed_progress(route: Route, goal_index: int, u: float) -> float:
    arcs = route.arc_lengths
    n = goal_index
    if not math.isfinite(u):
        return float(arcs[n])
    return float(arcs[n - 1] + u * (arcs[n] - arcs[n - 1]))


# -- teach ------------------------------------------------------------------


def _densify(waypoints, spacing=0.05):
    pts = [np.asarray(waypoints[0], dtype=float)]
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
        for i in range(1, n + 1):
            pts.append(a + (b - a) * i / n)
    return np.array(pts)


def teach_run(
    world: World,
    waypoints,
    params: RecordingParams,
    camera: CameraConfig = JACKAL_CAMERA,
    lookahead: float = 0.4,
    budget_factor: float = 20.0,
):
    """Drive the waypoint path with the pose controller, recording keyframes from the true pose."""
    if len(waypoints) < 2:
        raise ValueError("teach needs at least two waypoints")
    path = _densify(waypoints)
    seglen = np.hypot(*np.diff(path, axis=0).T)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arc[-1]
    headings = np.arctan2(*np.diff(path, axis=0).T[::-1])
    headings = np.append(headings, headings[-1])
    start = Pose2(path[0, 0], path[0, 1], headings[0])
    sim = Simulator(world, camera, OdometryModel(), start, start)
    recorder = KeyframeRecorder(params)
    gains, limits = PoseGains(), Limits()
    budget = budget_factor * total / 0.4 + 10.0
    cursor = 0
    t = 0.0
    while True:
        pose = sim.state.true_pose
        if recorder.should_record(pose):
            recorder.update(pose, sim.render())
        # progress along the path, searched forward from the last match
        window = slice(cursor, min(len(path), cursor + 40))
        i = cursor + int(np.argmin(np.hypot(path[window, 0] - pose.x, path[window, 1] - pose.y)))
        cursor = i
        target_arc = arc[i] + lookahead
        if target_arc >= total:
            goal = Pose2(path[-1, 0], path[-1, 1], headings[-1])
            if pose.distance_to(goal) < 0.01:
                break
        else:
            j = int(np.searchsorted(arc, target_arc))
            goal = Pose2(path[j, 0], path[j, 1], headings[j])
        sim.step(pose_control_step(pose, goal, gains, limits), CONTROL_DT)
        t += CONTROL_DT
        if t > budget:
            raise UnreachableWaypoint(f"teach did not reach {tuple(path[-1])} within {budget:.0f} s")
    recorder.finish(sim.state.true_pose, sim.render())
    return recorder.route()


def cmd_teach(world: World, waypoints, params: RecordingParams, out_dir, camera: CameraConfig = JACKAL_CAMERA) -> Route:
    route = teach_run(world, waypoints, params, camera)
    if out_dir is not None:
        save_route(route, out_dir)
    return route


# -- repeat -----------------------------------------------------------------


@dataclass(frozen=True)
class TrialConfig:
    gains: CorrectionGains = CorrectionGains()
    pose_gains: PoseGains = PoseGains()
    limits: Limits = Limits()
    camera: CameraConfig = JACKAL_CAMERA
    odometry: OdometryModel = OdometryModel()
    lighting: LightingPerturbation = NO_LIGHTING
    # start pose relative to keyframe 0, in its frame (forward, left, heading)
    start_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start_jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    crash_threshold: float = CRASH_THRESHOLD
    stall_timeout: float = STALL_TIMEOUT
    init_threshold: float = INIT_THRESHOLD
    # finishing farther than this from the last keyframe counts as a miss;
    # None means the along-path window's reach, (K + 1) * tau_d
    arrival_tolerance: float | None = None
    control_dt: float = CONTROL_DT
    max_time: float | None = None


@dataclass
class TrialRecord:
    outcome: str
    rows: np.ndarray
    reached: int
    route_length: int
    message: str = ""

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    @property
    def lateral(self) -> np.ndarray:
        return self.rows[:, TICK_COLUMNS.index("lat_err")] if len(self.rows) else np.zeros(0)

    @property
    def path_err(self) -> np.ndarray:
        return self.rows[:, TICK_COLUMNS.index("path_err")] if len(self.rows) else np.zeros(0)

    @property
    def mean_lateral(self) -> float:
        lat = self.lateral
        return float(np.mean(np.abs(lat))) if lat.size else math.nan

    @property
    def max_lateral(self) -> float:
        lat = self.lateral
        return float(np.max(np.abs(lat))) if lat.size else math.nan

    @property
    def mean_abs_path(self) -> float:
        pe = self.path_err
        return float(np.mean(np.abs(pe))) if pe.size else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TICK_COLUMNS)
            for row in self.rows:
                w.writerow([f"{row[0]:.2f}", *(format_float(v) for v in row[1:7]), int(row[7]), *(format_float(v) for v in row[8:])])


def format_float(v: float) -> str:
    return "nan" if not math.isfinite(v) else f"{v:.6f}"


def start_pose(route: Route, cfg: TrialConfig) -> Pose2:
    dx, dy, dth = cfg.start_offset
    jx, jy, jth = cfg.start_jitter
    if any(cfg.start_jitter):
        rng = np.random.default_rng([cfg.seed, 1])
        dx += rng.normal(0.0, jx)
        dy += rng.normal(0.0, jy)
        dth += rng.normal(0.0, jth)
    return compose(route.pose(0), Pose2(dx, dy, dth))


def run_trial(route: Route, world: World, cfg: TrialConfig) -> TrialRecord:
    p = route.params
    true_start = start_pose(route, cfg)
    sim = Simulator(world, cfg.camera, replace(cfg.odometry, seed=cfg.odometry.seed ^ cfg.seed), true_start, Pose2(), cfg.lighting)
    first = preprocess(sim.render(), p.image_width, p.image_height, p.patch_size)
    anchor = global_initialize(route, first, cfg.init_threshold)
    state = RepeatState.start(route, anchor, sim.state.odom_pose)
    rep = Repeater(state, cfg.gains, cfg.pose_gains, cfg.limits)
    teach_path = Polyline([q.position for q in route.poses])

    dt = cfg.control_dt
    max_time = cfg.max_time or 30.0 * route.arc_lengths[-1] / 0.1 + 60.0
    rows = []
    t = 0.0
    last_advance = 0.0
    outcome, message = "stalled", ""
    while True:
        odom = sim.state.odom_pose
        image = sim.render() if rep.correction_due(t) else None
        info = rep.tick(odom, image, t)
        if info.advanced:
            last_advance = t
        truth = sim.state.true_pose
        lat, perr = compute_metrics(truth, teach_path, believed_progress(route, min(info.goal_index, len(route) - 1), info.u))
        rows.append((t, truth.x, truth.y, truth.theta, odom.x, odom.y, odom.theta, info.goal_index, info.u, info.d_theta, info.d_p, lat, perr))
        if abs(lat) > cfg.crash_threshold:
            outcome, message = "crash", f"lateral error {lat:+.2f} m at t={t:.1f} s"
            break
        if rep.finished:
            miss = truth.distance_to(route.pose(len(route) - 1))
            tol = cfg.arrival_tolerance
            if tol is None:
                tol = (cfg.gains.k_window + 1) * p.tau_d
            if miss <= tol:
                outcome = "success"
            else:
                outcome, message = "missed_end", f"finished {miss:.2f} m from the last keyframe (tolerance {tol:.2f} m)"
            break
        if t - last_advance > cfg.stall_timeout or t > max_time:
            outcome, message = "stalled", f"no goal advance since t={last_advance:.1f} s"
            break
        sim.step(info.command, dt)
        t = round(t + dt, 9)
    return TrialRecord(outcome, np.array(rows, dtype=np.float64), state.goal_index, len(route), message)


def cmd_repeat(route_dir, world: World, cfg: TrialConfig, out_csv=None) -> TrialRecord:
    route = load_route(route_dir) if not isinstance(route_dir, Route) else route_dir
    record = run_trial(route, world, cfg)
    if out_csv is not None:
        record.write_csv(out_csv)
    return record


# -- transfer ---------------------------------------------------------------


def cmd_transfer(route_dir, source_camera: CameraConfig, target_camera: CameraConfig, out_dir=None) -> Route:
    route = load_route(route_dir) if not isinstance(route_dir, Route) else route_dir
    if abs(route.params.fov - source_camera.fov) > 1e-9:
        route = replace(route, params=replace(route.params, fov=source_camera.fov))
    out = crop_to_fov(route, target_camera.fov, target_camera.image_width, target_camera.image_height)
    if out_dir is not None:
        save_route(out, out_dir)
    return out


# -- sweeps -----------------------------------------------------------------

AXES = ("odometry_scale", "resolution", "k_theta", "k_p", "correction_rate")


def derive_seed(master: int, axis: str, i: int, r: int) -> int:
    digest = hashlib.sha256(f"{master}:{axis}:{i}:{r}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 2


def parse_resolution(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    w, h = str(value).lower().split("x")
    return int(w), int(h)


# the distance threshold is the only recording parameter that differs per robot
ROBOT_TAU_D = {"jackal": 0.3, "miro": 0.2}


def robot_params(name: str) -> RecordingParams:
    """Recording parameters for the named robot, FOV taken from its camera."""
    return replace(RecordingParams(), fov=CAMERAS[name].fov, tau_d=ROBOT_TAU_D[name])


# repetitions differ only through this start scatter and the odometry noise seed
SWEEP_START_JITTER = (0.05, 0.05, math.radians(2.0))


def default_sweep_base() -> TrialConfig:
    return TrialConfig(start_jitter=SWEEP_START_JITTER)


@dataclass
class SweepConfig:
    axis: str
    values: list
    repetitions: int = 5
    world: str = "corridor-loop"
    world_seed: int = 0
    route: str | None = None
    master_seed: int = 0
    base: TrialConfig = field(default_factory=default_sweep_base)
    jobs: int = 1
    write_records: bool = True

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {AXES}")
        if not self.values:
            raise ValueError("sweep values must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


def apply_axis(route: Route, cfg: TrialConfig, axis: str, value) -> tuple[Route, TrialConfig]:
    if axis == "odometry_scale":
        return route, replace(cfg, odometry=replace(cfg.odometry, linear_scale=float(value)))
    if axis == "k_theta":
        return route, replace(cfg, gains=replace(cfg.gains, k_theta=float(value)))
    if axis == "k_p":
        return route, replace(cfg, gains=replace(cfg.gains, k_p=float(value)))
    if axis == "correction_rate":
        rate = float(value)
        return route, replace(cfg, gains=replace(cfg.gains, correction_period=math.inf if rate <= 0 else 1.0 / rate))
    if axis == "resolution":
        w, h = parse_resolution(value)
        return route.reprocess(route.params.with_resolution(w, h)), cfg
    raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class TrialSummary:
    value: object
    rep: int
    seed: int
    outcome: str
    mean_lateral: float
    max_lateral: float
    mean_abs_path: float
    message: str = ""

    @property
    def success(self) -> bool:
        return self.outcome == "success"


def _trial_job(args):
    route, world, cfg, axis, value, rep, seed, record_path = args
    r, c = apply_axis(route, replace(cfg, seed=seed), axis, value)
    try:
        rec = run_trial(r, world, c)
    except NotOnRoute as exc:
        return TrialSummary(value, rep, seed, "not_on_route", math.nan, math.nan, math.nan, str(exc))
    if record_path is not None:
        rec.write_csv(record_path)
    return TrialSummary(value, rep, seed, rec.outcome, rec.mean_lateral, rec.max_lateral, rec.mean_abs_path, rec.message)


def value_label(v) -> str:
    if isinstance(v, (tuple, list)):
        return f"{v[0]}x{v[1]}"
    return str(v)


def cmd_sweep(config: SweepConfig, out_dir=None, route: Route | None = None) -> list[list[TrialSummary]]:
    """Run axis value x repetition trials; failures are recorded, never raised."""
    world = build_world(config.world, config.world_seed)
    if route is None:
        if config.route is None:
            raise ValueError("sweep needs a route directory or a Route")
        route = load_route(config.route)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "trials").mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, value in enumerate(config.values):
        for r in range(config.repetitions):
            seed = derive_seed(config.master_seed, config.axis, i, r)
            rec_path = None
            if out is not None and config.write_records:
                rec_path = out / "trials" / f"{config.axis}_{i:02d}_{r:02d}.csv"
            jobs.append((route, world, config.base, config.axis, value, r, seed, rec_path))
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            flat = list(pool.map(_trial_job, jobs))
    else:
        flat = [_trial_job(j) for j in jobs]
    grouped = [flat[i * config.repetitions : (i + 1) * config.repetitions] for i in range(len(config.values))]
    if out is not None:
        (out / "summary.csv").write_text(summary_csv(grouped))
        (out / f"{config.axis}.dat").write_text(summary_dat(config.axis, grouped))
    return grouped


def _mean(xs):
    xs = [x for x in xs if math.isfinite(x)]
    return float(np.mean(xs)) if xs else math.nan


def summary_rows(grouped):
    for group in grouped:
        ok = sum(t.success for t in group)
        yield (
            value_label(group[0].value),
            ok,
            len(group),
            _mean([t.mean_lateral for t in group]),
            max((t.max_lateral for t in group if math.isfinite(t.max_lateral)), default=math.nan),
            _mean([t.mean_abs_path for t in group]),
        )


def summary_csv(grouped) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for value, ok, total, mean_lat, max_lat, mean_path in summary_rows(grouped):
        w.writerow([value, ok, total, format_float(mean_lat), format_float(max_lat), format_float(mean_path)])
    return buf.getvalue()


def summary_dat(axis: str, grouped) -> str:
    """Whitespace-separated table for gnuplot: index, value, success rate, errors."""
    lines = [f"# axis={axis}", "# idx value success_rate mean_lat_err max_lat_err mean_abs_path_err"]
    for i, (value, ok, total, mean_lat, max_lat, mean_path) in enumerate(summary_rows(grouped)):
        lines.append(f"{i} {value} {ok / total:.3f} {format_float(mean_lat)} {format_float(max_lat)} {format_float(mean_path)}")
    return "\n".join(lines) + "\n"
