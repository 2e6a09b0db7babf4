"""Repeat-phase control: odometry pose tracking plus periodic visual corrections.

The goal pose lives in the repeat odometry frame. Visual corrections only ever
edit that goal, either rotating it about the robot (orientation) or sliding it
along the robot-to-goal ray (along-path); because each new goal is chained
from the corrected current goal, corrections persist down the route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tandem.imaging import (
    CorrelationProfile,
    DimensionMismatch,
    ProcessedImage,
    RawImage,
    pixel_to_angle,
    preprocess,
)
from tandem.route import Route
from tandem.se2 import (
    DegenerateSegment,
    Pose2,
    compose,
    interpolation_factor,
    relative,
    rotate_about_point,
)

# Teach segments shorter than this are treated as turn-in-place keyframes.
PURE_ROTATION_EPS = 1e-3
PURE_ROTATION_SWITCH = math.radians(5.0)
ADVANCE_RADIUS_FRACTION = 0.25
MIN_GOAL_DISTANCE = 1e-3
RHO_SUM_EPS = 1e-9
# about twice the best peak of uniform-noise queries against a textured route
INIT_THRESHOLD = 0.2


class NotOnRoute(RuntimeError):
    def __init__(self, best_index: int, peak: float, threshold: float):
        super().__init__(
            f"best route match is keyframe {best_index} with peak {peak:.3f} < threshold {threshold:.3f}"
        )
        self.best_index = best_index
        self.peak = peak
        self.threshold = threshold


@dataclass(frozen=True)
class PoseGains:
    k_rho: float = 1.0
    k_alpha: float = 4.0
    k_beta: float = -1.5

    def __post_init__(self):
        if not (self.k_rho > 0 and self.k_beta < 0 and self.k_alpha - self.k_rho > 0):
            raise ValueError("pose gains must satisfy k_rho > 0, k_beta < 0, k_alpha > k_rho")


@dataclass(frozen=True)
class Limits:
    v_max: float = 0.5
    omega_max: float = 1.0


@dataclass(frozen=True)
class CorrectionGains:
    k_theta: float = 0.01
    k_p: float = 0.01
    k_window: int = 3
    rho_bar: float = 0.1
    correction_period: float = 0.08
    eq8_literal: bool = False

    def __post_init__(self):
        if self.k_theta < 0 or self.k_p < 0 or self.k_window < 0:
            raise ValueError("correction gains and window must be non-negative")
        if not 0 <= self.rho_bar < 1:
            raise ValueError("rho_bar must lie in [0, 1)")
        if not self.correction_period > 0:
            raise ValueError("correction_period must be positive (use inf to disable)")


@dataclass(frozen=True)
class VelocityCommand:
    v: float = 0.0
    omega: float = 0.0


STOP = VelocityCommand()


@dataclass(frozen=True)
class Offset:
    delta_px: int
    angle: float
    peak: float


@dataclass
class RepeatState:
    route: Route
    goal_index: int
    prev_goal_pose: Pose2
    cur_goal_pose: Pose2
    last_offsets: dict[int, Offset] = field(default_factory=dict)
    finished: bool = False
    last_correction_time: float = -math.inf

    @classmethod
    def start(cls, route: Route, anchor: int, odom_pose: Pose2) -> RepeatState:
        """Begin with the robot assumed to sit at keyframe ``anchor``."""
        N = len(route)
        n = min(anchor + 1, N - 1)
        base = route.pose(anchor)
        return cls(
            route=route,
            goal_index=n,
            prev_goal_pose=compose(odom_pose, relative(base, route.pose(n - 1))),
            cur_goal_pose=compose(odom_pose, relative(base, route.pose(n))),
        )


def _sat(value: float, limit: float) -> float:
    return max(-limit, min(limit, value))


def pose_control_step(robot: Pose2, goal: Pose2, gains: PoseGains = PoseGains(), limits: Limits = Limits()) -> VelocityCommand:
    """Polar-coordinate unicycle pose controller, forward motion only."""
    rel = relative(robot, goal)
    rho = math.hypot(rel.x, rel.y)
    if rho < MIN_GOAL_DISTANCE:
        # no bearing to speak of: just line up with the goal heading
        return VelocityCommand(0.0, _sat(gains.k_alpha * rel.theta, limits.omega_max))
    alpha = math.atan2(rel.y, rel.x)
    beta = Pose2(0, 0, rel.theta - alpha).theta
    v = gains.k_rho * rho
    omega = gains.k_alpha * alpha + gains.k_beta * beta
    return VelocityCommand(max(0.0, _sat(v, limits.v_max)), _sat(omega, limits.omega_max))


def search_window(n: int, N: int, K: int) -> tuple[int, range]:
    """Along-path window around goals n-1 and n, shrunk symmetrically near the ends."""
    if not 1 <= n <= N - 1:
        raise ValueError(f"goal index {n} outside [1, {N - 1}]")
    k_eff = max(0, min(K, n - 1, N - 1 - n))
    return k_eff, range(-(k_eff + 1), k_eff + 1)


def estimate_offsets(state: RepeatState, query: ProcessedImage, gains: CorrectionGains) -> dict[int, CorrelationProfile]:
    route = state.route
    p = route.params
    if query.shape != (p.image_height, p.image_width):
        raise DimensionMismatch(f"query {query.shape} vs route {(p.image_height, p.image_width)}")
    n = state.goal_index
    _, ks = search_window(n, len(route), gains.k_window)
    profiles = route.bank.profiles([n + k for k in ks], query, p.search_px)
    out = dict(zip(ks, profiles))
    for k in (-1, 0):
        prof = out[k]
        angle = pixel_to_angle(prof.best_offset, p.fov, p.image_width)
        state.last_offsets[n + k] = Offset(prof.best_offset, angle, prof.peak)
    return out


def apply_orientation_correction(state: RepeatState, robot: Pose2, gains: CorrectionGains) -> float | None:
    """Rotate the current goal about the robot against the interpolated heading offset.

    Returns the interpolated offset that was applied, or None when skipped.
    """
    n = state.goal_index
    prev, cur = state.last_offsets.get(n - 1), state.last_offsets.get(n)
    if prev is None or cur is None:
        return None
    if prev.peak < gains.rho_bar or cur.peak < gains.rho_bar:
        return None
    try:
        u = interpolation_factor(state.prev_goal_pose, state.cur_goal_pose, robot)
    except DegenerateSegment:
        return None
    d_theta = (1.0 - u) * prev.angle + u * cur.angle
    half_fov = 0.5 * state.route.params.fov
    d_theta = max(-half_fov, min(half_fov, d_theta))
    if gains.k_theta > 0:
        state.cur_goal_pose = rotate_about_point(state.cur_goal_pose, robot, -gains.k_theta * d_theta)
    return d_theta


def along_path_error(profiles: dict[int, CorrelationProfile], u: float, rho_bar: float, eq8_literal: bool = False) -> float | None:
    """Visual minus odometric position on the keyframe axis, in keyframe spacings.

    The axis puts the previous goal at k=-1 and the current goal at k=0, so
    odometry places the robot at u - 1. ``eq8_literal`` subtracts u instead.
    """
    ks = np.array(sorted(profiles))
    rho = np.array([max(0.0, profiles[k].peak - rho_bar) for k in ks])
    total = rho.sum()
    if total < RHO_SUM_EPS:
        return None
    visual = float((ks * rho).sum() / total)
    return visual - u if eq8_literal else visual - (u - 1.0)


def apply_along_path_correction(state: RepeatState, robot: Pose2, profiles: dict[int, CorrelationProfile], gains: CorrectionGains) -> float | None:
    """Slide the current goal along the robot->goal ray by ``-K_p * dp * tau_d``.

    Returns the along-path error used, or None when skipped.
    """
    try:
        u = interpolation_factor(state.prev_goal_pose, state.cur_goal_pose, robot)
    except DegenerateSegment:
        return None
    dp = along_path_error(profiles, u, gains.rho_bar, gains.eq8_literal)
    if dp is None:
        return None
    limit = max(profiles) + 1
    dp = max(-limit, min(limit, dp))
    goal = state.cur_goal_pose
    gx, gy = goal.x - robot.x, goal.y - robot.y
    dist = math.hypot(gx, gy)
    step = gains.k_p * dp * state.route.params.tau_d
    if dist < MIN_GOAL_DISTANCE or dist - step < MIN_GOAL_DISTANCE:
        return None
    if step != 0.0:
        s = (dist - step) / dist
        state.cur_goal_pose = Pose2(robot.x + s * gx, robot.y + s * gy, goal.theta)
    return dp


def _is_pure_rotation(route: Route, n: int) -> bool:
    return route.pose(n - 1).distance_to(route.pose(n)) < PURE_ROTATION_EPS


def goal_reached(state: RepeatState, robot: Pose2) -> bool:
    route = state.route
    n = state.goal_index
    goal = state.cur_goal_pose
    if _is_pure_rotation(route, n):
        return abs(relative(robot, goal).theta) < PURE_ROTATION_SWITCH
    if robot.distance_to(goal) < ADVANCE_RADIUS_FRACTION * route.params.tau_d:
        return True
    try:
        return interpolation_factor(state.prev_goal_pose, goal, robot) >= 1.0
    except DegenerateSegment:
        return False


def advance_goal(state: RepeatState, robot: Pose2) -> bool:
    if state.finished or not goal_reached(state, robot):
        return False
    route = state.route
    n = state.goal_index
    state.prev_goal_pose = state.cur_goal_pose
    if n + 1 > len(route) - 1:
        state.finished = True
        return True
    state.goal_index = n + 1
    state.cur_goal_pose = compose(state.cur_goal_pose, relative(route.pose(n), route.pose(n + 1)))
    return True


def initialization_peaks(route: Route, query: ProcessedImage) -> np.ndarray:
    profiles = route.bank.profiles(range(len(route)), query, route.params.search_px)
    return np.array([p.peak for p in profiles])


def global_initialize(route: Route, query: ProcessedImage, init_threshold: float = INIT_THRESHOLD) -> int:
    peaks = initialization_peaks(route, query)
    best = int(np.argmax(peaks))
    if peaks[best] < init_threshold:
        raise NotOnRoute(best, float(peaks[best]), init_threshold)
    return best


@dataclass
class TickInfo:
    """What happened during one control tick, for logging."""

    command: VelocityCommand
    goal_index: int
    u: float
    d_theta: float = math.nan
    d_p: float = math.nan
    corrected: bool = False
    advanced: bool = False


class Repeater:
    """Runs the control loop; corrections happen only when an image is due and supplied."""

    def __init__(
        self,
        state: RepeatState,
        gains: CorrectionGains = CorrectionGains(),
        pose_gains: PoseGains = PoseGains(),
        limits: Limits = Limits(),
    ):
        self.state = state
        self.gains = gains
        self.pose_gains = pose_gains
        self.limits = limits

    @property
    def finished(self) -> bool:
        return self.state.finished

    def correction_due(self, t: float) -> bool:
        period = self.gains.correction_period
        return math.isfinite(period) and t - self.state.last_correction_time >= period - 1e-9

    def correct(self, robot: Pose2, image: RawImage | ProcessedImage, info: TickInfo) -> None:
        p = self.state.route.params
        query = image if isinstance(image, ProcessedImage) else preprocess(image, p.image_width, p.image_height, p.patch_size)
        profiles = estimate_offsets(self.state, query, self.gains)
        d_theta = apply_orientation_correction(self.state, robot, self.gains)
        d_p = apply_along_path_correction(self.state, robot, profiles, self.gains)
        info.d_theta = math.nan if d_theta is None else d_theta
        info.d_p = math.nan if d_p is None else d_p
        info.corrected = True

    def tick(self, odom_pose: Pose2, image: RawImage | ProcessedImage | None, t: float) -> TickInfo:
        st = self.state
        info = TickInfo(STOP, st.goal_index, math.nan)
        if st.finished:
            return info
        if image is not None and self.correction_due(t):
            st.last_correction_time = t
            self.correct(odom_pose, image, info)
        info.advanced = advance_goal(st, odom_pose)
        info.goal_index = st.goal_index
        try:
            info.u = interpolation_factor(st.prev_goal_pose, st.cur_goal_pose, odom_pose)
        except DegenerateSegment:
            pass
        if not st.finished:
            info.command = pose_control_step(odom_pose, st.cur_goal_pose, self.pose_gains, self.limits)
        return info
