"""Deterministic planar world with a strip raycast camera and corruptible odometry.

Walls are line segments with a procedural texture indexed by arc-length along
their ring and by height. One ray is cast per image column, with columns spaced
equiangularly across the horizontal field of view (column 0 is the leftmost).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import shapely
from shapely.geometry import LinearRing, LineString, Polygon

from tandem.controller import VelocityCommand
from tandem.imaging import RawImage
from tandem.se2 import Pose2, compose


class UnknownWorld(KeyError):
    pass


@dataclass(frozen=True)
class CameraConfig:
    fov: float = math.radians(75.0)
    image_width: int = 115
    image_height: int = 44
    mount_height: float = 0.4
    max_range: float = 60.0

    def __post_init__(self):
        if not 0 < self.fov < 2 * math.pi:
            raise ValueError("fov must lie in (0, 2*pi)")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("camera dimensions must be >= 1")

    @property
    def focal(self) -> float:
        """Pixels per radian, shared by both image axes."""
        return self.image_width / self.fov


JACKAL_CAMERA = CameraConfig()
# Wide, low strip; its 75 deg centre crop resamples to the Jackal's angular scale.
MIRO_CAMERA = CameraConfig(fov=math.radians(175.2), image_width=320, image_height=52, mount_height=0.35)

CAMERAS = {"jackal": JACKAL_CAMERA, "miro": MIRO_CAMERA}


@dataclass(frozen=True)
class LightingPerturbation:
    gain: float = 1.0
    bias: float = 0.0
    shadow_gain: float = 1.0
    shadow_side: str = "left"

    @property
    def is_identity(self) -> bool:
        return self.gain == 1.0 and self.bias == 0.0 and self.shadow_gain == 1.0


NO_LIGHTING = LightingPerturbation()


@dataclass(frozen=True, eq=False)
class World:
    """Wall segments (M, 4) as x0, y0, x1, y1 with per-segment texture data."""

    name: str
    segments: np.ndarray
    ring_ids: np.ndarray
    arc_start: np.ndarray
    ring_seeds: np.ndarray
    centerline: np.ndarray
    corridor_width: float
    closed: bool
    wall_height: float = 2.2
    floor_intensity: float = 70.0
    sky_intensity: float = 205.0

    def __post_init__(self):
        if len(self.segments) < 1:
            raise ValueError("a world needs at least one wall")

    @cached_property
    def texture_tables(self) -> list[np.ndarray]:
        """Per-ring wall texture sampled on a TEXTURE_STEP grid (rows: height, cols: arc-length)."""
        tables = []
        z = (np.arange(int(math.ceil(self.wall_height / TEXTURE_STEP)) + 1) * TEXTURE_STEP)[:, None]
        for r, seed in enumerate(self.ring_seeds):
            segs = self.segments[self.ring_ids == r]
            end = float(self.arc_start[self.ring_ids == r][-1] + np.hypot(*(segs[-1, 2:] - segs[-1, :2])))
            s = (np.arange(int(math.ceil(end / TEXTURE_STEP)) + 2) * TEXTURE_STEP)[None, :]
            tables.append(wall_texture(np.full(s.shape, seed, dtype=np.int64), s, z))
        return tables

    def sample_texture(self, ring: np.ndarray, arc: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Nearest-cell lookup; ``ring`` and ``arc`` broadcast against ``z``."""
        out = np.empty(np.broadcast(ring, arc, z).shape)
        ring = np.broadcast_to(ring, out.shape)
        ci = np.rint(np.broadcast_to(arc, out.shape) / TEXTURE_STEP).astype(np.int64)
        zi = np.rint(np.clip(z, 0.0, self.wall_height) / TEXTURE_STEP).astype(np.int64)
        for r, table in enumerate(self.texture_tables):
            m = ring == r
            if m.any():
                out[m] = table[zi[m], np.clip(ci[m], 0, table.shape[1] - 1)]
        return out

    def walls_equal(self, other: World) -> bool:
        return np.array_equal(self.segments, other.segments) and np.array_equal(self.ring_seeds, other.ring_seeds)


@dataclass(frozen=True)
class OdometryModel:
    linear_scale: float = 1.0
    linear_noise_std: float = 0.0
    angular_noise_std: float = 0.0
    heading_drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.linear_scale > 0:
            raise ValueError("linear_scale must be positive")


# -- textures ---------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash01(seed: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Stateless integer hash to [0, 1)."""
    with np.errstate(over="ignore"):
        h = seed.astype(np.uint64) * _M1
        h = h ^ (i.astype(np.int64).astype(np.uint64) * _M2)
        h = h ^ (j.astype(np.int64).astype(np.uint64) * _M3)
        h ^= h >> np.uint64(31)
        h *= _M2
        h ^= h >> np.uint64(29)
        h *= _M3
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(seed, s, z, cell_s, cell_z) -> np.ndarray:
    fs, fz = s / cell_s, z / cell_z
    i0, j0 = np.floor(fs), np.floor(fz)
    ts, tz = fs - i0, fz - j0
    ts = ts * ts * (3 - 2 * ts)
    tz = tz * tz * (3 - 2 * tz)
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    v00 = _hash01(seed, i0, j0)
    v10 = _hash01(seed, i0 + 1, j0)
    v01 = _hash01(seed, i0, j0 + 1)
    v11 = _hash01(seed, i0 + 1, j0 + 1)
    a = v00 + (v10 - v00) * ts
    b = v01 + (v11 - v01) * ts
    return a + (b - a) * tz


# (cell along wall m, cell in height m, amplitude); coarse terms survive heavy downscaling,
# fine ones keep unrelated views from correlating at small overlaps
TEXTURE_OCTAVES = ((1.6, 3.0, 0.2), (0.4, 0.5, 0.2), (0.15, 0.2, 0.25), (0.06, 0.08, 0.35))
# (width m, amplitude) of door- and poster-like strips, constant over height, so
# cameras mounted at different heights see the same vertical edges
PANELS = ((1.3, 0.45),)
TEXTURE_STEP = 0.01


def wall_texture(seed: np.ndarray, s: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Intensity in [25, 230] at arc-length ``s`` and height ``z`` on a wall ring."""
    seed = seed.astype(np.uint64)
    acc = np.zeros(np.broadcast(s, z).shape)
    for k, (cs, cz, amp) in enumerate(TEXTURE_OCTAVES):
        acc += amp * _value_noise(seed + np.uint64(7919 * (k + 1)), s, z, cs, cz)
    for k, (width, amp) in enumerate(PANELS):
        acc += amp * _hash01(seed + np.uint64(104729 * (k + 1)), np.floor(s / width), np.zeros_like(s, dtype=np.int64))
    total = sum(o[2] for o in TEXTURE_OCTAVES) + sum(p[1] for p in PANELS)
    return 25.0 + 205.0 * acc / total


# -- world construction -----------------------------------------------------


def _ring_segments(ring_coords: np.ndarray, max_len: float):
    segs, arcs = [], []
    s = 0.0
    for a, b in zip(ring_coords[:-1], ring_coords[1:]):
        length = float(np.hypot(*(b - a)))
        if length < 1e-9:
            continue
        pieces = max(1, math.ceil(length / max_len))
        for p in range(pieces):
            t0, t1 = p / pieces, (p + 1) / pieces
            segs.append([*(a + (b - a) * t0), *(a + (b - a) * t1)])
            arcs.append(s + length * t0)
        s += length
    return segs, arcs


def _corridor_world(name: str, centerline, width: float, closed: bool, seed: int, extra_rings=()) -> World:
    line = LinearRing(centerline) if closed else LineString(centerline)
    poly = line.buffer(width / 2.0, cap_style="flat", join_style="mitre", mitre_limit=10.0)
    if not isinstance(poly, Polygon):
        raise ValueError(f"{name}: corridor polygon is not simple")
    rings = [np.asarray(poly.exterior.coords)] + [np.asarray(r.coords) for r in poly.interiors]
    rings += [np.asarray(r) for r in extra_rings]
    return _assemble(name, rings, np.asarray(centerline, dtype=float), width, closed, seed)


def _assemble(name, rings, centerline, width, closed, seed) -> World:
    rng = np.random.default_rng(seed)
    segs, ids, arcs = [], [], []
    for r, coords in enumerate(rings):
        # canonical start and orientation keep textures independent of shapely's ring ordering
        coords = _canonical_ring(np.round(coords, 9))
        s, a = _ring_segments(coords, max_len=2.0)
        segs += s
        arcs += a
        ids += [r] * len(s)
    seeds = rng.integers(1, 2**62, size=len(rings), dtype=np.int64)
    return World(
        name=name,
        segments=np.array(segs, dtype=np.float64),
        ring_ids=np.array(ids, dtype=np.int64),
        arc_start=np.array(arcs, dtype=np.float64),
        ring_seeds=seeds,
        centerline=centerline,
        corridor_width=width,
        closed=closed,
    )


def _canonical_ring(coords: np.ndarray) -> np.ndarray:
    pts = coords[:-1] if np.allclose(coords[0], coords[-1]) else coords
    if shapely.is_ccw(LinearRing(pts)):
        pts = pts[::-1]
    start = int(np.lexsort((pts[:, 1], pts[:, 0]))[0])
    pts = np.roll(pts, -start, axis=0)
    return np.vstack([pts, pts[:1]])


def _square(cx, cy, half):
    return [(cx - half, cy - half), (cx + half, cy - half), (cx + half, cy + half), (cx - half, cy + half), (cx - half, cy - half)]


def build_world(name: str, seed: int = 0) -> World:
    if name == "corridor-loop":
        # 12 m x 8 m centreline loop, 40 m around
        centre = [(-6.0, -4.0), (6.0, -4.0), (6.0, 4.0), (-6.0, 4.0)]
        return _corridor_world(name, centre, 2.0, True, seed)
    if name == "L-corridor":
        centre = [(0.0, 0.0), (12.0, 0.0), (12.0, 8.0)]
        return _corridor_world(name, centre, 2.0, False, seed)
    if name == "long-campus":
        return _corridor_world(name, _campus_centerline(), 3.0, False, seed)
    if name == "open-sparse":
        centre = np.array([(0.0, 0.0), (16.0, 0.0)])
        rings = [_square(8.0, 0.0, 30.0), _square(4.0, 12.0, 0.6), _square(14.0, -13.0, 0.6), _square(26.0, 9.0, 0.6)]
        return _assemble(name, [np.array(r) for r in rings], centre, 2.0, False, seed)
    raise UnknownWorld(f"unknown world {name!r}; choose from {sorted(WORLD_NAMES)}")


WORLD_NAMES = ("corridor-loop", "L-corridor", "open-sparse", "long-campus")


def _campus_centerline() -> list[tuple[float, float]]:
    # winding 220 m course of straight legs and 30-60 deg bends
    headings_deg = [0, 30, 75, 75, 30, -30, -60, -20, 25, 70, 110, 70, 20, -30, -75, -40, 0]
    lengths = [16, 12, 14, 10, 14, 12, 14, 12, 14, 12, 14, 14, 12, 14, 12, 10, 14]
    pts = [(0.0, 0.0)]
    for h, l in zip(headings_deg, lengths):
        x, y = pts[-1]
        a = math.radians(h)
        pts.append((x + l * math.cos(a), y + l * math.sin(a)))
    return pts


def default_waypoints(world: World) -> list[tuple[float, float]]:
    """Teach path along the corridor centreline (loops stop short of their start)."""
    c = [tuple(p) for p in world.centerline]
    if world.name == "corridor-loop":
        return [(-3.0, -4.0), c[1], c[2], c[3], c[0], (-4.5, -4.0)]
    if world.name == "open-sparse":
        return [tuple(p) for p in c]
    # open corridors: stay clear of the end caps
    first = np.array(c[0]) + 0.5 * _unit(np.array(c[1]) - np.array(c[0]))
    last = np.array(c[-1]) - 0.8 * _unit(np.array(c[-1]) - np.array(c[-2]))
    return [tuple(first)] + c[1:-1] + [tuple(last)]


def _unit(v):
    return v / np.linalg.norm(v)


# -- rendering --------------------------------------------------------------


def raycast(world: World, x: float, y: float, bearings: np.ndarray, max_range: float):
    """Nearest wall hit per bearing: (distance, wall arc-length, ring id, hit mask)."""
    seg = world.segments
    ax, ay = seg[:, 0], seg[:, 1]
    ex, ey = seg[:, 2] - ax, seg[:, 3] - ay
    dx, dy = np.cos(bearings)[:, None], np.sin(bearings)[:, None]
    denom = dx * ey - dy * ex
    wx, wy = ax - x, ay - y
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (wx * ey - wy * ex) / denom
        s = (wx * dy - wy * dx) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (s >= 0.0) & (s <= 1.0) & (t < max_range)
    t = np.where(valid, t, np.inf)
    idx = np.argmin(t, axis=1)
    rows = np.arange(len(bearings))
    dist = t[rows, idx]
    hit = np.isfinite(dist)
    seg_len = np.hypot(ex, ey)
    arc = world.arc_start[idx] + s[rows, idx] * seg_len[idx]
    return dist, arc, world.ring_ids[idx], hit


def column_bearings(camera: CameraConfig, heading: float) -> np.ndarray:
    c = np.arange(camera.image_width)
    return heading + camera.fov * (0.5 - (c + 0.5) / camera.image_width)


def row_elevations(camera: CameraConfig) -> np.ndarray:
    r = np.arange(camera.image_height)
    return (camera.image_height / 2.0 - (r + 0.5)) / camera.focal


def render_view(world: World, camera: CameraConfig, pose: Pose2, lighting: LightingPerturbation = NO_LIGHTING) -> RawImage:
    bearings = column_bearings(camera, pose.theta)
    dist, arc, rings, hit = raycast(world, pose.x, pose.y, bearings, camera.max_range)
    elev = row_elevations(camera)[:, None]
    d = np.where(hit, dist, camera.max_range)[None, :]
    top = np.arctan2(world.wall_height - camera.mount_height, d)
    bottom = np.arctan2(-camera.mount_height, d)
    on_wall = hit[None, :] & (elev <= top) & (elev >= bottom)
    z = camera.mount_height + d * np.tan(elev)
    sky = np.full(z.shape, world.sky_intensity) - 12.0 * elev
    floor = np.full(z.shape, world.floor_intensity)
    img = np.where(elev >= 0.0, sky, floor)
    cols = np.nonzero(hit)[0]
    if cols.size:
        tex = world.sample_texture(rings[cols][None, :], arc[cols][None, :], z[:, cols])
        img[:, cols] = np.where(on_wall[:, cols], tex, img[:, cols])
    if not lighting.is_identity:
        img = lighting.gain * img + lighting.bias
        if lighting.shadow_gain != 1.0:
            half = camera.image_width // 2
            part = slice(0, half) if lighting.shadow_side == "left" else slice(half, None)
            img[:, part] *= lighting.shadow_gain
    return RawImage(np.clip(np.rint(img), 0, 255).astype(np.uint8))


# -- kinematics -------------------------------------------------------------


def arc_increment(length: float, turn: float) -> Pose2:
    """Body-frame displacement of a constant-curvature arc."""
    if abs(turn) < 1e-12:
        return Pose2(length, 0.0, turn)
    r = length / turn
    return Pose2(r * math.sin(turn), r * (1.0 - math.cos(turn)), turn)


@dataclass
class SimState:
    true_pose: Pose2
    odom_pose: Pose2 = field(default_factory=Pose2)
    time: float = 0.0


class Simulator:
    """Single-owner sim instance; noise draws come from its own seeded generator."""

    def __init__(self, world: World, camera: CameraConfig, odometry: OdometryModel, true_pose: Pose2, odom_pose: Pose2 = Pose2(), lighting: LightingPerturbation = NO_LIGHTING):
        self.world = world
        self.camera = camera
        self.odometry = odometry
        self.lighting = lighting
        self.state = SimState(true_pose, odom_pose)
        self._rng = np.random.default_rng(odometry.seed)

    def render(self) -> RawImage:
        return render_view(self.world, self.camera, self.state.true_pose, self.lighting)

    def step(self, cmd: VelocityCommand, dt: float) -> None:
        step_unicycle(self.state, cmd, dt, self.odometry, self._rng)


def step_unicycle(state: SimState, cmd: VelocityCommand, dt: float, odometry: OdometryModel = OdometryModel(), rng: np.random.Generator | None = None) -> None:
    if not dt > 0:
        raise ValueError("dt must be positive")
    length, turn = cmd.v * dt, cmd.omega * dt
    state.true_pose = _advance_same(state.true_pose, cmd, dt)

    o_len = odometry.linear_scale * length
    o_turn = turn + odometry.heading_drift * abs(length)
    if rng is not None and odometry.linear_noise_std > 0:
        o_len += rng.normal(0.0, odometry.linear_noise_std * math.sqrt(abs(length)))
    if rng is not None and odometry.angular_noise_std > 0:
        o_turn += rng.normal(0.0, odometry.angular_noise_std * math.sqrt(abs(turn)))
    if o_len == length and o_turn == turn:
        # exact path so clean odometry reproduces truth to rounding
        state.odom_pose = _advance_same(state.odom_pose, cmd, dt)
    else:
        state.odom_pose = compose(state.odom_pose, arc_increment(o_len, o_turn))
    state.time += dt


def _advance_same(p: Pose2, cmd: VelocityCommand, dt: float) -> Pose2:
    if abs(cmd.omega) < 1e-12:
        d = cmd.v * dt
        return Pose2(p.x + d * math.cos(p.theta), p.y + d * math.sin(p.theta), p.theta)
    r = cmd.v / cmd.omega
    th1 = p.theta + cmd.omega * dt
    return Pose2(p.x + r * (math.sin(th1) - math.sin(p.theta)), p.y - r * (math.cos(th1) - math.cos(p.theta)), th1)
