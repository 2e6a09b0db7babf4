"""Planar rigid-body transforms (SE(2)) used for all pose bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Goals closer than this cannot define an interpolation segment.
SEGMENT_EPS = 1e-6


class DegenerateSegment(ValueError):
    """Raised when two goal poses are too close to define a direction."""


def wrap_angle(a: float) -> float:
    """Map an angle to the half-open interval (-pi, pi]."""
    w = math.pi - math.fmod(math.pi - a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    elif w > math.pi:
        w -= TWO_PI
    return w


@dataclass(frozen=True, slots=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose2:
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def __matmul__(self, other: Pose2) -> Pose2:
        return compose(self, other)

    def inverse(self) -> Pose2:
        return inverse(self)

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def distance_to(self, other: Pose2) -> float:
        return math.hypot(other.x - self.x, other.y - self.y)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


IDENTITY = Pose2()


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Pose of ``b`` expressed in the frame that ``a`` is expressed in."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.theta + b.theta)


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(-c * p.x - s * p.y, s * p.x - c * p.y, -p.theta)


def relative(a: Pose2, b: Pose2) -> Pose2:
    """``inverse(a) @ b``: pose of ``b`` seen from ``a``."""
    return compose(inverse(a), b)


def rotation(angle: float) -> Pose2:
    return Pose2(0.0, 0.0, angle)


def rotate_about_point(target: Pose2, pivot: Pose2, angle: float) -> Pose2:
    """Rotate ``target`` by ``angle`` about ``pivot`` (composition pivot . R . pivot^-1 . target)."""
    return compose(pivot, compose(rotation(angle), compose(inverse(pivot), target)))


def interpolation_factor(prev_goal: Pose2, cur_goal: Pose2, robot: Pose2) -> float:
    """Fraction of the prev->cur goal segment covered by ``robot``.

    Scalar projection of the robot position onto the segment, measured in the
    previous goal's frame and normalised by the squared segment length. It is 0
    at the previous goal, 1 at the current one and unbounded outside.

    Raises DegenerateSegment when the goals are closer than ``SEGMENT_EPS``.
    """
    seg = relative(prev_goal, cur_goal)
    rob = relative(prev_goal, robot)
    norm2 = seg.x * seg.x + seg.y * seg.y
    if norm2 < SEGMENT_EPS * SEGMENT_EPS:
        raise DegenerateSegment(f"goal segment length {math.sqrt(norm2):.3g} m below {SEGMENT_EPS} m")
    return (seg.x * rob.x + seg.y * rob.y) / norm2
