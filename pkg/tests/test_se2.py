from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tandem.se2 import (
    DegenerateSegment,
    Pose2,
    compose,
    interpolation_factor,
    inverse,
    relative,
    rotate_about_point,
    wrap_angle,
)

coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-20, 20, allow_nan=False)
poses = st.builds(Pose2, coord, coord, angle)


def close(a: Pose2, b: Pose2, tol=1e-9):
    return (
        abs(a.x - b.x) < tol and abs(a.y - b.y) < tol and abs(wrap_angle(a.theta - b.theta)) < tol
    )


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range_and_equivalence(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-8)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-8)


def test_wrap_angle_boundaries():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.0) == 0.0


@given(poses, poses)
def test_compose_matches_matrix_product(a, b):
    want = Pose2.from_matrix(a.matrix() @ b.matrix())
    assert close(compose(a, b), want, 1e-8)


@given(poses, poses, poses)
def test_compose_is_associative(a, b, c):
    assert close((a @ b) @ c, a @ (b @ c), 1e-7)


@given(poses)
def test_inverse_cancels(p):
    assert close(p @ inverse(p), Pose2(), 1e-9)
    assert close(inverse(p) @ p, Pose2(), 1e-9)


@given(poses, poses)
def test_relative_recovers_b(a, b):
    assert close(a @ relative(a, b), b, 1e-7)


@given(poses, poses, angle)
def test_rotation_about_pivot_keeps_distance(target, pivot, a):
    out = rotate_about_point(target, pivot, a)
    assert math.isclose(out.distance_to(pivot), target.distance_to(pivot), abs_tol=1e-9)
    assert math.isclose(wrap_angle(out.theta - target.theta), wrap_angle(a), abs_tol=1e-9)


def test_rotation_about_pivot_direction():
    out = rotate_about_point(Pose2(1.0, 0.0, 0.0), Pose2(), math.pi / 2)
    assert close(out, Pose2(0.0, 1.0, math.pi / 2))


def test_interpolation_factor_endpoints_and_midpoint():
    prev, cur = Pose2(1.0, 1.0, 0.3), Pose2(1.0 + 2 * math.cos(0.3), 1.0 + 2 * math.sin(0.3), 0.3)
    assert interpolation_factor(prev, cur, prev) == pytest.approx(0.0, abs=1e-12)
    assert interpolation_factor(prev, cur, cur) == pytest.approx(1.0)
    mid = Pose2((prev.x + cur.x) / 2, (prev.y + cur.y) / 2, 2.0)
    assert interpolation_factor(prev, cur, mid) == pytest.approx(0.5)


@given(poses, st.floats(0.05, 5), st.floats(-3, 3), st.floats(-2, 2))
def test_interpolation_factor_is_projection(prev, length, along, across):
    cur = prev @ Pose2(length, 0.0, 0.0)
    robot = prev @ Pose2(along * length, across, 1.0)
    assert interpolation_factor(prev, cur, robot) == pytest.approx(along, abs=1e-7)


def test_interpolation_factor_degenerate():
    with pytest.raises(DegenerateSegment):
        interpolation_factor(Pose2(1, 1, 0), Pose2(1, 1, 1.0), Pose2())


def test_pose_is_immutable_and_wrapped():
    p = Pose2(1, 2, 4 * math.pi + 0.1)
    assert p.theta == pytest.approx(0.1)
    with pytest.raises(AttributeError):
        p.x = 3.0
    assert np.allclose(p.matrix()[:2, 2], [1, 2])
