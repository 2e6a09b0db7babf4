from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from tandem.controller import CorrectionGains
from tandem.route import save_route
from tandem.se2 import Pose2
from tandem.studies import NOMINAL_DRIFT
from tandem.sim import JACKAL_CAMERA, MIRO_CAMERA, OdometryModel, build_world, default_waypoints
from tandem.trials import (
    SUMMARY_COLUMNS,
    SWEEP_START_JITTER,
    TICK_COLUMNS,
    Polyline,
    SweepConfig,
    TrialConfig,
    apply_axis,
    believed_progress,
    cmd_repeat,
    cmd_sweep,
    cmd_transfer,
    derive_seed,
    parse_resolution,
    robot_params,
    run_trial,
    start_pose,
    summary_csv,
    teach_run,
)


def test_polyline_signed_lateral():
    line = Polyline([(0, 0), (10, 0), (10, 10)])
    assert line.project(5, 1) == pytest.approx((1.0, 5.0))
    assert line.project(5, -0.5) == pytest.approx((-0.5, 5.0))
    assert line.project(11, 5) == pytest.approx((-1.0, 15.0))


def test_believed_progress_interpolates(loop_route):
    arcs = loop_route.arc_lengths
    assert believed_progress(loop_route, 5, 0.0) == pytest.approx(arcs[4])
    assert believed_progress(loop_route, 5, 0.5) == pytest.approx((arcs[4] + arcs[5]) / 2)
    assert believed_progress(loop_route, 5, math.nan) == pytest.approx(arcs[5])


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "k_p", 1, 2) == derive_seed(0, "k_p", 1, 2)
    seeds = {derive_seed(m, a, i, r) for m in (0, 1) for a in ("k_p", "k_theta") for i in range(3) for r in range(3)}
    assert len(seeds) == 36
    assert all(0 <= s < 2**62 for s in seeds)


def test_parse_resolution():
    assert parse_resolution("23x8") == (23, 8)
    assert parse_resolution("115X44") == (115, 44)
    assert parse_resolution((11, 4)) == (11, 4)


def test_apply_axis(loop_route):
    cfg = TrialConfig()
    assert apply_axis(loop_route, cfg, "odometry_scale", 0.8)[1].odometry.linear_scale == 0.8
    assert apply_axis(loop_route, cfg, "k_theta", "1e-3")[1].gains.k_theta == 1e-3
    assert apply_axis(loop_route, cfg, "k_p", 0)[1].gains.k_p == 0
    assert apply_axis(loop_route, cfg, "correction_rate", 5)[1].gains.correction_period == pytest.approx(0.2)
    assert apply_axis(loop_route, cfg, "correction_rate", 0)[1].gains.correction_period == math.inf
    low, _ = apply_axis(loop_route, cfg, "resolution", "23x8")
    assert low.images.shape[1:] == (8, 23)
    assert low.params.search_px == 15
    with pytest.raises(ValueError):
        apply_axis(loop_route, cfg, "speed", 1)


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig("speed", [1])
    with pytest.raises(ValueError):
        SweepConfig("k_p", [])
    with pytest.raises(ValueError):
        SweepConfig("k_p", [0], repetitions=0)
    assert SweepConfig("k_p", [0]).base.start_jitter == SWEEP_START_JITTER


def test_start_pose_jitter_is_seeded(loop_route):
    cfg = TrialConfig(start_offset=(0.1, 0.2, 0.0), start_jitter=SWEEP_START_JITTER, seed=4)
    assert start_pose(loop_route, cfg) == start_pose(loop_route, cfg)
    assert start_pose(loop_route, cfg) != start_pose(loop_route, replace(cfg, seed=5))
    plain = start_pose(loop_route, replace(cfg, start_jitter=(0, 0, 0)))
    k0 = loop_route.pose(0)
    assert plain.x - k0.x == pytest.approx(0.1) and plain.y - k0.y == pytest.approx(0.2)


def test_robot_params():
    assert robot_params("jackal").tau_d == 0.3
    assert robot_params("miro").tau_d == 0.2
    assert robot_params("miro").fov == MIRO_CAMERA.fov


# -- closed-loop trials (a few seconds each) ------------------------------------------------


def test_clean_repeat_succeeds_and_writes_csv(loop_route, loop_world, tmp_path):
    save_route(loop_route, tmp_path / "route")
    rec = cmd_repeat(tmp_path / "route", loop_world, TrialConfig(), tmp_path / "t.csv")
    assert rec.success
    assert rec.reached == len(loop_route) - 1
    assert rec.mean_lateral < loop_route.params.tau_d
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == TICK_COLUMNS
    assert len(rows) - 1 == len(rec.rows)
    assert float(rows[-1][0]) == pytest.approx(rec.rows[-1, 0])


def test_trial_is_deterministic(loop_route, loop_world):
    cfg = TrialConfig(start_jitter=SWEEP_START_JITTER, seed=11, odometry=OdometryModel(linear_noise_std=0.01, angular_noise_std=0.01))
    a, b = run_trial(loop_route, loop_world, cfg), run_trial(loop_route, loop_world, cfg)
    assert np.array_equal(a.rows, b.rows, equal_nan=True)


def test_severe_odometry_undershoot_crashes(loop_route, loop_world):
    rec = run_trial(loop_route, loop_world, TrialConfig(odometry=OdometryModel(linear_scale=0.7)))
    assert rec.outcome == "crash"
    assert rec.max_lateral > 1.0


def test_no_along_path_gain_fails_with_moderate_corruption(loop_route, loop_world):
    cfg = TrialConfig(gains=CorrectionGains(k_p=0.0), odometry=OdometryModel(linear_scale=1.1))
    assert not run_trial(loop_route, loop_world, cfg).success


def test_arrival_tolerance_sets_missed_end(loop_route, loop_world):
    """Overshooting odometry stops short of the end; a tight tolerance flags it."""
    cfg = TrialConfig(gains=CorrectionGains(k_p=0.0), odometry=OdometryModel(linear_scale=1.05))
    loose = run_trial(loop_route, loop_world, replace(cfg, arrival_tolerance=10.0))
    tight = run_trial(loop_route, loop_world, replace(cfg, arrival_tolerance=0.01))
    assert loose.outcome == "success"
    assert tight.outcome == "missed_end"


def test_stall_detected(loop_route, loop_world):
    cfg = TrialConfig(limits=replace(TrialConfig().limits, v_max=0.0), stall_timeout=2.0)
    rec = run_trial(loop_route, loop_world, cfg)
    assert rec.outcome == "stalled"
    assert rec.rows[-1, 0] == pytest.approx(2.0, abs=0.05)


def test_sweep_outputs_and_recorded_failures(loop_route, tmp_path):
    cfg = SweepConfig("odometry_scale", [1.0, 0.5], repetitions=2)
    grouped = cmd_sweep(cfg, tmp_path, loop_route)
    assert [[t.outcome for t in g] for g in grouped] == [["success", "success"], ["crash", "crash"]]
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == SUMMARY_COLUMNS
    assert lines[1].startswith("1.0,2,2,") and lines[2].startswith("0.5,0,2,")
    assert (tmp_path / "summary.csv").read_text() == summary_csv(grouped)
    assert sorted(p.name for p in (tmp_path / "trials").iterdir()) == [
        "odometry_scale_00_00.csv", "odometry_scale_00_01.csv", "odometry_scale_01_00.csv", "odometry_scale_01_01.csv",
    ]
    dat = (tmp_path / "odometry_scale.dat").read_text().splitlines()
    assert dat[2].startswith("0 1.0 1.000") and dat[3].startswith("1 0.5 0.000")


def test_sweep_records_not_on_route(loop_route):
    other = build_world("open-sparse", 0)
    cfg = SweepConfig("k_p", [0.01], repetitions=1, world="open-sparse")
    assert other.name == "open-sparse"
    (summary,), = cmd_sweep(cfg, None, loop_route)
    assert summary.outcome in ("not_on_route", "crash", "stalled", "missed_end")


def test_identity_transfer_is_pixel_identical(loop_route, tmp_path):
    save_route(loop_route, tmp_path / "a")
    out = cmd_transfer(tmp_path / "a", JACKAL_CAMERA, JACKAL_CAMERA, tmp_path / "b")
    assert out.same_as(loop_route)


def test_sparse_world_tracks_worse_than_corridor():
    cfgs = TrialConfig(odometry=OdometryModel(heading_drift=0.02, linear_scale=1.05), seed=2)
    errors = {}
    for name in ("corridor-loop", "open-sparse"):
        w = build_world(name, 0)
        route = teach_run(w, default_waypoints(w), robot_params("jackal"))
        errors[name] = run_trial(route, w, replace(cfgs, crash_threshold=math.inf)).mean_lateral
    assert errors["open-sparse"] > errors["corridor-loop"]


def test_teach_starts_at_first_waypoint(loop_world):
    route = teach_run(loop_world, [(-3.0, -4.0), (0.0, -4.0)], robot_params("jackal"))
    assert route.pose(0) == Pose2(-3.0, -4.0, 0.0)
    assert route.pose(len(route) - 1).distance_to(Pose2(0.0, -4.0)) < 0.02


def test_straight_leg_keyframe_count(loop_world):
    route = teach_run(loop_world, [(-3.0, -4.0), (0.0, -4.0)], robot_params("jackal"))
    assert len(route) == 11


def test_empty_waypoints_rejected(loop_world):
    with pytest.raises(ValueError):
        teach_run(loop_world, [], robot_params("jackal"))


def test_slower_corrections_degrade_gracefully(loop_route, loop_world):
    """5 Hz against 50 Hz corrections under the nominal heading bias: both finish, similar mean error."""
    odo = OdometryModel(heading_drift=NOMINAL_DRIFT["jackal"])
    fast = run_trial(loop_route, loop_world, TrialConfig(gains=CorrectionGains(correction_period=0.02), odometry=odo))
    slow = run_trial(loop_route, loop_world, TrialConfig(gains=CorrectionGains(correction_period=0.2), odometry=odo))
    assert fast.success and slow.success
    assert max(fast.mean_lateral, slow.mean_lateral) <= 2 * min(fast.mean_lateral, slow.mean_lateral)
