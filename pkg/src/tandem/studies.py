"""Named experiment setups for the indoor studies, shared by the CLI and the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from tandem.controller import CorrectionGains
from tandem.route import Route
from tandem.sim import CAMERAS, OdometryModel, build_world, default_waypoints
from tandem.trials import (
    SweepConfig,
    TrialConfig,
    TrialRecord,
    cmd_sweep,
    cmd_transfer,
    default_sweep_base,
    robot_params,
    run_trial,
    teach_run,
)

# Uncorrected heading bias of each robot's wheel odometry, rad per metre. Positive
# values over-report anticlockwise turning, so the robot itself veers right.
NOMINAL_DRIFT = {"jackal": 0.006, "miro": -0.011}

# perturbed start for the cross-robot repeat (forward m, left m, heading rad)
TRANSFER_START = (0.0, 0.1, math.radians(3.0))


def nominal_odometry(robot: str) -> OdometryModel:
    return OdometryModel(heading_drift=NOMINAL_DRIFT[robot])


@dataclass(frozen=True)
class Study:
    axis: str
    values: tuple
    repetitions: int
    robot: str = "jackal"
    base: TrialConfig = field(default_factory=default_sweep_base)
    world: str = "corridor-loop"
    world_seed: int = 0

    def sweep_config(self, master_seed: int = 0, jobs: int = 1) -> SweepConfig:
        base = replace(self.base, camera=CAMERAS[self.robot])
        return SweepConfig(
            axis=self.axis, values=list(self.values), repetitions=self.repetitions, world=self.world,
            world_seed=self.world_seed, master_seed=master_seed, base=base, jobs=jobs,
        )


def _base(**changes) -> TrialConfig:
    return replace(default_sweep_base(), **changes)


STUDIES = {
    # clean heading, corrupted distance
    "odometry": Study("odometry_scale", (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3), 5),
    # fixed lateral offset, so the lateral scatter is dropped from the start jitter
    "k_theta": Study(
        "k_theta", (0.0, 1e-4, 1e-3, 1e-2, 1e-1), 3,
        base=_base(
            odometry=nominal_odometry("jackal"),
            start_offset=(0.0, 0.3, 0.0),
            start_jitter=(0.05, 0.0, math.radians(2.0)),
        ),
    ),
    "k_p": Study("k_p", (0.0, 1e-4, 1e-3, 1e-2), 3),
    "k_p_zero": Study("odometry_scale", (0.9, 1.1), 3, base=_base(gains=CorrectionGains(k_p=0.0))),
    "resolution": Study(
        "resolution", ("115x44", "57x22", "29x11", "23x8", "15x6", "11x4"), 5,
        robot="miro", base=_base(odometry=nominal_odometry("miro")),
    ),
    "correction_rate": Study("correction_rate", (50.0, 5.0, 1.0), 3, base=_base(odometry=nominal_odometry("jackal"))),
}


def teach_route(robot: str = "jackal", world: str = "corridor-loop", world_seed: int = 0) -> Route:
    """The default teach run of ``world`` recorded by ``robot``."""
    w = build_world(world, world_seed)
    return teach_run(w, default_waypoints(w), robot_params(robot), CAMERAS[robot])


def run_study(name: str, master_seed: int = 0, out_dir=None, jobs: int = 1, route: Route | None = None):
    """Grouped trial summaries of the named study; ``route`` defaults to a fresh teach run."""
    study = STUDIES[name]
    if route is None:
        route = teach_route(study.robot, study.world, study.world_seed)
    return cmd_sweep(study.sweep_config(master_seed, jobs), out_dir, route)


def transfer_trial(seed: int = 0, source: Route | None = None, source_robot: str = "miro",
                   target_robot: str = "jackal", out_csv=None) -> TrialRecord:
    """Teach with one robot, crop the route to the other's view and repeat it from a perturbed start."""
    if source is None:
        source = teach_route(source_robot)
    route = cmd_transfer(source, CAMERAS[source_robot], CAMERAS[target_robot])
    cfg = _base(
        camera=CAMERAS[target_robot],
        odometry=nominal_odometry(target_robot),
        start_offset=TRANSFER_START,
        seed=seed,
    )
    world = build_world("corridor-loop", 0)
    rec = run_trial(route, world, cfg)
    if out_csv is not None:
        rec.write_csv(out_csv)
    return rec
