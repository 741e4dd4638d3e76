"""
Synthetic road user trajectories for testing the pipeline without real
recordings.

Each class follows a simple kinematic random walk: a target speed is drawn
from the class speed range and held for a while, the actual speed moves
towards it no faster than the class acceleration limits allow, the heading
drifts by a bounded turn rate and positions are integrated on the sphere.
The recorded fixes are the true positions displaced uniformly within a disk
of radius `noise_m`.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import tqdm

from roaduserclassification.dataset_builder import derive_seed
from roaduserclassification.errors import DatasetError
from roaduserclassification.geodesy import GeoPoint, destination_point
from roaduserclassification.trajectory_model import (
    RawSample,
    RoadUserClass,
    Trajectory,
    TrajectoryCollection,
)

logger = logging.getLogger(__name__)

# 2020-09-13T12:26:40Z, only used as an origin for generated timestamps
_EPOCH_MS = 1_600_000_000_000


@dataclass(frozen=True)
class SyntheticProfile:
    """Kinematic parameters of one road user class"""

    min_speed: float  # m/s
    max_speed: float  # m/s
    max_accel: float  # m/s^2
    max_decel: float  # m/s^2, positive
    max_turn_rate: float  # rad/s
    hold_s: Tuple[float, float]  # how long a target speed is kept
    stop_probability: float = 0.0  # per step chance of a stop as next target
    noise_m: float = 0.2

    def validate(self) -> None:
        problems = []
        if self.min_speed < 0 or self.max_speed < self.min_speed:
            problems.append(f"speed range [{self.min_speed}, {self.max_speed}]")
        if self.max_speed <= 0:
            problems.append(f"max speed {self.max_speed}")
        if self.max_accel <= 0 or self.max_decel <= 0:
            problems.append(f"acceleration limits {self.max_accel}/{self.max_decel}")
        if self.max_turn_rate < 0:
            problems.append(f"turn rate {self.max_turn_rate}")
        if self.hold_s[0] <= 0 or self.hold_s[1] < self.hold_s[0]:
            problems.append(f"hold range {self.hold_s}")
        if not 0 <= self.stop_probability < 1:
            problems.append(f"stop probability {self.stop_probability}")
        if self.noise_m < 0:
            problems.append(f"noise {self.noise_m}")
        if problems:
            raise DatasetError(f"infeasible synthetic profile: {', '.join(problems)}")

    def velocity_bound(self, sample_interval_s: float) -> float:
        """Largest speed derivable from two noisy fixes one interval apart"""
        return self.max_speed + 2 * self.noise_m / sample_interval_s


DEFAULT_PROFILES: Dict[RoadUserClass, SyntheticProfile] = {
    RoadUserClass.PEDESTRIAN: SyntheticProfile(
        min_speed=0.5,
        max_speed=2.0,
        max_accel=0.5,
        max_decel=0.8,
        max_turn_rate=0.4,
        hold_s=(5.0, 30.0),
        stop_probability=0.01,
    ),
    RoadUserClass.CYCLIST: SyntheticProfile(
        min_speed=2.5,
        max_speed=8.0,
        max_accel=1.0,
        max_decel=2.0,
        max_turn_rate=0.2,
        hold_s=(10.0, 40.0),
        stop_probability=0.005,
    ),
    RoadUserClass.MOTORCYCLIST: SyntheticProfile(
        min_speed=5.0,
        max_speed=35.0,
        max_accel=4.0,
        max_decel=5.0,
        max_turn_rate=0.5,
        hold_s=(3.0, 10.0),
    ),
    RoadUserClass.PASSENGER_CAR: SyntheticProfile(
        min_speed=5.0,
        max_speed=35.0,
        max_accel=2.5,
        max_decel=3.0,
        max_turn_rate=0.03,
        hold_s=(20.0, 60.0),
    ),
}


def _noisy(point: GeoPoint, noise_m: float, rng: np.random.Generator) -> GeoPoint:
    if noise_m == 0:
        return point
    # sqrt makes the displacement uniform over the disk area
    radius = noise_m * math.sqrt(rng.random())
    direction = rng.uniform(-math.pi, math.pi)
    return destination_point(point, direction, radius)


def _generate_trajectory(
    traj_id: str,
    label: RoadUserClass,
    profile: SyntheticProfile,
    n_samples: int,
    interval_ms: int,
    jitter_ms: int,
    rng: np.random.Generator,
) -> Trajectory:
    position = GeoPoint(lat=rng.uniform(-60.0, 60.0), lon=rng.uniform(-170.0, 170.0))
    heading = rng.uniform(-math.pi, math.pi)
    speed = rng.uniform(profile.min_speed, profile.max_speed)
    target = speed
    hold_left = rng.uniform(*profile.hold_s)

    start_ms = _EPOCH_MS + int(rng.integers(0, 86_400_000))
    samples: List[RawSample] = []
    previous_ms: Optional[int] = None
    for idx in range(n_samples):
        timestamp_ms = start_ms + idx * interval_ms
        if jitter_ms > 0 and idx > 0:
            timestamp_ms += int(rng.integers(-jitter_ms, jitter_ms + 1))
        dt = 0.0 if previous_ms is None else (timestamp_ms - previous_ms) / 1000

        if dt > 0:
            hold_left -= dt
            if hold_left <= 0:
                if rng.random() < profile.stop_probability:
                    target = 0.0
                else:
                    target = rng.uniform(profile.min_speed, profile.max_speed)
                hold_left = rng.uniform(*profile.hold_s)

            change = float(
                np.clip(target - speed, -profile.max_decel * dt, profile.max_accel * dt)
            )
            new_speed = speed + change
            heading += rng.uniform(-profile.max_turn_rate, profile.max_turn_rate) * dt
            distance = (speed + new_speed) / 2 * dt
            if distance > 0:
                position = destination_point(position, heading, distance)
            speed = new_speed

        fix = _noisy(position, profile.noise_m, rng)
        samples.append(
            RawSample(
                timestamp_ms=timestamp_ms,
                point=fix,
                accuracy_m=round(max(profile.noise_m, 1.0) * (1 + rng.random()), 2),
            )
        )
        previous_ms = timestamp_ms

    return Trajectory(id=traj_id, label=label, samples=tuple(samples))


def generate_synthetic_collection(
    profiles: Mapping[RoadUserClass, SyntheticProfile] = DEFAULT_PROFILES,
    count_per_class: int = 100,
    duration_s: float = 239.0,
    sample_interval_s: float = 1.0,
    seed: int = 0,
    jitter_ms: int = 0,
) -> TrajectoryCollection:
    """
    Generates count_per_class trajectories for every class in `profiles`.

    A trajectory has floor(duration_s / sample_interval_s) + 1 fixes. Each
    trajectory draws from its own generator seeded by derive_seed(seed, k),
    so the output only depends on the arguments.
    """
    if count_per_class < 1:
        raise DatasetError(f"count per class must be at least 1, got {count_per_class}")
    if sample_interval_s <= 0:
        raise DatasetError(f"sample interval must be positive, got {sample_interval_s}")

    n_samples = int(math.floor(duration_s / sample_interval_s + 1e-9)) + 1
    if n_samples < 3:
        raise DatasetError(
            f"duration {duration_s} s at {sample_interval_s} s interval gives "
            f"{n_samples} samples, need at least 3"
        )

    interval_ms = int(round(sample_interval_s * 1000))
    if not 0 <= jitter_ms < interval_ms / 2:
        raise DatasetError(f"jitter must lie in [0, {interval_ms / 2}) ms, got {jitter_ms}")

    for profile in profiles.values():
        profile.validate()

    jobs = [
        (label, k)
        for label in sorted(profiles)
        for k in range(count_per_class)
    ]

    trajectories = []
    for job_idx, (label, k) in enumerate(
        tqdm.tqdm(jobs, desc="Generating synthetic trajectories", disable=len(jobs) < 50)
    ):
        rng = np.random.default_rng(derive_seed(seed, job_idx))
        trajectories.append(
            _generate_trajectory(
                traj_id=f"{label.label}_{k:04d}",
                label=label,
                profile=profiles[label],
                n_samples=n_samples,
                interval_ms=interval_ms,
                jitter_ms=jitter_ms,
                rng=rng,
            )
        )

    logger.info(
        f"Generated {len(trajectories)} synthetic trajectories of {n_samples} samples"
    )
    return TrajectoryCollection(
        trajectories=tuple(trajectories), provenance=f"synthetic seed={seed}"
    )
