import numpy as np
import pytest

from roaduserclassification.errors import DatasetError
from roaduserclassification.feature_pipeline import compute_features
from roaduserclassification.synthetic import (
    DEFAULT_PROFILES,
    SyntheticProfile,
    generate_synthetic_collection,
)
from roaduserclassification.trajectory_model import RoadUserClass, serialize_trajectory


def test_same_seed_gives_identical_collections():
    a = generate_synthetic_collection(count_per_class=5, duration_s=60, seed=7)
    b = generate_synthetic_collection(count_per_class=5, duration_s=60, seed=7)
    assert [serialize_trajectory(x) for x in a.trajectories] == [
        serialize_trajectory(x) for x in b.trajectories
    ]
    assert a.provenance == "synthetic seed=7"

    c = generate_synthetic_collection(count_per_class=5, duration_s=60, seed=8)
    assert serialize_trajectory(a.trajectories[0]) != serialize_trajectory(c.trajectories[0])


def test_shape_of_collection():
    collection = generate_synthetic_collection(
        count_per_class=3, duration_s=20, sample_interval_s=2.0, seed=1
    )
    assert len(collection) == 12
    assert all(len(x) == 11 for x in collection.trajectories)
    assert [x.id for x in collection.trajectories[:3]] == [
        "pedestrian_0000",
        "pedestrian_0001",
        "pedestrian_0002",
    ]
    assert {x.label for x in collection.trajectories} == set(RoadUserClass)
    steps = np.diff(collection.trajectories[0].timestamps_ms())
    assert np.all(steps == 2000)


def test_jitter_keeps_timestamps_ordered():
    collection = generate_synthetic_collection(count_per_class=2, duration_s=30, seed=2, jitter_ms=200)
    for traj in collection.trajectories:
        steps = np.diff(traj.timestamps_ms())
        assert np.all(steps >= 600)
        assert np.all(steps <= 1400)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"count_per_class": 0},
        {"duration_s": 1.0},
        {"sample_interval_s": 0.0},
        {"jitter_ms": 600},
    ],
)
def test_invalid_arguments(kwargs):
    with pytest.raises(DatasetError):
        generate_synthetic_collection(**kwargs)


def test_infeasible_profile():
    profile = SyntheticProfile(
        min_speed=0.0, max_speed=-1.0, max_accel=1.0, max_decel=1.0, max_turn_rate=0.1, hold_s=(1, 2)
    )
    with pytest.raises(DatasetError, match="infeasible"):
        generate_synthetic_collection({RoadUserClass.CYCLIST: profile}, count_per_class=1)


def test_straight_constant_speed_without_noise():
    profile = SyntheticProfile(
        min_speed=10.0,
        max_speed=10.0,
        max_accel=1.0,
        max_decel=1.0,
        max_turn_rate=0.0,
        hold_s=(5.0, 10.0),
        noise_m=0.0,
    )
    collection = generate_synthetic_collection(
        {RoadUserClass.PASSENGER_CAR: profile}, count_per_class=5, duration_s=60, seed=3
    )
    for traj in collection.trajectories:
        values = compute_features(traj).values
        assert values[1:, 1] == pytest.approx(np.full(len(traj) - 1, 10.0), rel=1e-6)
        assert values[2:, 2:] == pytest.approx(np.zeros((len(traj) - 2, 3)), abs=1e-6)


def test_pedestrian_speed_bound():
    profiles = {RoadUserClass.PEDESTRIAN: DEFAULT_PROFILES[RoadUserClass.PEDESTRIAN]}
    collection = generate_synthetic_collection(profiles, count_per_class=50, duration_s=120, seed=5)
    bound = profiles[RoadUserClass.PEDESTRIAN].velocity_bound(1.0)
    assert bound == pytest.approx(2.4)
    for traj in collection.trajectories:
        assert np.max(compute_features(traj).values[:, 1]) <= bound + 1e-9


def test_mean_speed_ordering():
    collection = generate_synthetic_collection(count_per_class=100, duration_s=60, seed=6)
    means = {}
    for road_user_class in RoadUserClass:
        speeds = [
            compute_features(x).values[:, 1].mean()
            for x in collection.trajectories
            if x.label == road_user_class
        ]
        means[road_user_class] = float(np.mean(speeds))

    assert means[RoadUserClass.PEDESTRIAN] < means[RoadUserClass.CYCLIST]
    assert means[RoadUserClass.CYCLIST] < means[RoadUserClass.MOTORCYCLIST]
    assert means[RoadUserClass.MOTORCYCLIST] == pytest.approx(
        means[RoadUserClass.PASSENGER_CAR], rel=0.3
    )
