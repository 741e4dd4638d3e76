import io
import math

import numpy as np
import pytest

from roaduserclassification.errors import FeatureError
from roaduserclassification.feature_pipeline import (
    FEATURE_NAMES,
    FeatureSequence,
    Standardizer,
    apply_standardizer,
    compute_features,
    fit_standardizer,
    write_feature_dump,
)
from roaduserclassification.synthetic import DEFAULT_PROFILES, generate_synthetic_collection
from roaduserclassification.trajectory_model import RoadUserClass

from conftest import make_trajectory

# 0.0001 degree of equator
ARC_M = 6_371_000 * math.pi / 180 * 0.0001


def columns(seq: FeatureSequence):
    return {name: seq.values[:, idx] for idx, name in enumerate(FEATURE_NAMES)}


def test_equator_example():
    traj = make_trajectory([(0, 0), (0, 0.0001), (0, 0.0003)], [0, 1000, 2000])
    f = columns(compute_features(traj))

    assert list(f["dt"]) == [0.0, 1.0, 1.0]
    assert f["velocity"] == pytest.approx([11.119, 11.119, 22.239], abs=1e-3)
    assert f["velocity"][0] == f["velocity"][1]
    assert f["accel_pos"] == pytest.approx([0, 0, 11.119], abs=1e-3)
    assert list(f["accel_neg"]) == [0.0, 0.0, 0.0]
    assert f["bearing_rate"] == pytest.approx([0, 0, 0], abs=1e-9)


def test_stationary_duplicate_is_forward_filled():
    traj = make_trajectory(
        [(0, 0), (0, 0.0001), (0, 0.0001), (0, 0.0002)], [0, 1000, 2000, 3000]
    )
    f = columns(compute_features(traj))

    assert f["velocity"][2] == f["velocity"][1]
    assert f["accel_pos"][2] == 0.0
    assert f["accel_neg"][2] == 0.0
    assert f["bearing_rate"][2] == 0.0
    assert f["velocity"][3] == pytest.approx(ARC_M, rel=1e-9)


def test_duplicate_timestamp_is_forward_filled():
    traj = make_trajectory(
        [(0, 0), (0, 0.0001), (0, 0.0002), (0, 0.0004)], [0, 1000, 1000, 2000]
    )
    f = columns(compute_features(traj))

    assert f["dt"][2] == 0.0
    assert f["velocity"][2] == f["velocity"][1]
    assert f["accel_pos"][2] == 0.0
    # Mean interval of the last step is 0.5 s
    assert f["velocity"][3] == pytest.approx(2 * ARC_M, rel=1e-9)
    assert f["accel_pos"][3] == pytest.approx((2 * ARC_M - ARC_M) / 0.5, rel=1e-9)


def test_straight_constant_run():
    coords = [(0, 0.0001 * k) for k in range(10)]
    f = columns(compute_features(make_trajectory(coords, [1000 * k for k in range(10)])))
    for name in ["accel_pos", "accel_neg", "bearing_rate"]:
        assert f[name][2:] == pytest.approx(np.zeros(8), abs=1e-9)


def test_turn_gives_positive_bearing_rate():
    # North, then east: a quarter turn over a mean interval of 1 s
    traj = make_trajectory([(0, 0), (0.0001, 0), (0.0001, 0.0001)], [0, 1000, 2000])
    f = columns(compute_features(traj))
    assert f["bearing_rate"][2] == pytest.approx(math.pi / 2, abs=1e-6)

    # West is a quarter turn too, not three quarters
    traj = make_trajectory([(0, 0), (0.0001, 0), (0.0001, -0.0001)], [0, 1000, 2000])
    f = columns(compute_features(traj))
    assert f["bearing_rate"][2] == pytest.approx(math.pi / 2, abs=1e-6)


def test_too_short_and_not_computable():
    with pytest.raises(FeatureError):
        compute_features(make_trajectory([(0, 0)], [0]))
    with pytest.raises(FeatureError):
        compute_features(make_trajectory([(0, 0), (0, 0.001), (0, 0.002)], [0, 0, 0]))


def test_translation_invariance():
    coords = [(10, 10), (10.0001, 10.0002), (10.0003, 10.0002), (10.0004, 10.0005)]
    timestamps = [0, 1000, 3000, 4000]
    a = compute_features(make_trajectory(coords, timestamps))
    b = compute_features(make_trajectory(coords, [x + 123_456_789 for x in timestamps]))
    assert np.array_equal(a.values, b.values)


def test_feature_invariants_on_synthetic_trajectories():
    collection = generate_synthetic_collection(count_per_class=250, duration_s=29, seed=99)
    assert len(collection) == 1000

    for traj in collection.trajectories:
        f = columns(compute_features(traj))
        assert len(f["dt"]) == len(traj)
        assert np.all(f["velocity"] >= 0)
        assert np.all(f["accel_pos"] >= 0)
        assert np.all(f["accel_neg"] >= 0)
        assert np.all(f["accel_pos"] * f["accel_neg"] == 0)
        assert np.all(f["bearing_rate"] >= 0)

        mean_dt = (f["dt"][2:] + f["dt"][1:-1]) / 2
        assert np.all(f["bearing_rate"][2:] * mean_dt <= math.pi + 1e-12)

        bound = DEFAULT_PROFILES[traj.label].velocity_bound(1.0)
        assert np.all(f["velocity"] <= bound + 1e-9)


def test_compute_features_is_deterministic(small_collection):
    traj = small_collection.trajectories[0]
    assert np.array_equal(compute_features(traj).values, compute_features(traj).values)


def sequence(rows, label=RoadUserClass.CYCLIST, id="s"):
    return FeatureSequence(sequence_id=id, label=label, values=np.array(rows, dtype=float))


def test_two_point_standardizer():
    s = fit_standardizer([sequence([[1.0] * 5, [3.0] * 5])])
    assert list(s.mean) == [2.0] * 5
    assert list(s.std) == [1.0] * 5


def test_standardizer_duplication_invariance():
    rng = np.random.default_rng(4)
    corpus = [sequence(rng.normal(size=(6, 5)), id=f"s{k}") for k in range(3)]
    once = fit_standardizer(corpus)
    thrice = fit_standardizer(corpus * 3)
    assert thrice.mean == pytest.approx(once.mean, abs=1e-12)
    assert thrice.std == pytest.approx(once.std, abs=1e-12)


def test_standardizer_against_two_pass_oracle():
    rng = np.random.default_rng(8)
    corpus = [sequence(rng.normal(3, 2, size=(int(rng.integers(2, 9)), 5))) for _ in range(20)]
    pooled = [row for seq in corpus for row in seq.values.tolist()]
    n = len(pooled)

    s = fit_standardizer(corpus)
    for j in range(5):
        mean = sum(row[j] for row in pooled) / n
        variance = sum((row[j] - mean) ** 2 for row in pooled) / n
        assert s.mean[j] == pytest.approx(mean, abs=1e-12)
        assert s.std[j] == pytest.approx(math.sqrt(variance), abs=1e-12)


def test_constant_feature_is_rejected():
    rows = [[0.0, 1.0, 1.0, 1.0, 1.0], [0.0, 2.0, 3.0, 4.0, 5.0]]
    with pytest.raises(FeatureError, match="dt"):
        fit_standardizer([sequence(rows)])


def test_standardizer_needs_data():
    with pytest.raises(FeatureError):
        fit_standardizer([])
    with pytest.raises(FeatureError):
        fit_standardizer([sequence([[1.0] * 5])])


def test_apply_standardizer_to_own_corpus():
    rng = np.random.default_rng(12)
    corpus = [sequence(rng.uniform(0, 30, size=(10, 5)), id=f"s{k}") for k in range(5)]
    s = fit_standardizer(corpus)
    pooled = np.concatenate([apply_standardizer(s, x).values for x in corpus])
    assert pooled.mean(axis=0) == pytest.approx(np.zeros(5), abs=1e-9)
    assert pooled.std(axis=0) == pytest.approx(np.ones(5), abs=1e-9)


def test_apply_standardizer_arithmetic():
    identity = Standardizer(mean=np.zeros(5), std=np.ones(5))
    seq = sequence([[1.0, 2.0, 3.0, 4.0, 5.0]], label=RoadUserClass.MOTORCYCLIST)
    same = apply_standardizer(identity, seq)
    assert np.array_equal(same.values, seq.values)
    assert same.label == RoadUserClass.MOTORCYCLIST

    s = Standardizer(mean=np.ones(5), std=np.full(5, 2.0))
    assert list(apply_standardizer(s, sequence([[2.0] * 5])).values[0]) == [0.5] * 5


def test_standardizer_dict_round_trip():
    s = Standardizer(mean=np.array([0.1, 2, 3, 4, 5]), std=np.array([1, 2, 3, 4, 0.7]))
    restored = Standardizer.from_dict(s.to_dict())
    assert np.array_equal(restored.mean, s.mean)
    assert np.array_equal(restored.std, s.std)
    assert s.to_dict()["features"] == FEATURE_NAMES

    with pytest.raises(FeatureError):
        Standardizer.from_dict({"means": [0] * 5})


def test_feature_dump_header():
    sink = io.StringIO()
    write_feature_dump(sequence([[0.0, 1.0, 0.0, 0.0, 0.0], [1.0, 1.5, 0.5, 0.0, 0.1]]), sink)
    lines = sink.getvalue().splitlines()
    assert lines[0] == "dt,velocity,accel_pos,accel_neg,bearing_rate"
    assert len(lines) == 3
