import pathlib
import shutil
from typing import Sequence, Tuple

import pytest

from roaduserclassification import config
from roaduserclassification.dataset_builder import DatasetVariantSpec, build_variant
from roaduserclassification.geodesy import GeoPoint
from roaduserclassification.synthetic import generate_synthetic_collection
from roaduserclassification.trajectory_model import (
    RawSample,
    RoadUserClass,
    Trajectory,
)

dir_path = pathlib.Path(__file__).parent
TEST_STORAGE_FOLDER = (
    (pathlib.Path(dir_path) / "roaduser_test_storage").absolute().resolve()
)

TEST_STORAGE_FOLDER.mkdir(parents=True, exist_ok=True)

TEST_LEADERBOARD_DB_FILE = TEST_STORAGE_FOLDER / "leaderboard.sqlite"


@pytest.fixture(autouse=True, scope="session")
def setup_config():
    config.conf = config.RootConfigClass()
    config.init_loggers(level="DEBUG")


@pytest.fixture(autouse=True, scope="session")
def setup_folders():
    # Clean up before starting
    shutil.rmtree(str(TEST_STORAGE_FOLDER), ignore_errors=True)

    TEST_STORAGE_FOLDER.mkdir(parents=True, exist_ok=True)

    yield


def make_trajectory(
    coords: Sequence[Tuple[float, float]],
    timestamps_ms: Sequence[int],
    label: RoadUserClass = RoadUserClass.PEDESTRIAN,
    id: str = "t",
    accuracy_m: float = 5.0,
) -> Trajectory:
    return Trajectory(
        id=id,
        label=label,
        samples=tuple(
            RawSample(timestamp_ms=ts, point=GeoPoint(lat, lon), accuracy_m=accuracy_m)
            for (lat, lon), ts in zip(coords, timestamps_ms)
        ),
    )


@pytest.fixture(scope="session")
def small_collection():
    """30 trajectories of 30 one second fixes per class"""
    return generate_synthetic_collection(count_per_class=30, duration_s=29, seed=11)


@pytest.fixture(scope="session")
def small_dataset(small_collection):
    """Windows of 10 steps, 54 train, 13 validation and 23 test per class"""
    return build_variant(small_collection, DatasetVariantSpec(1, 10), seed=5)
