"""
Per-timestep kinematic features and their standardization.

Every fix of a trajectory becomes a 5-vector [dt, velocity, accel_pos,
accel_neg, bearing_rate]:

  dt            seconds since the previous fix (0 for the first fix)
  velocity      great-circle distance covered / dt, m/s
  accel_pos     positive change of velocity over the mean of the two
                adjacent intervals, m/s^2
  accel_neg     the same for a decrease of velocity, reported positive
  bearing_rate  absolute change of bearing over the mean of the two
                adjacent intervals, rad/s

Velocity and bearing cannot be computed for a fix taken at the same instant
or the same position as its predecessor; they are forward-filled from the
last computable value and the dependent features are computed from the
filled values.
"""

import enum

from ._compat import StrEnum
import logging
import math
from dataclasses import dataclass
from typing import Dict, IO, Iterator, List, NamedTuple, Sequence

import numpy as np
import pandas as pd

from roaduserclassification.errors import FeatureError
from roaduserclassification.geodesy import (
    haversine_distance_array,
    initial_bearing_array,
)
from roaduserclassification.trajectory_model import RoadUserClass, Trajectory

logger = logging.getLogger(__name__)

NUM_FEATURES = 5


class FeatureName(StrEnum):
    """Column order of the feature matrix"""

    DT = "dt"
    VELOCITY = "velocity"
    ACCEL_POS = "accel_pos"
    ACCEL_NEG = "accel_neg"
    BEARING_RATE = "bearing_rate"


FEATURE_NAMES = [str(x) for x in FeatureName]


class FeatureVector(NamedTuple):
    dt: float
    velocity: float
    accel_pos: float
    accel_neg: float
    bearing_rate: float


@dataclass(frozen=True)
class FeatureSequence:
    """
    Features of one (windowed) trajectory. `values` is a (T, 5) float64
    matrix in FEATURE_NAMES column order.
    """

    sequence_id: str
    label: RoadUserClass
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != NUM_FEATURES:
            raise ValueError(f"Feature matrix must be (T, 5), got {self.values.shape}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> List[FeatureVector]:
        return [FeatureVector(*(float(v) for v in row)) for row in self.values]

    def __iter__(self) -> Iterator[FeatureVector]:
        return iter(self.steps)


def compute_features(traj: Trajectory) -> FeatureSequence:
    if len(traj) < 2:
        raise FeatureError(
            f"'{traj.id}': need at least 2 samples to compute features, got {len(traj)}"
        )

    timestamps = traj.timestamps_ms()
    lats = traj.lats()
    lons = traj.lons()
    n = len(traj)

    dt = np.zeros(n)
    dt[1:] = np.diff(timestamps) / 1000

    distance = np.zeros(n)
    distance[1:] = haversine_distance_array(lats[:-1], lons[:-1], lats[1:], lons[1:])
    bearing = np.zeros(n)
    bearing[1:] = initial_bearing_array(lats[:-1], lons[:-1], lats[1:], lons[1:])

    same_position = np.zeros(n, dtype=bool)
    same_position[1:] = (lats[1:] == lats[:-1]) & (lons[1:] == lons[:-1])
    computable = (dt > 0) & ~same_position
    computable[0] = False

    if not computable.any():
        raise FeatureError(f"'{traj.id}': no velocity is computable")

    velocity = np.zeros(n)
    velocity[computable] = distance[computable] / dt[computable]

    # Leading gaps (including t=1) take the first computable value, later
    # gaps take the last one
    first = int(np.argmax(computable))
    velocity[:first] = velocity[first]
    bearing[:first] = bearing[first]
    for t in range(first + 1, n):
        if not computable[t]:
            velocity[t] = velocity[t - 1]
            bearing[t] = bearing[t - 1]

    accel_pos = np.zeros(n)
    accel_neg = np.zeros(n)
    bearing_rate = np.zeros(n)
    for t in range(2, n):
        mean_dt = (dt[t] + dt[t - 1]) / 2
        if mean_dt <= 0:
            continue
        change = (velocity[t] - velocity[t - 1]) / mean_dt
        accel_pos[t] = max(change, 0.0)
        accel_neg[t] = -min(change, 0.0)
        turn = math.pi - abs(abs(bearing[t] - bearing[t - 1]) - math.pi)
        bearing_rate[t] = turn / mean_dt

    values = np.column_stack([dt, velocity, accel_pos, accel_neg, bearing_rate])
    return FeatureSequence(sequence_id=traj.id, label=traj.label, values=values)


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-score statistics fitted on training sequences"""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        if self.mean.shape != (NUM_FEATURES,) or self.std.shape != (NUM_FEATURES,):
            raise ValueError("Standardizer needs 5 means and 5 standard deviations")
        if not np.all(self.std > 0):
            raise FeatureError(f"standard deviations must be positive, got {self.std}")

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "features": FEATURE_NAMES,
            "means": [float(x) for x in self.mean],
            "stds": [float(x) for x in self.std],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Standardizer":
        try:
            return cls(
                mean=np.array(data["means"], dtype=np.float64),
                std=np.array(data["stds"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FeatureError(f"malformed standardizer block ({e})") from e


def fit_standardizer(train: Sequence[FeatureSequence]) -> Standardizer:
    """Population mean and standard deviation over all pooled timesteps"""
    if len(train) == 0:
        raise FeatureError("cannot fit a standardizer on zero sequences")

    pooled = np.concatenate([x.values for x in train], axis=0)
    if pooled.shape[0] < 2:
        raise FeatureError("need at least 2 pooled timesteps to fit a standardizer")

    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)

    degenerate = [FEATURE_NAMES[i] for i in range(NUM_FEATURES) if not std[i] > 0]
    if degenerate:
        raise FeatureError(f"feature(s) {degenerate} have zero standard deviation")

    logger.debug(f"Fitted standardizer on {pooled.shape[0]} timesteps")
    return Standardizer(mean=mean, std=std)


def apply_standardizer(s: Standardizer, seq: FeatureSequence) -> FeatureSequence:
    return FeatureSequence(
        sequence_id=seq.sequence_id,
        label=seq.label,
        values=(seq.values - s.mean) / s.std,
    )


def features_to_frame(seq: FeatureSequence) -> pd.DataFrame:
    return pd.DataFrame(seq.values, columns=FEATURE_NAMES)


def write_feature_dump(seq: FeatureSequence, sink: IO[str]) -> None:
    """Audit CSV, one row per timestep"""
    features_to_frame(seq).to_csv(sink, index=False, lineterminator="\n")
