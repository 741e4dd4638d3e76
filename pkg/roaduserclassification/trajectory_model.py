"""
Labeled raw GNSS trajectories: data model, CSV ingestion and validation.

A trajectory file is a CSV with the header `timestamp_ms,lat,lon,accuracy_m`
and one fix per row. A collection is described by a JSON manifest listing
trajectory files with their id and road user class.
"""

import concurrent.futures
import enum

from ._compat import StrEnum
import io
import json
import logging
import pathlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import tqdm

from roaduserclassification.errors import (
    CollectionError,
    TrajectoryFormatError,
    TrajectoryValidationError,
)
from roaduserclassification.geodesy import GeoPoint, is_valid_coordinate

logger = logging.getLogger(__name__)


class RoadUserClass(enum.IntEnum):
    """The four road user types, the value is the one-hot index"""

    PEDESTRIAN = 0
    CYCLIST = 1
    MOTORCYCLIST = 2
    PASSENGER_CAR = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "RoadUserClass":
        try:
            return cls[label.upper()]
        except KeyError:
            valid = ", ".join(x.label for x in cls)
            raise CollectionError(
                f"unknown class '{label}', valid labels are: {valid}"
            ) from None

    def one_hot(self) -> np.ndarray:
        out = np.zeros(len(RoadUserClass))
        out[self.value] = 1.0
        return out


CLASS_LABELS: Tuple[str, ...] = tuple(x.label for x in RoadUserClass)


class TrajectoryCsvField(StrEnum):
    """Enum to match fields to headers in the trajectory CSV"""

    TIMESTAMP_MS = "timestamp_ms"
    LAT = "lat"
    LON = "lon"
    ACCURACY_M = "accuracy_m"


class ManifestField(StrEnum):
    TRAJECTORIES = "trajectories"
    PROVENANCE = "provenance"
    ID = "id"
    LABEL = "label"
    PATH = "path"


@dataclass(frozen=True)
class RawSample:
    timestamp_ms: int
    point: GeoPoint
    accuracy_m: float
    # Field text as read from a trajectory file, written back unchanged
    source_fields: Optional[Tuple[str, str, str, str]] = field(
        default=None, compare=False, repr=False
    )

    def __post_init__(self) -> None:
        if not self.accuracy_m >= 0:
            raise ValueError(f"accuracy_m must be non-negative, got {self.accuracy_m}")


@dataclass(frozen=True)
class Trajectory:
    """An ordered, labeled run of fixes from one road user"""

    id: str
    label: RoadUserClass
    samples: Tuple[RawSample, ...]

    def __post_init__(self) -> None:
        if len(self.samples) == 0:
            raise TrajectoryValidationError(f"trajectory '{self.id}' has no samples")
        for idx in range(1, len(self.samples)):
            if self.samples[idx].timestamp_ms < self.samples[idx - 1].timestamp_ms:
                raise TrajectoryValidationError(
                    f"trajectory '{self.id}' timestamps decrease", row=idx + 1
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return (self.samples[-1].timestamp_ms - self.samples[0].timestamp_ms) / 1000

    def timestamps_ms(self) -> np.ndarray:
        return np.array([x.timestamp_ms for x in self.samples], dtype=np.int64)

    def lats(self) -> np.ndarray:
        return np.array([x.point.lat for x in self.samples], dtype=np.float64)

    def lons(self) -> np.ndarray:
        return np.array([x.point.lon for x in self.samples], dtype=np.float64)

    def with_samples(self, samples: Sequence[RawSample], id: Optional[str] = None):
        return Trajectory(
            id=self.id if id is None else id, label=self.label, samples=tuple(samples)
        )


@dataclass(frozen=True)
class TrajectoryCollection:
    trajectories: Tuple[Trajectory, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        seen = Counter(x.id for x in self.trajectories)
        duplicates = sorted(k for k, v in seen.items() if v > 1)
        if duplicates:
            raise CollectionError(f"duplicate trajectory id(s): {duplicates}")

    def __len__(self) -> int:
        return len(self.trajectories)


@dataclass
class CollectionSummary:
    counts: Dict[RoadUserClass, int]
    total_hours: float
    duration_shares: Dict[RoadUserClass, float] = field(default_factory=dict)


def parse_trajectory_file(
    content: bytes, id: str, label: RoadUserClass
) -> Trajectory:
    """Parses trajectory CSV bytes, rows are numbered from 1 after the header"""
    expected = [str(x) for x in TrajectoryCsvField]

    try:
        rows = pd.read_csv(
            io.BytesIO(content),
            header=0,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise TrajectoryFormatError(f"'{id}': unreadable trajectory CSV ({e})") from e

    if list(rows.columns) != expected:
        raise TrajectoryFormatError(
            f"'{id}': malformed header {list(rows.columns)}, expected {expected}"
        )

    samples: List[RawSample] = []
    previous_ts: Optional[int] = None
    for row_idx, record in enumerate(rows.itertuples(index=False), start=1):
        try:
            timestamp_ms = int(record.timestamp_ms)
            lat = float(record.lat)
            lon = float(record.lon)
            accuracy_m = float(record.accuracy_m)
        except ValueError as e:
            raise TrajectoryFormatError(f"'{id}' row {row_idx}: {e}") from e

        if not is_valid_coordinate(lat, lon):
            raise TrajectoryValidationError(
                f"'{id}': coordinate out of range lat={lat}, lon={lon}", row=row_idx
            )
        if not accuracy_m >= 0:
            raise TrajectoryValidationError(
                f"'{id}': negative accuracy {accuracy_m}", row=row_idx
            )
        if previous_ts is not None and timestamp_ms < previous_ts:
            raise TrajectoryValidationError(
                f"'{id}': timestamp {timestamp_ms} earlier than {previous_ts}",
                row=row_idx,
            )
        previous_ts = timestamp_ms

        samples.append(
            RawSample(
                timestamp_ms=timestamp_ms,
                point=GeoPoint(lat=lat, lon=lon),
                accuracy_m=accuracy_m,
                source_fields=(
                    record.timestamp_ms,
                    record.lat,
                    record.lon,
                    record.accuracy_m,
                ),
            )
        )

    if len(samples) == 0:
        raise TrajectoryValidationError(f"'{id}': trajectory file has no rows")

    return Trajectory(id=id, label=label, samples=tuple(samples))


def _csv_fields(sample: RawSample) -> Tuple[str, str, str, str]:
    if sample.source_fields is not None:
        return sample.source_fields
    return (
        str(int(sample.timestamp_ms)),
        repr(float(sample.point.lat)),
        repr(float(sample.point.lon)),
        repr(float(sample.accuracy_m)),
    )


def trajectory_to_frame(traj: Trajectory) -> pd.DataFrame:
    """One string column per CSV field, parsed fixes keep the text they were read from"""
    return pd.DataFrame(
        [_csv_fields(x) for x in traj.samples],
        columns=[str(x) for x in TrajectoryCsvField],
        dtype=str,
    )


def serialize_trajectory(traj: Trajectory) -> bytes:
    """Inverse of parse_trajectory_file, byte-stable on parsed files"""
    text = trajectory_to_frame(traj).to_csv(index=False, lineterminator="\n")
    return text.encode("utf-8")


def filter_accuracy(traj: Trajectory, max_accuracy_m: float) -> Trajectory:
    """Drops fixes whose estimated accuracy is worse than max_accuracy_m"""
    kept = [x for x in traj.samples if x.accuracy_m <= max_accuracy_m]
    if len(kept) == 0:
        raise TrajectoryValidationError(
            f"'{traj.id}': every sample exceeds max accuracy {max_accuracy_m} m"
        )
    logger.debug(
        f"Accuracy filter kept {len(kept)}/{len(traj.samples)} samples of {traj.id}"
    )
    return traj.with_samples(kept)


def directory_resolver(base_dir: pathlib.Path) -> Callable[[str], bytes]:
    """Returns a resolver reading manifest paths relative to base_dir"""

    def resolve(path: str) -> bytes:
        return (base_dir / path).read_bytes()

    return resolve


def load_collection(
    manifest: bytes,
    resolver: Callable[[str], bytes],
    max_accuracy_m: Optional[float] = None,
    workers: int = 1,
) -> TrajectoryCollection:
    """Parses every trajectory named by the manifest"""
    try:
        parsed = json.loads(manifest.decode("utf-8"))
        entries = parsed[ManifestField.TRAJECTORIES]
    except (ValueError, KeyError, TypeError) as e:
        raise CollectionError(f"malformed manifest ({e})") from e

    provenance = str(parsed.get(ManifestField.PROVENANCE, ""))

    jobs: List[Tuple[str, RoadUserClass, str]] = []
    seen_ids: set = set()
    for entry in entries:
        try:
            traj_id = str(entry[ManifestField.ID])
            label = RoadUserClass.from_label(str(entry[ManifestField.LABEL]))
            path = str(entry[ManifestField.PATH])
        except (KeyError, TypeError) as e:
            raise CollectionError(f"manifest entry missing field {e}") from e
        if traj_id in seen_ids:
            raise CollectionError(f"duplicate trajectory id '{traj_id}'")
        seen_ids.add(traj_id)
        jobs.append((traj_id, label, path))

    def parse_one(job: Tuple[str, RoadUserClass, str]) -> Trajectory:
        traj_id, label, path = job
        try:
            content = resolver(path)
        except FileNotFoundError as e:
            raise CollectionError(f"missing trajectory file '{path}'") from e
        traj = parse_trajectory_file(content, traj_id, label)
        if max_accuracy_m is not None:
            traj = filter_accuracy(traj, max_accuracy_m)
        return traj

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        trajectories = list(
            tqdm.tqdm(
                executor.map(parse_one, jobs),
                total=len(jobs),
                desc="Parsing trajectory files",
                disable=len(jobs) < 2,
            )
        )

    logger.info(f"Loaded {len(trajectories)} trajectories")
    return TrajectoryCollection(trajectories=tuple(trajectories), provenance=provenance)


def write_collection(
    collection: TrajectoryCollection, out_dir: pathlib.Path
) -> pathlib.Path:
    """Writes one CSV per trajectory plus manifest.json, returns the manifest path"""
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for traj in collection.trajectories:
        filename = f"{traj.id}.csv"
        (out_dir / filename).write_bytes(serialize_trajectory(traj))
        entries.append(
            {
                ManifestField.ID.value: traj.id,
                ManifestField.LABEL.value: traj.label.label,
                ManifestField.PATH.value: filename,
            }
        )

    manifest_path = out_dir / "manifest.json"
    manifest = {
        ManifestField.TRAJECTORIES.value: entries,
        ManifestField.PROVENANCE.value: collection.provenance,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def summarize(collection: TrajectoryCollection) -> CollectionSummary:
    """Per-class counts, total duration in hours and duration share per class"""
    if len(collection) == 0:
        raise CollectionError("cannot summarize an empty collection")

    counts = {x: 0 for x in RoadUserClass}
    durations = {x: 0.0 for x in RoadUserClass}
    for traj in collection.trajectories:
        counts[traj.label] += 1
        durations[traj.label] += traj.duration_s

    total_s = sum(durations.values())
    if total_s <= 0:
        raise CollectionError("collection has zero total duration")

    return CollectionSummary(
        counts=counts,
        total_hours=total_s / 3600,
        duration_shares={k: v / total_s for k, v in durations.items()},
    )
