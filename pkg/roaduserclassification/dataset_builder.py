"""
Builds the dataset variants used for training: trajectories are optionally
thinned to a two second interval, cut into fixed-length windows, split
into stratified train/validation/test partitions, turned into features and
standardized with statistics of the training partition.

A built variant is written as a directory `stride<k>_win<n>/` holding
train.csv, validation.csv, test.csv, standardizer.json and meta.json.
"""

import concurrent.futures
import enum

from ._compat import StrEnum
import json
import logging
import math
import pathlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd
import tqdm

from roaduserclassification.errors import DatasetError, RoadUserError
from roaduserclassification.feature_pipeline import (
    FEATURE_NAMES,
    FeatureSequence,
    Standardizer,
    apply_standardizer,
    compute_features,
    fit_standardizer,
)
from roaduserclassification.trajectory_model import (
    RoadUserClass,
    Trajectory,
    TrajectoryCollection,
)

logger = logging.getLogger(__name__)

DEFAULT_TEST_FRACTION = 0.25
DEFAULT_VALIDATION_FRACTION = 0.20

# Tolerance so that shares like 2.4999999999 still round half up
_ROUNDING_SLACK = 1e-9


class Partition(StrEnum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class ArchiveColumn(StrEnum):
    SEQUENCE_ID = "sequence_id"
    STEP_INDEX = "step_index"
    LABEL = "label"


STANDARDIZER_FILE = "standardizer.json"
META_FILE = "meta.json"


def derive_seed(seed: int, index: int) -> int:
    """Stable 64-bit sub-seed for task `index` of a job seeded with `seed`"""
    if seed < 0 or index < 0:
        raise ValueError("Seeds and task indices must be non-negative")
    state = np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)
    return int(state[0])


@dataclass(frozen=True)
class DatasetVariantSpec:
    sampling_stride: int
    window_len: int

    def __post_init__(self) -> None:
        if self.sampling_stride not in (1, 2):
            raise DatasetError(f"sampling stride must be 1 or 2, got {self.sampling_stride}")
        if self.window_len <= 2:
            raise DatasetError(f"window length must exceed 2, got {self.window_len}")

    @property
    def variant_id(self) -> str:
        return f"stride{self.sampling_stride}_win{self.window_len}"

    @property
    def nominal_minutes(self) -> float:
        return self.window_len * self.sampling_stride / 60


# One, two and four minute windows at one and two second intervals
STANDARD_VARIANTS: Tuple[DatasetVariantSpec, ...] = (
    DatasetVariantSpec(1, 60),
    DatasetVariantSpec(1, 120),
    DatasetVariantSpec(1, 240),
    DatasetVariantSpec(2, 30),
    DatasetVariantSpec(2, 60),
    DatasetVariantSpec(2, 120),
)


@dataclass
class LabeledDataset:
    train: List[FeatureSequence]
    validation: List[FeatureSequence]
    test: List[FeatureSequence]
    spec: DatasetVariantSpec
    standardizer: Standardizer
    split_seed: int

    def __post_init__(self) -> None:
        for partition in Partition:
            for seq in self.partition(partition):
                if len(seq) != self.spec.window_len:
                    raise DatasetError(
                        f"sequence '{seq.sequence_id}' in {partition} has length "
                        f"{len(seq)}, expected {self.spec.window_len}"
                    )

    def partition(self, name: Partition) -> List[FeatureSequence]:
        match name:
            case Partition.TRAIN:
                return self.train
            case Partition.VALIDATION:
                return self.validation
            case Partition.TEST:
                return self.test
        raise ValueError(f"Unknown partition {name}")

    def class_counts(self) -> Dict[str, Dict[str, int]]:
        out = {}
        for partition in Partition:
            counts = {x.label: 0 for x in RoadUserClass}
            for seq in self.partition(partition):
                counts[seq.label.label] += 1
            out[partition.value] = counts
        return out


class _Labeled(Protocol):
    @property
    def label(self) -> RoadUserClass:
        ...


LabeledT = TypeVar("LabeledT", bound=_Labeled)


def window_trajectory(traj: Trajectory, window_len: int) -> List[Trajectory]:
    """Non-overlapping windows from index 0, the remainder is discarded"""
    if window_len < 2:
        raise DatasetError(f"window length must be at least 2, got {window_len}")

    windows = []
    for k in range(len(traj) // window_len):
        start = k * window_len
        windows.append(
            traj.with_samples(
                traj.samples[start : start + window_len], id=f"{traj.id}#w{k}"
            )
        )
    return windows


def downsample_alternate(traj: Trajectory) -> Trajectory:
    """Keeps the fixes at even indices (0, 2, 4, ...)"""
    return traj.with_samples(traj.samples[::2])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + _ROUNDING_SLACK))


def stratified_split(
    sequences: Sequence[LabeledT],
    fractions: Tuple[float, float] = (
        DEFAULT_TEST_FRACTION,
        DEFAULT_VALIDATION_FRACTION,
    ),
    seed: int = 0,
) -> Tuple[List[LabeledT], List[LabeledT], List[LabeledT]]:
    """
    Splits into (train, validation, test). Per class the items are shuffled
    with a generator seeded by `seed`, then round_half_up(n * test_frac) go to
    test, round_half_up(rest * val_frac) to validation and the remainder to
    train.
    """
    test_frac, val_frac = fractions
    for frac in fractions:
        if not 0 < frac < 1:
            raise DatasetError(f"split fractions must lie in (0, 1), got {fractions}")

    by_class: Dict[RoadUserClass, List[LabeledT]] = {x: [] for x in RoadUserClass}
    for item in sequences:
        by_class[item.label].append(item)

    empty = [x.label for x, items in by_class.items() if len(items) == 0]
    if empty:
        raise DatasetError(f"no sequences for class(es) {empty}")

    rng = np.random.default_rng(seed)
    train: List[LabeledT] = []
    validation: List[LabeledT] = []
    test: List[LabeledT] = []
    for road_user_class in RoadUserClass:
        items = by_class[road_user_class]
        order = rng.permutation(len(items))
        shuffled = [items[i] for i in order]

        n_test = _round_half_up(len(items) * test_frac)
        n_val = _round_half_up((len(items) - n_test) * val_frac)

        test.extend(shuffled[:n_test])
        validation.extend(shuffled[n_test : n_test + n_val])
        train.extend(shuffled[n_test + n_val :])

        logger.debug(
            f"{road_user_class.label}: {len(items) - n_test - n_val} train, "
            f"{n_val} validation, {n_test} test"
        )

    return train, validation, test


def build_variant(
    collection: TrajectoryCollection,
    spec: DatasetVariantSpec,
    seed: int,
    fractions: Tuple[float, float] = (
        DEFAULT_TEST_FRACTION,
        DEFAULT_VALIDATION_FRACTION,
    ),
) -> LabeledDataset:
    """Downsample, window, split, compute features, standardize"""
    windows: List[Trajectory] = []
    for traj in collection.trajectories:
        if spec.sampling_stride == 2 and len(traj) >= 2:
            traj = downsample_alternate(traj)
        windows.extend(window_trajectory(traj, spec.window_len))

    logger.info(f"{spec.variant_id}: {len(windows)} windows")

    train_w, val_w, test_w = stratified_split(windows, fractions, seed)
    if len(train_w) == 0:
        raise DatasetError(f"{spec.variant_id}: training partition is empty")

    train = [compute_features(x) for x in train_w]
    validation = [compute_features(x) for x in val_w]
    test = [compute_features(x) for x in test_w]

    standardizer = fit_standardizer(train)

    return LabeledDataset(
        train=[apply_standardizer(standardizer, x) for x in train],
        validation=[apply_standardizer(standardizer, x) for x in validation],
        test=[apply_standardizer(standardizer, x) for x in test],
        spec=spec,
        standardizer=standardizer,
        split_seed=seed,
    )


def build_all_variants(
    collection: TrajectoryCollection,
    seed: int,
    variants: Sequence[DatasetVariantSpec] = STANDARD_VARIANTS,
    fractions: Tuple[float, float] = (
        DEFAULT_TEST_FRACTION,
        DEFAULT_VALIDATION_FRACTION,
    ),
    workers: int = 1,
) -> Dict[str, LabeledDataset]:
    """Builds several variants, the split of variant k is seeded with derive_seed(seed, k)"""

    def build(job: Tuple[int, DatasetVariantSpec]) -> LabeledDataset:
        index, spec = job
        return build_variant(collection, spec, derive_seed(seed, index), fractions)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(workers, 1)) as executor:
        built = list(
            tqdm.tqdm(
                executor.map(build, enumerate(variants)),
                total=len(variants),
                desc="Building dataset variants",
            )
        )
    return {spec.variant_id: data for spec, data in zip(variants, built)}


def _partition_to_frame(sequences: Sequence[FeatureSequence]) -> pd.DataFrame:
    frames = []
    for seq in sequences:
        frame = pd.DataFrame(seq.values, columns=FEATURE_NAMES)
        frame.insert(0, ArchiveColumn.STEP_INDEX, np.arange(len(seq)))
        frame.insert(0, ArchiveColumn.SEQUENCE_ID, seq.sequence_id)
        frame[ArchiveColumn.LABEL] = seq.label.label
        frames.append(frame)

    if len(frames) == 0:
        columns = [ArchiveColumn.SEQUENCE_ID, ArchiveColumn.STEP_INDEX]
        return pd.DataFrame(columns=columns + FEATURE_NAMES + [ArchiveColumn.LABEL])
    return pd.concat(frames, ignore_index=True)


def write_partition(sequences: Sequence[FeatureSequence], path: pathlib.Path) -> None:
    _partition_to_frame(sequences).to_csv(path, index=False, lineterminator="\n")


def load_partition(path: pathlib.Path) -> List[FeatureSequence]:
    """Reads a partition CSV back into sequences, in file order"""
    if not path.exists():
        raise DatasetError(f"partition file not at {path}")

    rows = pd.read_csv(
        path,
        dtype={ArchiveColumn.SEQUENCE_ID: str, ArchiveColumn.LABEL: str},
        float_precision="round_trip",
    )
    missing = {ArchiveColumn.SEQUENCE_ID, ArchiveColumn.STEP_INDEX, ArchiveColumn.LABEL}
    missing = (missing | set(FEATURE_NAMES)) - set(rows.columns)
    if missing:
        raise DatasetError(f"{path.name} is missing column(s) {sorted(missing)}")

    sequences = []
    for seq_id, group in rows.groupby(ArchiveColumn.SEQUENCE_ID, sort=False):
        group = group.sort_values(ArchiveColumn.STEP_INDEX)
        try:
            label = RoadUserClass.from_label(group[ArchiveColumn.LABEL].iloc[0])
        except RoadUserError as e:
            raise DatasetError(f"{path.name}, sequence '{seq_id}': {e.message}") from e
        sequences.append(
            FeatureSequence(
                sequence_id=str(seq_id),
                label=label,
                values=group[FEATURE_NAMES].to_numpy(dtype=np.float64),
            )
        )
    return sequences


def write_dataset_archive(data: LabeledDataset, out_dir: pathlib.Path) -> pathlib.Path:
    """Writes the variant directory below out_dir and returns its path"""
    variant_dir = out_dir / data.spec.variant_id
    variant_dir.mkdir(parents=True, exist_ok=True)

    for partition in Partition:
        write_partition(data.partition(partition), variant_dir / f"{partition}.csv")

    (variant_dir / STANDARDIZER_FILE).write_text(
        json.dumps(data.standardizer.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )

    meta = {
        "spec": {
            "sampling_stride": data.spec.sampling_stride,
            "window_len": data.spec.window_len,
        },
        "variant_id": data.spec.variant_id,
        "seed": data.split_seed,
        "counts": data.class_counts(),
        "totals": {p.value: len(data.partition(p)) for p in Partition},
    }
    (variant_dir / META_FILE).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    logger.info(f"Wrote dataset archive {variant_dir}")
    return variant_dir


def load_dataset_archive(
    variant_dir: pathlib.Path, seed_override: Optional[int] = None
) -> LabeledDataset:
    meta_path = variant_dir / META_FILE
    std_path = variant_dir / STANDARDIZER_FILE
    for file in [meta_path, std_path]:
        if not file.exists():
            raise DatasetError(f"archive file not at {file}")

    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        spec = DatasetVariantSpec(
            sampling_stride=int(meta["spec"]["sampling_stride"]),
            window_len=int(meta["spec"]["window_len"]),
        )
        seed = int(meta["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed {META_FILE} in {variant_dir} ({e})") from e

    standardizer = Standardizer.from_dict(
        json.loads(std_path.read_text(encoding="utf-8"))
    )

    return LabeledDataset(
        train=load_partition(variant_dir / f"{Partition.TRAIN}.csv"),
        validation=load_partition(variant_dir / f"{Partition.VALIDATION}.csv"),
        test=load_partition(variant_dir / f"{Partition.TEST}.csv"),
        spec=spec,
        standardizer=standardizer,
        split_seed=seed if seed_override is None else seed_override,
    )
