"""
Exhaustive grid search over the network hyperparameters of one dataset
variant. Every combination is trained with its own seeds derived from the
base seed and its index, so serial and parallel searches give the same
leaderboard. The winner has the lowest best validation loss; ties go to the
smaller network, then to the earlier combination.
"""

import hashlib
import itertools
import json
import logging
import math
import multiprocessing
import pathlib
from dataclasses import asdict, dataclass, field
from multiprocessing.pool import AsyncResult
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import pandas as pd
import tqdm

from roaduserclassification import multiprocess_functions
from roaduserclassification.dataset_builder import LabeledDataset
from roaduserclassification.db import db_repr_sqlite as db_repr
from roaduserclassification.db.db_repr_sqlite import GridRecordColumnNames as Col
from roaduserclassification.db.leaderboard import LeaderboardCache
from roaduserclassification.errors import GridSearchError, NetworkError
from roaduserclassification.multiprocess_init import multiprocess_init
from roaduserclassification.neural_core import Activation, HyperParams
from roaduserclassification.training import TrainConfig

logger = logging.getLogger(__name__)

LEADERBOARD_COLUMNS = [str(x) for x in Col]


@dataclass(frozen=True)
class GridSpec:
    l_in2rec: Tuple[int, ...] = (1, 2, 4)
    l_lstm: Tuple[int, ...] = (1, 2, 4)
    l_rec2out: Tuple[int, ...] = (1, 2, 4)
    width: Tuple[int, ...] = (32, 64, 128, 256)
    activation: Tuple[Activation, ...] = (Activation.TANH, Activation.RELU)

    def validate(self) -> None:
        for name, values in asdict(self).items():
            if len(values) == 0:
                raise GridSearchError(f"grid list '{name}' is empty")

    @property
    def cardinality(self) -> int:
        return math.prod(len(x) for x in asdict(self).values())


class ReferenceWinner(NamedTuple):
    hyper: HyperParams
    val_loss: float


# Reference winners on recorded data, kept for comparison only
REFERENCE_GRID_WINNERS: Dict[str, ReferenceWinner] = {
    "stride1_win60": ReferenceWinner(HyperParams(1, 1, 2, 128), 0.4562),
    "stride1_win120": ReferenceWinner(HyperParams(4, 1, 1, 64), 0.4411),
    "stride1_win240": ReferenceWinner(HyperParams(4, 2, 1, 128), 0.4136),
    "stride2_win30": ReferenceWinner(HyperParams(4, 1, 2, 64), 0.4534),
    "stride2_win60": ReferenceWinner(HyperParams(4, 1, 2, 64), 0.4282),
    "stride2_win120": ReferenceWinner(HyperParams(2, 1, 2, 128), 0.3967),
}


@dataclass(frozen=True)
class GridRecord:
    combo_index: int
    hyper: HyperParams
    val_loss: float  # nan for failed jobs
    best_epoch: int
    status: str
    elapsed_ms: int

    @property
    def failed(self) -> bool:
        return self.status != multiprocess_functions.STATUS_OK

    @property
    def parameter_count(self) -> int:
        return self.hyper.parameter_count()

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> "GridRecord":
        try:
            val_loss = row[Col.VAL_LOSS]
            return cls(
                combo_index=int(row[Col.COMBO_INDEX]),
                hyper=HyperParams.from_dict(row),
                val_loss=math.nan if val_loss is None else float(val_loss),
                best_epoch=int(row[Col.BEST_EPOCH]),
                status=str(row[Col.STATUS]),
                elapsed_ms=int(row[Col.ELAPSED_MS]),
            )
        except (KeyError, ValueError, TypeError, NetworkError) as e:
            raise GridSearchError(f"malformed leaderboard row {row} ({e})") from e

    def to_row(self) -> Dict[str, Any]:
        return {
            Col.COMBO_INDEX.value: self.combo_index,
            **self.hyper.to_dict(),
            Col.VAL_LOSS.value: self.val_loss,
            Col.BEST_EPOCH.value: self.best_epoch,
            Col.STATUS.value: self.status,
            Col.ELAPSED_MS.value: self.elapsed_ms,
        }


@dataclass
class GridResult:
    records: List[GridRecord]
    winner_index: int
    variant_id: str
    base_seed: int = 0
    resumed: List[int] = field(default_factory=list)

    @property
    def winner(self) -> GridRecord:
        return self.records[self.winner_index]

    @property
    def failed_count(self) -> int:
        return sum(1 for x in self.records if x.failed)


def enumerate_grid(grid: GridSpec) -> List[HyperParams]:
    """Cartesian product, l_in2rec outermost and activation innermost"""
    grid.validate()
    return [
        HyperParams(n_in2rec=a, n_lstm=b, n_rec2out=c, width=n, activation=act)
        for a, b, c, n, act in itertools.product(
            grid.l_in2rec, grid.l_lstm, grid.l_rec2out, grid.width, grid.activation
        )
    ]


def select_winner(records: Sequence[GridRecord]) -> int:
    """Position in `records` of the winning record"""
    candidates = [
        (x.val_loss, x.parameter_count, x.combo_index, pos)
        for pos, x in enumerate(records)
        if not x.failed and math.isfinite(x.val_loss)
    ]
    if len(candidates) == 0:
        raise GridSearchError(f"all {len(records)} grid combinations failed")
    return min(candidates)[3]


def config_digest(train_config: TrainConfig, data: LabeledDataset) -> str:
    """Identifies the settings a leaderboard record was produced with"""
    settings = asdict(train_config)
    # Every combination gets its own shuffle seed
    settings.pop("shuffle_seed")
    settings["split_seed"] = data.split_seed
    settings["train_count"] = len(data.train)
    settings["validation_count"] = len(data.validation)
    encoded = json.dumps(settings, sort_keys=True).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()[:16]


class GridSearch:
    def __init__(
        self,
        grid: GridSpec = GridSpec(),
        train_config: TrainConfig = TrainConfig(),
        base_seed: int = 0,
        workers: int = 1,
        leaderboard_db: Optional[pathlib.Path] = None,
        resume: bool = False,
    ) -> None:
        train_config.validate()
        if workers < 1:
            raise GridSearchError(f"worker count must be at least 1, got {workers}")
        if resume and leaderboard_db is None:
            raise GridSearchError("resuming needs a leaderboard database")

        self.grid = grid
        self.train_config = train_config
        self.base_seed = base_seed
        self.workers = workers
        self.leaderboard_db = leaderboard_db
        self.resume = resume
        self.logger = logging.getLogger(self.__class__.__name__)

    def _previous_rows(
        self, data: LabeledDataset, combos: List[HyperParams], digest: str
    ) -> Dict[int, Dict[str, Any]]:
        if not self.resume or self.leaderboard_db is None:
            return {}

        cache = LeaderboardCache(self.leaderboard_db)
        stored = cache.completed_records(data.spec.variant_id, self.base_seed, digest)

        previous = {}
        for combo_index, row in stored.items():
            if combo_index >= len(combos):
                continue
            # The grid may have changed since, only keep matching combinations
            if GridRecord.from_row(row).hyper == combos[combo_index]:
                previous[combo_index] = row
        self.logger.info(f"Resuming with {len(previous)} finished combinations")
        return previous

    def _run_serial(
        self, jobs: List[Tuple[int, HyperParams]], data: LabeledDataset, digest: str
    ) -> List[Dict[str, Any]]:
        multiprocess_init(
            db_repr.DB_THREADING_LOCK, self.leaderboard_db, data, self.train_config
        )
        rows = []
        for combo_index, hyper in tqdm.tqdm(jobs, desc="Grid search"):
            rows.append(
                multiprocess_functions.train_grid_combination(
                    combo_index, hyper, self.base_seed, data.spec.variant_id, digest
                )
            )
        return rows

    def _run_pool(
        self, jobs: List[Tuple[int, HyperParams]], data: LabeledDataset, digest: str
    ) -> List[Dict[str, Any]]:
        counter = tqdm.tqdm(total=len(jobs), desc="Grid search")

        l = multiprocessing.Lock()
        self.logger.debug("created lock")

        with multiprocessing.Pool(
            self.workers,
            initializer=multiprocess_init,
            initargs=(l, self.leaderboard_db, data, self.train_config),
        ) as pool:
            self.logger.debug("Started pool")
            results: List[AsyncResult] = []
            for combo_index, hyper in jobs:
                results.append(
                    pool.apply_async(
                        multiprocess_functions.train_grid_combination,
                        args=(
                            combo_index,
                            hyper,
                            self.base_seed,
                            data.spec.variant_id,
                            digest,
                        ),
                    )
                )

            rows = []
            for x in results:
                row = x.get()
                self.logger.debug(f"Finished combination {row[Col.COMBO_INDEX]}")
                rows.append(row)
                counter.update(1)

        counter.close()
        self.logger.debug("Finished pool")
        return rows

    def run(self, data: LabeledDataset) -> GridResult:
        combos = enumerate_grid(self.grid)
        digest = config_digest(self.train_config, data)
        previous = self._previous_rows(data, combos, digest)

        jobs = [(idx, x) for idx, x in enumerate(combos) if idx not in previous]
        self.logger.info(
            f"{data.spec.variant_id}: {len(combos)} combinations, {len(jobs)} to train "
            f"with {self.workers} worker(s)"
        )

        if self.workers == 1 or len(jobs) < 2:
            rows = self._run_serial(jobs, data, digest)
        else:
            rows = self._run_pool(jobs, data, digest)

        all_rows = list(previous.values()) + rows
        records = sorted(
            (GridRecord.from_row(x) for x in all_rows), key=lambda x: x.combo_index
        )
        winner_index = select_winner(records)

        result = GridResult(
            records=records,
            winner_index=winner_index,
            variant_id=data.spec.variant_id,
            base_seed=self.base_seed,
            resumed=sorted(previous),
        )
        self.logger.info(
            f"Winner {result.winner.hyper.label} (combination {result.winner.combo_index}) "
            f"with validation loss {result.winner.val_loss:.4f}, "
            f"{result.failed_count} failed"
        )
        return result


def grid_search(
    data: LabeledDataset,
    grid: GridSpec = GridSpec(),
    train_config: TrainConfig = TrainConfig(),
    base_seed: int = 0,
    workers: int = 1,
    leaderboard_db: Optional[pathlib.Path] = None,
    resume: bool = False,
) -> GridResult:
    return GridSearch(
        grid=grid,
        train_config=train_config,
        base_seed=base_seed,
        workers=workers,
        leaderboard_db=leaderboard_db,
        resume=resume,
    ).run(data)


def leaderboard_to_frame(records: Sequence[GridRecord]) -> pd.DataFrame:
    return pd.DataFrame([x.to_row() for x in records], columns=LEADERBOARD_COLUMNS)


def write_leaderboard_csv(result: GridResult, path: pathlib.Path) -> None:
    leaderboard_to_frame(result.records).to_csv(path, index=False, lineterminator="\n")


def read_leaderboard_csv(path: pathlib.Path) -> List[GridRecord]:
    if not path.exists():
        raise GridSearchError(f"leaderboard not at {path}")
    rows = pd.read_csv(path, float_precision="round_trip")
    missing = set(LEADERBOARD_COLUMNS) - set(rows.columns)
    if missing:
        raise GridSearchError(f"leaderboard is missing column(s) {sorted(missing)}")
    records = []
    for row in rows.to_dict(orient="records"):
        if pd.isna(row[Col.VAL_LOSS]):
            row[Col.VAL_LOSS] = None
        records.append(GridRecord.from_row(row))
    return records


def write_gridsearch_json(result: GridResult, path: pathlib.Path) -> None:
    winner = result.winner
    summary = {
        "variant_id": result.variant_id,
        "base_seed": result.base_seed,
        "record_count": len(result.records),
        "failed_count": result.failed_count,
        "winner": {
            "combo_index": winner.combo_index,
            "hyperparams": winner.hyper.to_dict(),
            "val_loss": winner.val_loss,
            "best_epoch": winner.best_epoch,
            "parameter_count": winner.parameter_count,
        },
    }
    reference = REFERENCE_GRID_WINNERS.get(result.variant_id)
    if reference is not None:
        summary["reference"] = {
            "hyperparams": reference.hyper.to_dict(),
            "val_loss": reference.val_loss,
        }
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_gridsearch_json(path: pathlib.Path) -> Tuple[HyperParams, int, int]:
    """Returns (winner hyperparameters, combination index, base seed)"""
    if not path.exists():
        raise GridSearchError(f"grid search summary not at {path}")
    try:
        summary = json.loads(path.read_text(encoding="utf-8"))
        winner = summary["winner"]
        return (
            HyperParams.from_dict(winner["hyperparams"]),
            int(winner["combo_index"]),
            int(summary["base_seed"]),
        )
    except (KeyError, TypeError, ValueError, NetworkError) as e:
        raise GridSearchError(f"malformed grid search summary {path} ({e})") from e
