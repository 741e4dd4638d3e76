import dataclasses
import logging
import math
import time
from typing import Any, Dict, Tuple

from roaduserclassification import multiprocess_init as worker_state
from roaduserclassification.dataset_builder import LabeledDataset, derive_seed
from roaduserclassification.db.db_repr_sqlite import GridRecordColumnNames as Col
from roaduserclassification.db.leaderboard import LeaderboardCache
from roaduserclassification.errors import TrainingError
from roaduserclassification.neural_core import HyperParams, Network, build_network
from roaduserclassification.training import TrainConfig, TrainHistory, train

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_FAILED = "failed"


def combination_seeds(base_seed: int, combo_index: int) -> Tuple[int, int]:
    """(network seed, shuffle seed) of one grid combination"""
    sub_seed = derive_seed(base_seed, combo_index)
    return derive_seed(sub_seed, 0), derive_seed(sub_seed, 1)


def train_combination(
    data: LabeledDataset,
    hyper: HyperParams,
    base_seed: int,
    combo_index: int,
    train_config: TrainConfig,
) -> Tuple[Network, TrainHistory]:
    net_seed, shuffle_seed = combination_seeds(base_seed, combo_index)
    net = build_network(hyper, net_seed)
    job_config = dataclasses.replace(train_config, shuffle_seed=shuffle_seed)
    return train(net, data, job_config, progress=False)


def train_grid_combination(
    combo_index: int,
    hyper: HyperParams,
    base_seed: int,
    variant_id: str,
    config_digest: str,
) -> Dict[str, Any]:
    """
    Trains one combination on the dataset held by this worker and returns
    its leaderboard row. A diverging job is recorded as failed instead of
    stopping the search.
    """
    started = time.perf_counter()
    row: Dict[str, Any] = {
        Col.COMBO_INDEX: combo_index,
        Col.L_IN2REC: hyper.n_in2rec,
        Col.L_LSTM: hyper.n_lstm,
        Col.L_REC2OUT: hyper.n_rec2out,
        Col.N: hyper.width,
        Col.ACTIVATION: str(hyper.activation),
    }

    try:
        _, history = train_combination(
            worker_state.dataset, hyper, base_seed, combo_index, worker_state.config
        )
        row[Col.VAL_LOSS] = history.best_val_loss
        row[Col.BEST_EPOCH] = history.best_epoch
        row[Col.STATUS] = STATUS_OK
        if not math.isfinite(history.best_val_loss):
            row[Col.VAL_LOSS] = None
            row[Col.STATUS] = STATUS_FAILED
    except TrainingError as e:
        logger.warning(f"Combination {combo_index} ({hyper.label}) failed: {e}")
        row[Col.VAL_LOSS] = None
        row[Col.BEST_EPOCH] = 0
        row[Col.STATUS] = STATUS_FAILED

    row[Col.ELAPSED_MS] = int((time.perf_counter() - started) * 1000)
    row = {str(k): v for k, v in row.items()}

    if worker_state.leaderboard_db_file is not None:
        with worker_state.leaderboard_write_lock:
            LeaderboardCache(worker_state.leaderboard_db_file).set_record(
                variant_id, base_seed, config_digest, row
            )

    return row
