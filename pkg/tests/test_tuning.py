import dataclasses
import json
import math
import pathlib

import pytest

from roaduserclassification import multiprocess_functions
from roaduserclassification.db.leaderboard import LeaderboardCache
from roaduserclassification.errors import GridSearchError, TrainingError
from roaduserclassification.multiprocess_functions import (
    STATUS_FAILED,
    STATUS_OK,
    combination_seeds,
)
from roaduserclassification.neural_core import Activation, HyperParams
from roaduserclassification.training import TrainConfig
from roaduserclassification.tuning import (
    REFERENCE_GRID_WINNERS,
    GridRecord,
    GridSpec,
    config_digest,
    enumerate_grid,
    grid_search,
    read_gridsearch_json,
    read_leaderboard_csv,
    select_winner,
    write_gridsearch_json,
    write_leaderboard_csv,
)

from conftest import TEST_LEADERBOARD_DB_FILE

TINY_GRID = GridSpec(
    l_in2rec=(1,),
    l_lstm=(1,),
    l_rec2out=(1,),
    width=(4, 8),
    activation=(Activation.TANH, Activation.RELU),
)
QUICK = TrainConfig(max_epochs=2, patience_epochs=2)


def record(combo_index, hyper, val_loss, status=STATUS_OK):
    return GridRecord(
        combo_index=combo_index,
        hyper=hyper,
        val_loss=val_loss,
        best_epoch=1,
        status=status,
        elapsed_ms=5,
    )


def without_timing(records):
    return [dataclasses.replace(x, elapsed_ms=0) for x in records]


def test_full_grid_size_and_order():
    combos = enumerate_grid(GridSpec())
    assert GridSpec().cardinality == 216
    assert len(combos) == 216
    assert len(set(combos)) == 216
    assert combos[0] == HyperParams(1, 1, 1, 32, Activation.TANH)
    assert combos[1] == HyperParams(1, 1, 1, 32, Activation.RELU)
    assert combos[2] == HyperParams(1, 1, 1, 64, Activation.TANH)
    assert combos[8] == HyperParams(1, 1, 2, 32, Activation.TANH)
    assert combos[-1] == HyperParams(4, 4, 4, 256, Activation.RELU)


def test_small_grids():
    singleton = GridSpec((1,), (1,), (1,), (32,), (Activation.TANH,))
    assert enumerate_grid(singleton) == [HyperParams(1, 1, 1, 32)]

    six = GridSpec((1,), (1,), (1, 2, 4), (32,), (Activation.TANH, Activation.RELU))
    assert [x.label for x in enumerate_grid(six)] == [
        "1-1-1-32-tanh",
        "1-1-1-32-relu",
        "1-1-2-32-tanh",
        "1-1-2-32-relu",
        "1-1-4-32-tanh",
        "1-1-4-32-relu",
    ]

    with pytest.raises(GridSearchError):
        enumerate_grid(GridSpec(width=()))


def test_select_winner_lowest_loss():
    records = [
        record(0, HyperParams(1, 1, 1, 32), 0.6),
        record(1, HyperParams(1, 1, 1, 64), 0.4),
        record(2, HyperParams(1, 1, 1, 128), 0.5),
    ]
    assert select_winner(records) == 1


def test_select_winner_ties():
    # Equal loss, the smaller network wins
    records = [
        record(0, HyperParams(1, 1, 1, 64), 0.4),
        record(1, HyperParams(1, 1, 1, 32), 0.4),
    ]
    assert select_winner(records) == 1

    # Equal loss and size, the earlier combination wins
    records = [
        record(3, HyperParams(1, 1, 1, 32, Activation.RELU), 0.4),
        record(2, HyperParams(1, 1, 1, 32, Activation.TANH), 0.4),
    ]
    assert select_winner(records) == 1


def test_select_winner_skips_failures():
    records = [
        record(0, HyperParams(1, 1, 1, 32), math.nan, STATUS_FAILED),
        record(1, HyperParams(1, 1, 1, 32), 0.1, STATUS_FAILED),
        record(2, HyperParams(1, 1, 1, 32), 0.9),
    ]
    assert select_winner(records) == 2

    with pytest.raises(GridSearchError):
        select_winner(records[:2])
    with pytest.raises(GridSearchError):
        select_winner([])


def test_combination_seeds():
    assert combination_seeds(0, 5) == combination_seeds(0, 5)
    seeds = {combination_seeds(0, k) for k in range(50)}
    assert len(seeds) == 50
    net_seed, shuffle_seed = combination_seeds(3, 0)
    assert net_seed != shuffle_seed
    assert combination_seeds(3, 0) != combination_seeds(4, 0)


def test_config_digest(small_dataset):
    base = config_digest(QUICK, small_dataset)
    assert config_digest(dataclasses.replace(QUICK, shuffle_seed=99), small_dataset) == base
    assert config_digest(dataclasses.replace(QUICK, learning_rate=0.1), small_dataset) != base


def test_singleton_grid(small_dataset):
    singleton = GridSpec((1,), (1,), (1,), (4,), (Activation.TANH,))
    result = grid_search(small_dataset, singleton, QUICK, base_seed=1)

    assert len(result.records) == 1
    assert result.winner_index == 0
    winner = result.winner
    assert winner.hyper == HyperParams(1, 1, 1, 4)
    assert winner.status == STATUS_OK
    assert math.isfinite(winner.val_loss)
    assert 1 <= winner.best_epoch <= 2
    assert result.variant_id == "stride1_win10"


def test_search_is_reproducible(small_dataset):
    a = grid_search(small_dataset, TINY_GRID, QUICK, base_seed=7)
    b = grid_search(small_dataset, TINY_GRID, QUICK, base_seed=7)
    assert without_timing(a.records) == without_timing(b.records)
    assert a.winner_index == b.winner_index


def test_pool_matches_serial(small_dataset):
    serial = grid_search(small_dataset, TINY_GRID, QUICK, base_seed=2, workers=1)
    pooled = grid_search(small_dataset, TINY_GRID, QUICK, base_seed=2, workers=2)

    assert [x.combo_index for x in pooled.records] == [0, 1, 2, 3]
    assert without_timing(pooled.records) == without_timing(serial.records)
    assert pooled.winner_index == serial.winner_index


def test_failed_combination_is_recorded(monkeypatch, small_dataset):
    real_train = multiprocess_functions.train_combination

    def flaky(data, hyper, base_seed, combo_index, train_config):
        if combo_index == 1:
            raise TrainingError("non-finite loss or gradient", epoch=1, batch=0)
        return real_train(data, hyper, base_seed, combo_index, train_config)

    monkeypatch.setattr(multiprocess_functions, "train_combination", flaky)
    result = grid_search(small_dataset, TINY_GRID, QUICK, base_seed=0)

    assert result.failed_count == 1
    failed = result.records[1]
    assert failed.status == STATUS_FAILED
    assert math.isnan(failed.val_loss)
    assert result.winner_index != 1


def test_all_failed(monkeypatch, small_dataset):
    def always_fails(*args, **kwargs):
        raise TrainingError("diverged")

    monkeypatch.setattr(multiprocess_functions, "train_combination", always_fails)
    with pytest.raises(GridSearchError, match="all 4"):
        grid_search(small_dataset, TINY_GRID, QUICK)


def test_resume_from_leaderboard(monkeypatch, small_dataset):
    LeaderboardCache(TEST_LEADERBOARD_DB_FILE).clear_variant(small_dataset.spec.variant_id)

    first = grid_search(
        small_dataset, TINY_GRID, QUICK, base_seed=5, leaderboard_db=TEST_LEADERBOARD_DB_FILE
    )
    assert first.resumed == []

    # l_in2rec is outermost, so the first four combinations keep their indices
    bigger = dataclasses.replace(TINY_GRID, l_in2rec=(1, 2))
    trained = []
    real_train = multiprocess_functions.train_combination

    def tracking(data, hyper, base_seed, combo_index, train_config):
        trained.append(combo_index)
        return real_train(data, hyper, base_seed, combo_index, train_config)

    monkeypatch.setattr(multiprocess_functions, "train_combination", tracking)
    second = grid_search(
        small_dataset,
        bigger,
        QUICK,
        base_seed=5,
        leaderboard_db=TEST_LEADERBOARD_DB_FILE,
        resume=True,
    )

    assert second.resumed == [0, 1, 2, 3]
    assert sorted(trained) == [4, 5, 6, 7]
    assert without_timing(second.records[:4]) == without_timing(first.records)

    # Other training settings do not reuse the stored records
    trained.clear()
    grid_search(
        small_dataset,
        TINY_GRID,
        dataclasses.replace(QUICK, learning_rate=0.002),
        base_seed=5,
        leaderboard_db=TEST_LEADERBOARD_DB_FILE,
        resume=True,
    )
    assert sorted(trained) == [0, 1, 2, 3]


def test_resume_needs_database(small_dataset):
    with pytest.raises(GridSearchError):
        grid_search(small_dataset, TINY_GRID, QUICK, resume=True)
    with pytest.raises(GridSearchError):
        grid_search(small_dataset, TINY_GRID, QUICK, workers=0)


def test_leaderboard_files(tmp_path: pathlib.Path, monkeypatch, small_dataset):
    real_train = multiprocess_functions.train_combination

    def flaky(data, hyper, base_seed, combo_index, train_config):
        if combo_index == 2:
            raise TrainingError("diverged")
        return real_train(data, hyper, base_seed, combo_index, train_config)

    monkeypatch.setattr(multiprocess_functions, "train_combination", flaky)
    result = grid_search(small_dataset, TINY_GRID, QUICK, base_seed=3)

    csv_path = tmp_path / "leaderboard.csv"
    write_leaderboard_csv(result, csv_path)
    header = csv_path.read_text().splitlines()[0]
    assert header == (
        "combo_index,l_in2rec,l_lstm,l_rec2out,n,activation,val_loss,best_epoch,status,elapsed_ms"
    )

    restored = read_leaderboard_csv(csv_path)
    assert restored[0] == result.records[0]
    assert math.isnan(restored[2].val_loss)
    assert select_winner(restored) == result.winner_index

    json_path = tmp_path / "gridsearch.json"
    write_gridsearch_json(result, json_path)
    summary = json.loads(json_path.read_text())
    assert summary["record_count"] == 4
    assert summary["failed_count"] == 1
    assert "reference" not in summary

    hyper, combo_index, base_seed = read_gridsearch_json(json_path)
    assert hyper == result.winner.hyper
    assert combo_index == result.winner.combo_index
    assert base_seed == 3


def test_leaderboard_read_errors(tmp_path: pathlib.Path):
    with pytest.raises(GridSearchError):
        read_leaderboard_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("combo_index,val_loss\n0,0.5\n")
    with pytest.raises(GridSearchError, match="missing column"):
        read_leaderboard_csv(bad)

    with pytest.raises(GridSearchError):
        read_gridsearch_json(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text('{"winner": {}}')
    with pytest.raises(GridSearchError):
        read_gridsearch_json(broken)


def test_reference_winners():
    assert sorted(REFERENCE_GRID_WINNERS) == [
        "stride1_win120",
        "stride1_win240",
        "stride1_win60",
        "stride2_win120",
        "stride2_win30",
        "stride2_win60",
    ]
    assert REFERENCE_GRID_WINNERS["stride2_win120"].hyper == HyperParams(2, 1, 2, 128)
    best = min(REFERENCE_GRID_WINNERS.values(), key=lambda x: x.val_loss)
    assert best.val_loss == pytest.approx(0.3967)
    # Every reference winner is part of the default grid
    combos = set(enumerate_grid(GridSpec()))
    assert all(x.hyper in combos for x in REFERENCE_GRID_WINNERS.values())
