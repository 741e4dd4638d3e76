"""
Command line front end. Each subcommand runs one stage of the pipeline:

  synth    generate a synthetic trajectory collection
  prepare  build dataset variants from a collection manifest
  train    train one network on a dataset variant
  tune     grid search over network hyperparameters
  eval     confusion matrix and F1 scores on a test partition
  curve    per-timestep error ratios on a test partition
  predict  classify a raw trajectory CSV
  inspect  summarise a model, a collection or a trajectory

Exit status is 0 on success, 1 on a pipeline error and 2 on a usage error.
"""

import argparse
import json
import logging
import pathlib
import sys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

from roaduserclassification import config
from roaduserclassification.dataset_builder import (
    STANDARD_VARIANTS,
    DatasetVariantSpec,
    build_all_variants,
    load_dataset_archive,
    load_partition,
    write_dataset_archive,
)
from roaduserclassification.errors import RoadUserError
from roaduserclassification.evaluation import (
    confusion_matrix,
    error_rate_curve,
    f1_report,
    plot_error_curve,
    write_error_curve_csv,
    write_eval_json,
    write_gnuplot_data,
)
from roaduserclassification.feature_pipeline import compute_features, write_feature_dump
from roaduserclassification.model_store import (
    classify_trajectory,
    load_model,
    read_artifact,
    save_model,
)
from roaduserclassification.multiprocess_functions import (
    combination_seeds,
    train_combination,
)
from roaduserclassification.neural_core import Activation, HyperParams, build_network
from roaduserclassification.synthetic import generate_synthetic_collection
from roaduserclassification.training import (
    TrainHistory,
    train,
    write_history_json,
    write_training_log,
)
from roaduserclassification.trajectory_model import (
    RoadUserClass,
    directory_resolver,
    load_collection,
    parse_trajectory_file,
    summarize,
    write_collection,
)
from roaduserclassification.tuning import (
    GridSpec,
    grid_search,
    read_gridsearch_json,
    write_gridsearch_json,
    write_leaderboard_csv,
)

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    """Everything one invocation needs, after flags and config file are merged"""

    subcommand: str
    paths: Dict[str, Optional[pathlib.Path]] = field(default_factory=dict)
    variants: List[DatasetVariantSpec] = field(default_factory=list)
    train_config: config.TrainConfig = field(default_factory=config.TrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    dataset: config.DatasetConfig = field(default_factory=config.DatasetConfig)
    seed: int = 0
    workers: int = 1
    debug_checks: bool = False


def _path(value: Optional[str]) -> Optional[pathlib.Path]:
    return None if value is None else pathlib.Path(value)


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training overrides (default: config file)")
    group.add_argument("--learning-rate", type=float, help="Adam learning rate")
    group.add_argument("--batch-size", type=int, help="Minibatch size")
    group.add_argument("--patience", type=int, help="Early stopping patience in epochs")
    group.add_argument("--max-epochs", type=int, help="Hard cap on epochs")
    group.add_argument("--clip-norm", type=float, help="Gradient norm clip, off if unset")
    group.add_argument(
        "--debug-checks",
        action="store_true",
        help="Assert finite optimiser state after every step",
    )


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="roaduserclassification",
        description="Classifies road users (pedestrian, cyclist, motorcyclist, "
        "passenger car) from GNSS trajectories with an LSTM network trained "
        "from scratch.",
        formatter_class=formatter,
    )
    parser.add_argument("--config", help="INI config file, created with defaults if missing")
    parser.add_argument("--log-file", help="Write the log here instead of stderr")
    parser.add_argument("--log-level", help="Log level, overrides the config file")

    sub = parser.add_subparsers(dest="subcommand", required=True)

    synth = sub.add_parser("synth", help="Generate synthetic trajectories", formatter_class=formatter)
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--seed", type=int, default=0, help="Generator seed")
    synth.add_argument("--per-class", type=int, default=100, help="Trajectories per class")
    synth.add_argument("--duration-s", type=float, default=239.0, help="Duration of each trajectory")
    synth.add_argument("--interval-s", type=float, default=1.0, help="Sampling interval")
    synth.add_argument("--jitter-ms", type=int, default=0, help="Timestamp jitter")

    prepare = sub.add_parser("prepare", help="Build dataset variants", formatter_class=formatter)
    prepare.add_argument("--manifest", required=True, help="Collection manifest JSON")
    prepare.add_argument("--out", required=True, help="Directory receiving stride<k>_win<n>/")
    prepare.add_argument("--stride", type=int, choices=[1, 2], help="Sampling stride")
    prepare.add_argument("--window", type=int, help="Timesteps per sequence")
    prepare.add_argument("--all-variants", action="store_true", help="Build all six variants")
    prepare.add_argument("--seed", type=int, default=0, help="Split seed")
    prepare.add_argument("--test-fraction", type=float, help="Share of sequences for testing")
    prepare.add_argument("--validation-fraction", type=float, help="Share of the rest for validation")
    prepare.add_argument("--max-accuracy-m", type=float, help="Drop fixes less accurate than this")
    prepare.add_argument("--workers", type=int, default=1, help="Parallel file parsing and builds")

    train_p = sub.add_parser("train", help="Train one network", formatter_class=formatter)
    train_p.add_argument("--data", required=True, help="Dataset variant directory")
    train_p.add_argument("--out", required=True, help="Model file (.rnnmodel.json)")
    train_p.add_argument("--from-grid", help="gridsearch.json whose winner is trained")
    train_p.add_argument("--l-in2rec", type=int, default=1, help="Input-to-recurrent dense layers")
    train_p.add_argument("--l-lstm", type=int, default=1, help="Stacked LSTM layers")
    train_p.add_argument("--l-rec2out", type=int, default=1, help="Recurrent-to-output dense layers")
    train_p.add_argument("--width", type=int, default=32, help="Units per hidden layer")
    train_p.add_argument("--activation", choices=[str(x) for x in Activation], default="tanh")
    train_p.add_argument("--seed", type=int, default=0, help="Network initialisation seed")
    train_p.add_argument("--shuffle-seed", type=int, default=0, help="Minibatch shuffling seed")
    train_p.add_argument("--log", help="Per-epoch CSV log")
    train_p.add_argument("--history", help="history.json output")
    _add_training_flags(train_p)

    tune = sub.add_parser("tune", help="Grid search", formatter_class=formatter)
    tune.add_argument("--data", required=True, help="Dataset variant directory")
    tune.add_argument("--out", required=True, help="Directory for leaderboard.csv and gridsearch.json")
    tune.add_argument("--seed", type=int, default=0, help="Base seed of the search")
    tune.add_argument("--workers", type=int, default=1, help="Concurrent training jobs")
    tune.add_argument("--resume", action="store_true", help="Skip combinations already in the leaderboard cache")
    tune.add_argument("--save-winner", help="Also write the winning model here")
    tune.add_argument("--l-in2rec", type=int, nargs="+", help="Grid values, default: config file")
    tune.add_argument("--l-lstm", type=int, nargs="+", help="Grid values, default: config file")
    tune.add_argument("--l-rec2out", type=int, nargs="+", help="Grid values, default: config file")
    tune.add_argument("--width", type=int, nargs="+", help="Grid values, default: config file")
    tune.add_argument("--activation", nargs="+", choices=[str(x) for x in Activation], help="Grid values, default: config file")
    _add_training_flags(tune)

    eval_p = sub.add_parser("eval", help="Confusion matrix and F1", formatter_class=formatter)
    eval_p.add_argument("--model", required=True, help="Model file")
    eval_p.add_argument("--test", required=True, help="Test partition CSV")
    eval_p.add_argument("--out", default="eval.json", help="Output JSON")

    curve = sub.add_parser("curve", help="Per-timestep error ratios", formatter_class=formatter)
    curve.add_argument("--model", required=True, help="Model file")
    curve.add_argument("--test", required=True, help="Test partition CSV")
    curve.add_argument("--out", default="error_curve.csv", help="Output CSV")
    curve.add_argument("--gnuplot", help="Also write a gnuplot data file")
    curve.add_argument("--plot", help="Also render a PNG")

    predict = sub.add_parser("predict", help="Classify a raw trajectory", formatter_class=formatter)
    predict.add_argument("--model", required=True, help="Model file")
    predict.add_argument("--trajectory", required=True, help="Trajectory CSV")
    predict.add_argument("--out", help="Per-timestep probabilities CSV")

    inspect = sub.add_parser("inspect", help="Summarise an artifact", formatter_class=formatter)
    target = inspect.add_mutually_exclusive_group(required=True)
    target.add_argument("--model", help="Model file")
    target.add_argument("--manifest", help="Collection manifest JSON")
    target.add_argument("--trajectory", help="Trajectory CSV")
    inspect.add_argument("--dump-features", help="With --trajectory, write its feature CSV")

    return parser


def build_run_config(
    args: argparse.Namespace, root: config.RootConfigClass, parser: argparse.ArgumentParser
) -> RunConfig:
    """Merges flags over the config file and checks flags that depend on each other"""
    run_config = RunConfig(
        subcommand=args.subcommand,
        train_config=root.training,
        grid=root.grid,
        dataset=root.dataset,
        seed=getattr(args, "seed", 0),
        workers=getattr(args, "workers", 1),
    )

    for name in ["out", "manifest", "data", "model", "test", "trajectory", "log",
                 "history", "from_grid", "gnuplot", "plot", "save_winner", "dump_features"]:
        run_config.paths[name] = _path(getattr(args, name, None))

    if run_config.workers < 1:
        parser.error("--workers must be at least 1")

    if args.subcommand == "prepare":
        if args.all_variants and (args.stride is not None or args.window is not None):
            parser.error("--all-variants cannot be combined with --stride/--window")
        if not args.all_variants:
            if args.stride is None or args.window is None:
                parser.error("prepare needs --stride and --window, or --all-variants")
        if args.all_variants:
            run_config.variants = list(STANDARD_VARIANTS)
        else:
            run_config.variants = [DatasetVariantSpec(args.stride, args.window)]

        run_config.dataset = replace(
            run_config.dataset,
            **{
                k: v
                for k, v in {
                    "test_fraction": args.test_fraction,
                    "validation_fraction": args.validation_fraction,
                    "max_accuracy_m": args.max_accuracy_m,
                }.items()
                if v is not None
            },
        )

    if args.subcommand in ("train", "tune"):
        overrides = {
            "learning_rate": args.learning_rate,
            "batch_size": args.batch_size,
            "patience_epochs": args.patience,
            "max_epochs": args.max_epochs,
            "clip_norm": args.clip_norm,
        }
        train_config = replace(
            run_config.train_config, **{k: v for k, v in overrides.items() if v is not None}
        )
        if args.debug_checks:
            train_config = replace(train_config, debug_checks=True)
        if args.subcommand == "train":
            train_config = replace(train_config, shuffle_seed=args.shuffle_seed)
        run_config.train_config = train_config
        run_config.debug_checks = train_config.debug_checks

    if args.subcommand == "tune":
        grid_overrides = {
            "l_in2rec": args.l_in2rec,
            "l_lstm": args.l_lstm,
            "l_rec2out": args.l_rec2out,
            "width": args.width,
            "activation": None if args.activation is None else [Activation(x) for x in args.activation],
        }
        run_config.grid = replace(
            run_config.grid,
            **{k: tuple(v) for k, v in grid_overrides.items() if v is not None},
        )

    if args.subcommand == "inspect" and args.dump_features and not args.trajectory:
        parser.error("--dump-features needs --trajectory")

    return run_config


def _print_json(data: dict) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def _history_digest(history: TrainHistory) -> dict:
    return {
        "best_epoch": history.best_epoch,
        "epochs": history.epochs,
        "best_val_loss": history.best_val_loss,
        "stop_reason": str(history.stop_reason),
    }


def run_synth(args: argparse.Namespace, rc: RunConfig) -> None:
    collection = generate_synthetic_collection(
        count_per_class=args.per_class,
        duration_s=args.duration_s,
        sample_interval_s=args.interval_s,
        seed=rc.seed,
        jitter_ms=args.jitter_ms,
    )
    manifest = write_collection(collection, rc.paths["out"])
    print(f"Wrote {len(collection)} trajectories, manifest {manifest}")


def run_prepare(args: argparse.Namespace, rc: RunConfig) -> None:
    manifest_path = rc.paths["manifest"]
    collection = load_collection(
        manifest_path.read_bytes(),
        directory_resolver(manifest_path.parent),
        max_accuracy_m=rc.dataset.max_accuracy_m,
        workers=rc.workers,
    )
    datasets = build_all_variants(
        collection,
        rc.seed,
        variants=rc.variants,
        fractions=(rc.dataset.test_fraction, rc.dataset.validation_fraction),
        workers=rc.workers,
    )
    for data in datasets.values():
        variant_dir = write_dataset_archive(data, rc.paths["out"])
        totals = {k: len(v) for k, v in [("train", data.train), ("validation", data.validation), ("test", data.test)]}
        print(f"{variant_dir}: {totals}")


def run_train(args: argparse.Namespace, rc: RunConfig) -> None:
    data = load_dataset_archive(rc.paths["data"])

    if rc.paths["from_grid"] is not None:
        hyper, combo_index, base_seed = read_gridsearch_json(rc.paths["from_grid"])
        net, history = train_combination(data, hyper, base_seed, combo_index, rc.train_config)
        net_seed, shuffle_seed = combination_seeds(base_seed, combo_index)
    else:
        hyper = HyperParams(
            n_in2rec=args.l_in2rec,
            n_lstm=args.l_lstm,
            n_rec2out=args.l_rec2out,
            width=args.width,
            activation=Activation(args.activation),
        )
        net_seed, shuffle_seed = rc.seed, rc.train_config.shuffle_seed
        net, history = train(build_network(hyper, net_seed), data, rc.train_config)

    meta = {
        "variant_id": data.spec.variant_id,
        "split_seed": data.split_seed,
        "network_seed": net_seed,
        "shuffle_seed": shuffle_seed,
        "history": _history_digest(history),
    }
    save_model(net, data.standardizer, meta, rc.paths["out"])

    if rc.paths["log"] is not None:
        write_training_log(history, rc.paths["log"])
    if rc.paths["history"] is not None:
        write_history_json(history, rc.paths["history"])

    print(
        f"Trained {hyper.label}: best epoch {history.best_epoch}, "
        f"validation loss {history.best_val_loss:.4f}, model {rc.paths['out']}"
    )


def run_tune(args: argparse.Namespace, rc: RunConfig) -> None:
    data = load_dataset_archive(rc.paths["data"])
    out_dir = rc.paths["out"]
    out_dir.mkdir(parents=True, exist_ok=True)

    result = grid_search(
        data,
        grid=rc.grid,
        train_config=rc.train_config,
        base_seed=rc.seed,
        workers=rc.workers,
        leaderboard_db=out_dir / "leaderboard.sqlite",
        resume=args.resume,
    )
    write_leaderboard_csv(result, out_dir / "leaderboard.csv")
    write_gridsearch_json(result, out_dir / "gridsearch.json")

    if rc.paths["save_winner"] is not None:
        winner = result.winner
        net, history = train_combination(
            data, winner.hyper, rc.seed, winner.combo_index, rc.train_config
        )
        net_seed, shuffle_seed = combination_seeds(rc.seed, winner.combo_index)
        meta = {
            "variant_id": data.spec.variant_id,
            "split_seed": data.split_seed,
            "network_seed": net_seed,
            "shuffle_seed": shuffle_seed,
            "history": _history_digest(history),
        }
        save_model(net, data.standardizer, meta, rc.paths["save_winner"])

    print(
        f"Winner {result.winner.hyper.label} with validation loss "
        f"{result.winner.val_loss:.4f} ({len(result.records)} combinations)"
    )


def run_eval(args: argparse.Namespace, rc: RunConfig) -> None:
    net, _, meta = load_model(rc.paths["model"])
    test = load_partition(rc.paths["test"])
    cm = confusion_matrix(net, test)
    report = f1_report(cm)
    write_eval_json(cm, report, rc.paths["out"], meta={"model": meta})
    print(f"macro-F1 {report.macro:.4f} over {cm.total} sequences")


def run_curve(args: argparse.Namespace, rc: RunConfig) -> None:
    net, _, meta = load_model(rc.paths["model"])
    test = load_partition(rc.paths["test"])
    curve = error_rate_curve(net, test)
    write_error_curve_csv(curve, rc.paths["out"])
    if rc.paths["gnuplot"] is not None:
        write_gnuplot_data(curve, rc.paths["gnuplot"])
    if rc.paths["plot"] is not None:
        plot_error_curve(curve, rc.paths["plot"], title=str(meta.get("variant_id", "")))
    print(f"Wrote error curve over {curve.steps} timesteps to {rc.paths['out']}")


def _read_trajectory(path: pathlib.Path):
    # The class of a trajectory being classified is unknown, the label is a placeholder
    return parse_trajectory_file(path.read_bytes(), path.stem, RoadUserClass.PEDESTRIAN)


def run_predict(args: argparse.Namespace, rc: RunConfig) -> None:
    net, standardizer, _ = load_model(rc.paths["model"])
    prediction = classify_trajectory(net, standardizer, _read_trajectory(rc.paths["trajectory"]))
    if rc.paths["out"] is not None:
        prediction.to_frame().to_csv(rc.paths["out"], index=False, lineterminator="\n")
    print(prediction.predicted.label)


def run_inspect(args: argparse.Namespace, rc: RunConfig) -> None:
    if rc.paths["model"] is not None:
        artifact = read_artifact(rc.paths["model"])
        net = artifact.network
        _print_json(
            {
                "format_version": artifact.format_version,
                "hyperparams": net.hyper.to_dict(),
                "parameter_count": net.parameter_count(),
                "layers": [
                    f"{name} {list(tensor.shape)}"
                    for name, tensor in zip(net.parameter_names(), net.parameters())
                ],
                "standardizer": artifact.standardizer.to_dict(),
                "meta": artifact.meta,
            }
        )
        return

    if rc.paths["manifest"] is not None:
        manifest_path = rc.paths["manifest"]
        collection = load_collection(
            manifest_path.read_bytes(), directory_resolver(manifest_path.parent)
        )
        summary = summarize(collection)
        _print_json(
            {
                "trajectories": len(collection),
                "counts": {k.label: v for k, v in summary.counts.items()},
                "total_hours": summary.total_hours,
                "duration_shares": {k.label: v for k, v in summary.duration_shares.items()},
            }
        )
        return

    traj = _read_trajectory(rc.paths["trajectory"])
    features = compute_features(traj)
    _print_json(
        {
            "id": traj.id,
            "samples": len(traj),
            "duration_s": traj.duration_s,
        }
    )
    if rc.paths["dump_features"] is not None:
        with open(rc.paths["dump_features"], "w", newline="") as sink:
            write_feature_dump(features, sink)


SUBCOMMANDS = {
    "synth": run_synth,
    "prepare": run_prepare,
    "train": run_train,
    "tune": run_tune,
    "eval": run_eval,
    "curve": run_curve,
    "predict": run_predict,
    "inspect": run_inspect,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        root = config.parse_config(_path(args.config))
        config.init_loggers(
            _path(args.log_file) or root.logging.log_file,
            args.log_level or root.logging.level,
        )
        rc = build_run_config(args, root, parser)
        SUBCOMMANDS[rc.subcommand](args, rc)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    except (RoadUserError, OSError) as e:
        logger.error(str(e))
        print(str(e), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
