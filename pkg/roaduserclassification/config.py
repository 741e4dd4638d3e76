"""
Module to allow configuration of this program

Settings come from an INI file with the sections [TRAINING], [GRID],
[DATASET] and [LOGGING]. Lists in [GRID] are separated by '|'. Command line
flags override what is read here.
"""

import configparser
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Callable, List, Optional, TypeVar

from roaduserclassification._compat import getLevelNamesMapping
from roaduserclassification.dataset_builder import (
    DEFAULT_TEST_FRACTION,
    DEFAULT_VALIDATION_FRACTION,
)
from roaduserclassification.errors import ConfigError, RoadUserError
from roaduserclassification.neural_core import Activation
from roaduserclassification.training import TrainConfig
from roaduserclassification.tuning import GridSpec

config_parser = configparser.ConfigParser()
conf: "RootConfigClass"

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(filename)s:%(lineno)d %(name)s %(message)s"

T = TypeVar("T")


def init_loggers(log_file: Optional[pathlib.Path] = None, level: str = "INFO") -> None:
    handler: logging.Handler
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_file)
    else:
        handler = logging.StreamHandler()

    logging.basicConfig(
        level=level.upper(),
        format=LOG_FORMAT,
        handlers=[handler],
        force=True,
    )

    for name in ["sqlalchemy", "sqlalchemy.engine", "matplotlib"]:
        logger = logging.getLogger(name)
        logger.setLevel(logging.WARNING)


@dataclass
class DatasetConfig:
    """Split fractions and the optional accuracy filter"""

    test_fraction: float = DEFAULT_TEST_FRACTION
    validation_fraction: float = DEFAULT_VALIDATION_FRACTION
    max_accuracy_m: Optional[float] = None


@dataclass
class LoggingConfig:
    log_file: Optional[pathlib.Path] = None
    level: str = "INFO"


@dataclass
class RootConfigClass:
    """Root container for all config for easy of access to rest of the program"""

    training: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)


def _fill_defaults(parser: configparser.ConfigParser) -> None:
    training = TrainConfig()
    grid = GridSpec()
    dataset = DatasetConfig()

    parser["TRAINING"] = {
        "learning_rate": str(training.learning_rate),
        "adam_beta1": str(training.adam_beta1),
        "adam_beta2": str(training.adam_beta2),
        "adam_epsilon": str(training.adam_epsilon),
        "batch_size": str(training.batch_size),
        "patience_epochs": str(training.patience_epochs),
        "max_epochs": str(training.max_epochs),
        "clip_norm": "",
        "debug_checks": "no",
    }

    parser["GRID"] = {
        "l_in2rec": "|".join(str(x) for x in grid.l_in2rec),
        "l_lstm": "|".join(str(x) for x in grid.l_lstm),
        "l_rec2out": "|".join(str(x) for x in grid.l_rec2out),
        "width": "|".join(str(x) for x in grid.width),
        "activation": "|".join(str(x) for x in grid.activation),
    }

    parser["DATASET"] = {
        "test_fraction": str(dataset.test_fraction),
        "validation_fraction": str(dataset.validation_fraction),
        "max_accuracy_m": "",
    }

    parser["LOGGING"] = {
        "log_file": "",
        "level": "INFO",
    }


def _read(section: configparser.SectionProxy, key: str, convert: Callable[[str], T]) -> T:
    try:
        return convert(section[key])
    except KeyError:
        raise ConfigError(f"[{section.name}] is missing '{key}'") from None
    except (ValueError, RoadUserError) as e:
        raise ConfigError(f"[{section.name}] {key}: {e}") from e


def _optional_float(raw: str) -> Optional[float]:
    return None if raw.strip() == "" else float(raw)


def _boolean(raw: str) -> bool:
    try:
        return config_parser.BOOLEAN_STATES[raw.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: '{raw}'") from None


def _int_list(raw: str) -> List[int]:
    return [int(x) for x in raw.split("|") if x.strip() != ""]


def _activation_list(raw: str) -> List[Activation]:
    return [Activation(x.strip()) for x in raw.split("|") if x.strip() != ""]


def parse_config(config_file: Optional[pathlib.Path] = None) -> RootConfigClass:
    """
    Reads config from file and puts it into RootConfigClass. A config file
    that does not exist yet is created with the defaults.
    """
    config_parser.clear()
    _fill_defaults(config_parser)

    if config_file is not None:
        if config_file.exists():
            if not config_file.is_file():
                raise ConfigError(f"{config_file} exists but is not a file")
            config_parser.read(config_file)
        else:
            config_file.parent.mkdir(parents=True, exist_ok=True)
            with open(config_file, "w") as configfile:
                config_parser.write(configfile)

    training_conf = config_parser["TRAINING"]
    grid_conf = config_parser["GRID"]
    dataset_conf = config_parser["DATASET"]
    logging_conf = config_parser["LOGGING"]

    log_file_raw = logging_conf.get("log_file", "").strip()

    global conf
    conf = RootConfigClass(
        training=TrainConfig(
            learning_rate=_read(training_conf, "learning_rate", float),
            adam_beta1=_read(training_conf, "adam_beta1", float),
            adam_beta2=_read(training_conf, "adam_beta2", float),
            adam_epsilon=_read(training_conf, "adam_epsilon", float),
            batch_size=_read(training_conf, "batch_size", int),
            patience_epochs=_read(training_conf, "patience_epochs", int),
            max_epochs=_read(training_conf, "max_epochs", int),
            clip_norm=_read(training_conf, "clip_norm", _optional_float),
            debug_checks=_read(training_conf, "debug_checks", _boolean),
        ),
        grid=GridSpec(
            l_in2rec=tuple(_read(grid_conf, "l_in2rec", _int_list)),
            l_lstm=tuple(_read(grid_conf, "l_lstm", _int_list)),
            l_rec2out=tuple(_read(grid_conf, "l_rec2out", _int_list)),
            width=tuple(_read(grid_conf, "width", _int_list)),
            activation=tuple(_read(grid_conf, "activation", _activation_list)),
        ),
        dataset=DatasetConfig(
            test_fraction=_read(dataset_conf, "test_fraction", float),
            validation_fraction=_read(dataset_conf, "validation_fraction", float),
            max_accuracy_m=_read(dataset_conf, "max_accuracy_m", _optional_float),
        ),
        logging=LoggingConfig(
            log_file=pathlib.Path(log_file_raw) if log_file_raw else None,
            level=logging_conf.get("level", "INFO").strip().upper(),
        ),
    )

    try:
        conf.training.validate()
        conf.grid.validate()
    except RoadUserError as e:
        raise ConfigError(e.message) from e

    if conf.logging.level not in getLevelNamesMapping():
        raise ConfigError(f"[LOGGING] level: unknown level '{conf.logging.level}'")

    return conf
