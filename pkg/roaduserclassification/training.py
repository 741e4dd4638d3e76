"""
Minibatch training with Adam and early stopping.

The loss of a sequence is the categorical cross-entropy averaged over all of
its timesteps, the loss of a minibatch is the mean over its sequences.
After every epoch the full validation loss is computed; training stops once
it has not improved for `patience_epochs` epochs in a row and the weights
of the best epoch are restored.
"""

import enum

from ._compat import StrEnum
import json
import logging
import math
import pathlib
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import tqdm

from roaduserclassification.dataset_builder import LabeledDataset
from roaduserclassification.errors import TrainingError
from roaduserclassification.feature_pipeline import FeatureSequence
from roaduserclassification.neural_core import (
    GradientSet,
    Network,
    backward_batch,
    forward_batch,
    stack_sequences,
)
from roaduserclassification.trajectory_model import RoadUserClass

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12
EVAL_BATCH_SIZE = 256


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 32
    patience_epochs: int = 10
    max_epochs: int = 500
    shuffle_seed: int = 0
    # Off unless set, rescales a minibatch gradient whose global norm exceeds it
    clip_norm: Optional[float] = None
    # Asserts finite Adam accumulators after every step
    debug_checks: bool = False

    def validate(self) -> None:
        # A zero learning rate freezes the weights, which is allowed
        if not self.learning_rate >= 0:
            raise TrainingError(f"learning rate must be >= 0, got {self.learning_rate}")
        for name in ["adam_beta1", "adam_beta2"]:
            value = getattr(self, name)
            if not 0 < value < 1:
                raise TrainingError(f"{name} must lie in (0, 1), got {value}")
        if not self.adam_epsilon > 0:
            raise TrainingError(f"adam_epsilon must be positive, got {self.adam_epsilon}")
        for name in ["batch_size", "patience_epochs", "max_epochs"]:
            if getattr(self, name) < 1:
                raise TrainingError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.shuffle_seed < 0:
            raise TrainingError(f"shuffle seed must be non-negative, got {self.shuffle_seed}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise TrainingError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_network(cls, net: Network) -> "AdamState":
        params = net.parameters()
        return cls(
            m=[np.zeros_like(x) for x in params], v=[np.zeros_like(x) for x in params]
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(x)) for x in self.m + self.v)


class StopReason(StrEnum):
    PATIENCE = "patience"
    MAX_EPOCHS = "max_epochs"


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    elapsed_ms: List[int] = field(default_factory=list)
    best_epoch: int = 0  # 1-based, 0 before the first epoch
    stop_reason: Optional[StopReason] = None
    initial_train_loss: float = math.nan
    initial_val_loss: float = math.nan

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    @property
    def best_val_loss(self) -> float:
        if self.best_epoch == 0:
            return math.inf
        return self.val_loss[self.best_epoch - 1]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stop_reason"] = None if self.stop_reason is None else str(self.stop_reason)
        out["best_val_loss"] = self.best_val_loss
        out["epochs"] = self.epochs
        return out


def sequence_loss(probs: np.ndarray, target: RoadUserClass) -> float:
    """Mean over timesteps of -log p_t[target], probabilities floored at 1e-12"""
    picked = np.maximum(probs[:, int(target)], PROBABILITY_FLOOR)
    return float(-np.mean(np.log(picked)))


def evaluate_loss(net: Network, sequences: Sequence[FeatureSequence]) -> float:
    """Mean sequence_loss over a set of equal-length sequences"""
    if len(sequences) == 0:
        raise TrainingError("cannot evaluate the loss of zero sequences")

    losses = []
    for start in range(0, len(sequences), EVAL_BATCH_SIZE):
        chunk = list(sequences[start : start + EVAL_BATCH_SIZE])
        x, _ = stack_sequences(chunk)
        probs = forward_batch(net, x)
        losses += [sequence_loss(p, s.label) for p, s in zip(probs, chunk)]
    return float(np.mean(losses))


def adam_step(
    state: AdamState,
    params: List[np.ndarray],
    grads: GradientSet,
    config: TrainConfig,
) -> Tuple[List[np.ndarray], AdamState]:
    """Bias-corrected Adam update, params are modified in place"""
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step

    for p, g, m, v in zip(params, grads.tensors, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)

    if config.debug_checks and not state.is_finite():
        raise TrainingError(f"non-finite Adam accumulator at step {state.step}")
    return params, state


class Trainer:
    """Runs one training job, owns the network and the optimiser state"""

    def __init__(self, config: TrainConfig, progress: bool = True):
        config.validate()
        self.config = config
        self.progress = progress
        self.logger = logging.getLogger(self.__class__.__name__)

    def _clip(self, grads: GradientSet) -> GradientSet:
        if self.config.clip_norm is None:
            return grads
        norm = grads.global_norm()
        if norm > self.config.clip_norm:
            return grads.scaled(self.config.clip_norm / norm)
        return grads

    def train(self, net: Network, data: LabeledDataset) -> Tuple[Network, TrainHistory]:
        if len(data.train) == 0:
            raise TrainingError("training partition is empty")
        if len(data.validation) == 0:
            raise TrainingError("validation partition is empty")

        config = self.config
        x_train, y_train = stack_sequences(data.train)
        n_train = x_train.shape[0]
        rng = np.random.default_rng(config.shuffle_seed)
        adam = AdamState.for_network(net)
        params = net.parameters()

        history = TrainHistory(
            initial_train_loss=evaluate_loss(net, data.train),
            initial_val_loss=evaluate_loss(net, data.validation),
        )
        self.logger.info(
            f"Training {net.hyper.label} on {n_train} sequences, initial validation "
            f"loss {history.initial_val_loss:.4f}"
        )

        best_params = [x.copy() for x in params]
        epochs_without_improvement = 0
        started = time.perf_counter()

        epochs = tqdm.tqdm(
            range(1, config.max_epochs + 1),
            desc=f"Training {net.hyper.label}",
            disable=not self.progress,
        )
        for epoch in epochs:
            order = rng.permutation(n_train)
            loss_sum = 0.0
            for batch_idx, start in enumerate(range(0, n_train, config.batch_size)):
                idx = order[start : start + config.batch_size]
                grads, loss = backward_batch(net, x_train[idx], y_train[idx])
                if not math.isfinite(loss) or not grads.is_finite():
                    raise TrainingError(
                        "non-finite loss or gradient", epoch=epoch, batch=batch_idx
                    )
                adam_step(adam, params, self._clip(grads), config)
                loss_sum += loss * len(idx)

            val_loss = evaluate_loss(net, data.validation)
            if not math.isfinite(val_loss):
                raise TrainingError("non-finite validation loss", epoch=epoch)

            history.train_loss.append(loss_sum / n_train)
            history.val_loss.append(val_loss)
            history.elapsed_ms.append(int((time.perf_counter() - started) * 1000))

            # Improvement means strictly lower than the best so far
            if val_loss < history.best_val_loss:
                history.best_epoch = epoch
                best_params = [x.copy() for x in params]
                epochs_without_improvement = 0
            else:
                epochs_without_improvement += 1

            epochs.set_postfix(train=f"{loss_sum / n_train:.4f}", val=f"{val_loss:.4f}")
            self.logger.debug(
                f"Epoch {epoch}: train {loss_sum / n_train:.6f}, validation {val_loss:.6f}"
            )

            if epochs_without_improvement >= config.patience_epochs:
                history.stop_reason = StopReason.PATIENCE
                break
        else:
            history.stop_reason = StopReason.MAX_EPOCHS

        net.set_parameters(best_params)
        self.logger.info(
            f"Stopped after {history.epochs} epochs ({history.stop_reason}), best epoch "
            f"{history.best_epoch} with validation loss {history.best_val_loss:.4f}"
        )
        return net, history


def train(
    net: Network, data: LabeledDataset, config: TrainConfig, progress: bool = True
) -> Tuple[Network, TrainHistory]:
    """Trains net in place and returns it with its history"""
    return Trainer(config, progress=progress).train(net, data)


def history_to_frame(history: TrainHistory) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "epoch": np.arange(1, history.epochs + 1),
            "train_loss": history.train_loss,
            "val_loss": history.val_loss,
            "elapsed_ms": history.elapsed_ms,
        }
    )


def write_training_log(history: TrainHistory, path: pathlib.Path) -> None:
    """CSV with one line per epoch: epoch,train_loss,val_loss,elapsed_ms"""
    history_to_frame(history).to_csv(path, index=False, lineterminator="\n")


def write_history_json(history: TrainHistory, path: pathlib.Path) -> None:
    path.write_text(
        json.dumps(history.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
