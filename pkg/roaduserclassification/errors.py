"""
Exceptions raised by the pipeline. Every domain error knows which module
raised it so the command line can print a one-line diagnostic.
"""

from typing import Optional


class RoadUserError(Exception):
    """Root of every error this package raises on purpose"""

    module = "roaduserclassification"

    def __init__(self, message: str) -> None:
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{self.module}: {self.message}"


class ConfigError(RoadUserError):
    module = "config"


class TrajectoryFormatError(RoadUserError):
    module = "trajectory_model"


class TrajectoryValidationError(RoadUserError):
    module = "trajectory_model"

    def __init__(self, message: str, row: Optional[int] = None) -> None:
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class CollectionError(RoadUserError):
    module = "trajectory_model"


class FeatureError(RoadUserError):
    module = "feature_pipeline"


class DatasetError(RoadUserError):
    module = "dataset_builder"


class NetworkError(RoadUserError):
    module = "neural_core"


class TrainingError(RoadUserError):
    module = "training"

    def __init__(
        self,
        message: str,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
    ) -> None:
        if epoch is not None:
            context = f"epoch {epoch}"
            if batch is not None:
                context += f", batch {batch}"
            message = f"{context}: {message}"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class GridSearchError(RoadUserError):
    module = "tuning"


class EvaluationError(RoadUserError):
    module = "evaluation"


class ModelStoreError(RoadUserError):
    module = "model_store"
