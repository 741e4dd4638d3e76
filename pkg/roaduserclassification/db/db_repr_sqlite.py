import enum

from .._compat import StrEnum
import logging
import pathlib
import threading
from typing import Any, Dict, Optional, Protocol

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, exc, mapped_column


def get_engine(local_db_filename: pathlib.Path | str) -> Engine:
    engine = create_engine(
        f"sqlite+pysqlite:///{str(local_db_filename)}",
    )
    return engine


DB_THREADING_LOCK = threading.Lock()


class Cacher(Protocol):
    @property
    def engine(self) -> Engine:
        pass

    @property
    def logger(self) -> logging.Logger:
        pass

    @property
    def session(self) -> Session:
        pass


def wrap_session(func):
    def magic(self: Cacher, *args, **kwargs):
        self.session = Session(self.engine)
        try:
            return func(self, *args, **kwargs)
        finally:
            self.session.close()

    return magic


class Base(DeclarativeBase):
    def _repr(self, **fields: Any) -> str:
        """
        Helper for __repr__
        """
        field_strings = []
        at_least_one_attached_attribute = False
        for key, field in fields.items():
            try:
                field_strings.append(f"{key}={field!r}")
            except exc.DetachedInstanceError:
                field_strings.append(f"{key}=DetachedInstanceError")
            else:
                at_least_one_attached_attribute = True
        if at_least_one_attached_attribute:
            return f"<{self.__class__.__name__}({','.join(field_strings)})>"
        return f"<{self.__class__.__name__} {id(self)}>"


class GridRecordColumnNames(StrEnum):
    """Order of the leaderboard CSV columns"""

    COMBO_INDEX = "combo_index"
    L_IN2REC = "l_in2rec"
    L_LSTM = "l_lstm"
    L_REC2OUT = "l_rec2out"
    N = "n"
    ACTIVATION = "activation"
    VAL_LOSS = "val_loss"
    BEST_EPOCH = "best_epoch"
    STATUS = "status"
    ELAPSED_MS = "elapsed_ms"


class GridRecordRow(Base):
    """One finished grid search combination"""

    __tablename__ = "grid_record"

    variant_id: Mapped[str] = mapped_column(primary_key=True)
    base_seed: Mapped[int] = mapped_column(primary_key=True)
    combo_index: Mapped[int] = mapped_column(primary_key=True)
    # Digest of the training settings, records of other settings are ignored
    config_digest: Mapped[str] = mapped_column(index=True)
    l_in2rec: Mapped[int]
    l_lstm: Mapped[int]
    l_rec2out: Mapped[int]
    n: Mapped[int]
    activation: Mapped[str]
    val_loss: Mapped[Optional[float]]
    best_epoch: Mapped[int]
    status: Mapped[str]
    elapsed_ms: Mapped[int]

    def as_dict(self) -> Dict[str, Any]:
        return {x.value: getattr(self, x.value) for x in GridRecordColumnNames}

    def __repr__(self) -> str:
        return self._repr(
            variant_id=self.variant_id,
            base_seed=self.base_seed,
            combo_index=self.combo_index,
            val_loss=self.val_loss,
            status=self.status,
        )
