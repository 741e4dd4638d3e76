import logging
import pathlib
from typing import Any, Dict

from sqlalchemy.orm import Session

from .db_repr_sqlite import Base, GridRecordRow, get_engine, wrap_session


class LeaderboardCache:
    """Stores finished grid search combinations so a search can be resumed"""

    def __init__(self, db_file: pathlib.Path | str) -> None:
        self.db_file = db_file
        self.engine = get_engine(db_file)
        self.session = Session(self.engine)
        self.logger = logging.getLogger(self.__class__.__name__)

        self.logger.debug(f"Opened leaderboard cache {db_file}")

        Base.metadata.create_all(bind=self.engine)

    @wrap_session
    def completed_records(
        self, variant_id: str, base_seed: int, config_digest: str
    ) -> Dict[int, Dict[str, Any]]:
        rows = (
            self.session.query(GridRecordRow)
            .filter_by(
                variant_id=variant_id,
                base_seed=base_seed,
                config_digest=config_digest,
            )
            .all()
        )
        return {x.combo_index: x.as_dict() for x in rows}

    @wrap_session
    def set_record(
        self,
        variant_id: str,
        base_seed: int,
        config_digest: str,
        record: Dict[str, Any],
    ) -> None:
        combo_index = int(record["combo_index"])
        row = self.session.get(GridRecordRow, (variant_id, base_seed, combo_index))

        if row is None:
            row = GridRecordRow(
                variant_id=variant_id, base_seed=base_seed, combo_index=combo_index
            )
            self.session.add(row)

        row.config_digest = config_digest
        for key, value in record.items():
            if key != "combo_index":
                setattr(row, key, value)

        self.session.flush()
        self.session.commit()

    @wrap_session
    def clear_variant(self, variant_id: str) -> None:
        self.session.query(GridRecordRow).filter_by(variant_id=variant_id).delete()
        self.session.commit()
