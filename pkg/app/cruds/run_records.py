from datetime import datetime
import json
import logging

from sqlalchemy import select
from sqlalchemy.orm import Session

from app.models.run_record import RunRecord

logger = logging.getLogger(__name__)


def get_run_record(db: Session, run_name: str) -> RunRecord | None:
    query = select(RunRecord).where(RunRecord.run_name == run_name)
    record = db.execute(query).scalar_one_or_none()
    logger.info("crud_get_run_record run_name=%s found=%s", run_name, record is not None)
    return record


def start_run_record(
    db: Session,
    run_name: str,
    subcommand: str,
    config_hash: str,
    seed: int,
    tool_version: str,
) -> RunRecord:
    """Create the record, or mark an existing one as resumed."""
    record = get_run_record(db, run_name=run_name)
    created = record is None
    if record is None:
        record = RunRecord(
            run_name=run_name,
            subcommand=subcommand,
            config_hash=config_hash,
            seed=seed,
            tool_version=tool_version,
        )
        db.add(record)
    else:
        record.attempts = (record.attempts or 1) + 1
        record.status = "running"
        record.finished_at = None

    db.commit()
    db.refresh(record)
    logger.info(
        "crud_start_run_record run_name=%s subcommand=%s created=%s attempts=%s",
        run_name,
        subcommand,
        created,
        record.attempts,
    )
    return record


def finish_run_record(db: Session, run_name: str, status: str, outputs: list[str]) -> RunRecord | None:
    record = get_run_record(db, run_name=run_name)
    if record is None:
        logger.info("crud_finish_run_record run_name=%s finished=%s reason=missing", run_name, False)
        return None

    record.status = status
    record.outputs = json.dumps(sorted(outputs))
    record.finished_at = datetime.utcnow()
    db.commit()
    db.refresh(record)
    logger.info("crud_finish_run_record run_name=%s status=%s outputs=%s", run_name, status, len(outputs))
    return record
