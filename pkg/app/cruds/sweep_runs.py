import logging

from sqlalchemy import select
from sqlalchemy.orm import Session

from app.models.sweep_run import SweepRun
from app.schemas.experiment import SweepRow

logger = logging.getLogger(__name__)


def get_sweep_run(db: Session, sweep_hash: str, n_latents: int, seed: int) -> SweepRun | None:
    query = select(SweepRun).where(
        SweepRun.sweep_hash == sweep_hash,
        SweepRun.n_latents == n_latents,
        SweepRun.seed == seed,
    )
    record = db.execute(query).scalar_one_or_none()
    logger.info(
        "crud_get_sweep_run sweep_hash=%s n=%s seed=%s found=%s",
        sweep_hash[:12],
        n_latents,
        seed,
        record is not None,
    )
    return record


def upsert_sweep_run(db: Session, sweep_hash: str, row: SweepRow) -> SweepRun:
    record = get_sweep_run(db, sweep_hash=sweep_hash, n_latents=row.n, seed=row.seed)
    created = record is None
    if record is None:
        record = SweepRun(sweep_hash=sweep_hash, n_latents=row.n, seed=row.seed)
        db.add(record)
    record.config_hash = row.config_hash
    record.seed_index = row.seed_index
    record.status = row.status
    record.final_loss = row.final_loss
    record.loss_stderr = row.loss_stderr
    record.dead_latents = row.dead_latents
    record.diverged_step = row.diverged_step
    record.wall_ms = row.wall_ms

    db.commit()
    db.refresh(record)
    logger.info(
        "crud_upsert_sweep_run sweep_hash=%s n=%s seed=%s status=%s created=%s",
        sweep_hash[:12],
        row.n,
        row.seed,
        row.status,
        created,
    )
    return record


def list_sweep_rows(db: Session, sweep_hash: str) -> list[SweepRow]:
    query = (
        select(SweepRun)
        .where(SweepRun.sweep_hash == sweep_hash)
        .order_by(SweepRun.n_latents, SweepRun.seed_index)
    )
    rows = [
        SweepRow(
            n=record.n_latents,
            seed=record.seed,
            seed_index=record.seed_index,
            status=record.status,
            final_loss=record.final_loss,
            loss_stderr=record.loss_stderr,
            dead_latents=record.dead_latents,
            diverged_step=record.diverged_step,
            wall_ms=record.wall_ms,
            config_hash=record.config_hash,
        )
        for record in db.execute(query).scalars()
    ]
    logger.info("crud_list_sweep_rows sweep_hash=%s count=%s", sweep_hash[:12], len(rows))
    return rows
