from datetime import datetime

from sqlalchemy import DateTime, Float, Integer, String, UniqueConstraint
from sqlalchemy.orm import Mapped, mapped_column

from app.core.db import Base


class SweepRun(Base):
    """One trained (n, seed) point of a sweep, keyed by the sweep's config hash."""

    __tablename__ = "sweep_runs"
    __table_args__ = (UniqueConstraint("sweep_hash", "n_latents", "seed", name="uq_sweep_point"),)

    id: Mapped[int] = mapped_column(primary_key=True, autoincrement=True)
    sweep_hash: Mapped[str] = mapped_column(String(64), index=True)
    config_hash: Mapped[str] = mapped_column(String(64))
    n_latents: Mapped[int] = mapped_column(Integer)
    seed: Mapped[int] = mapped_column(Integer)
    seed_index: Mapped[int] = mapped_column(Integer)
    status: Mapped[str] = mapped_column(String(16))
    final_loss: Mapped[float | None] = mapped_column(Float, nullable=True)
    loss_stderr: Mapped[float | None] = mapped_column(Float, nullable=True)
    dead_latents: Mapped[int | None] = mapped_column(Integer, nullable=True)
    diverged_step: Mapped[int | None] = mapped_column(Integer, nullable=True)
    wall_ms: Mapped[float] = mapped_column(Float, default=0.0)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
