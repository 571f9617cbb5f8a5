from collections.abc import Generator
from contextlib import contextmanager
import logging
from pathlib import Path

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from app.core.settings import settings

Base = declarative_base()
logger = logging.getLogger(__name__)


def registry_url(run_dir: Path) -> str:
    return f"sqlite:///{Path(run_dir) / settings.registry_name}"


def create_registry_engine(run_dir: Path) -> Engine:
    return create_engine(
        registry_url(run_dir),
        future=True,
        connect_args={"check_same_thread": False},
    )


def init_db(engine: Engine) -> None:
    # Import models before create_all so metadata is populated.
    from app.models import run_record  # noqa: F401
    from app.models import sweep_run  # noqa: F401

    Base.metadata.create_all(bind=engine)
    logger.info("db_initialized url=%s", engine.url)


@contextmanager
def registry_session(run_dir: Path) -> Generator[Session, None, None]:
    """Session on the run directory's registry, creating the tables on first use."""
    engine = create_registry_engine(run_dir)
    init_db(engine)
    session_factory = sessionmaker(bind=engine, autoflush=False, autocommit=False, future=True)
    db = session_factory()
    try:
        yield db
    finally:
        logger.info("db_session_closed run_dir=%s", run_dir)
        db.close()
        engine.dispose()
