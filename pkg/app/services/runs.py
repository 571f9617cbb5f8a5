from dataclasses import dataclass
from datetime import datetime, timezone
import logging
from pathlib import Path
from typing import Any

from app.clients.artifacts import ArtifactStore
from app.core.db import registry_session
from app.core.settings import settings
from app.cruds.run_records import finish_run_record, start_run_record
from app.schemas.run import RunManifest
from app.utils.hashing import config_hash

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TIMESTAMP_FORMAT = "%Y%m%dT%H%M%SZ"


class RunError(Exception):
    pass


@dataclass
class RunContext:
    subcommand: str
    run_dir: Path
    store: ArtifactStore
    config: dict[str, Any]
    config_hash: str
    seed: int
    started_at: datetime
    resumed: bool = False

    @property
    def run_name(self) -> str:
        return self.run_dir.name


def _utc_now() -> datetime:
    return datetime.now(timezone.utc)


def new_run_dir(out_dir: Path, subcommand: str, digest: str, now: datetime | None = None) -> Path:
    """``<out_dir>/<subcommand>-<UTC timestamp>-<hash8>``, suffixed when the name is taken."""
    stamp = (now or _utc_now()).strftime(TIMESTAMP_FORMAT)
    base = Path(out_dir) / f"{subcommand}-{stamp}-{digest[:8]}"
    candidate = base
    suffix = 2
    while candidate.exists():
        candidate = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    return candidate


def open_run(
    subcommand: str,
    config: dict[str, Any],
    seed: int,
    out_dir: Path,
    resume: Path | None = None,
) -> RunContext:
    digest = config_hash(config)
    if resume is not None:
        run_dir = Path(resume)
        if not run_dir.is_dir():
            raise RunError(f"cannot resume: {run_dir} is not a run directory")
    else:
        run_dir = new_run_dir(out_dir, subcommand, digest)
    store = ArtifactStore(run_dir)
    with registry_session(run_dir) as db:
        start_run_record(
            db,
            run_name=run_dir.name,
            subcommand=subcommand,
            config_hash=digest,
            seed=seed,
            tool_version=settings.tool_version,
        )
    context = RunContext(
        subcommand=subcommand,
        run_dir=run_dir,
        store=store,
        config=config,
        config_hash=digest,
        seed=seed,
        started_at=_utc_now(),
        resumed=resume is not None,
    )
    logger.info(
        "run_opened subcommand=%s run_dir=%s config_hash=%s resumed=%s",
        subcommand,
        run_dir,
        digest[:12],
        context.resumed,
    )
    return context


def finish_run(context: RunContext, status: str = "ok") -> RunManifest:
    outputs = sorted(set(context.store.outputs) | {MANIFEST_NAME, settings.registry_name})
    manifest = RunManifest(
        subcommand=context.subcommand,
        config=context.config,
        config_hash=context.config_hash,
        seed=context.seed,
        tool_version=settings.tool_version,
        started_at=context.started_at.isoformat(),
        finished_at=_utc_now().isoformat(),
        status=status,
        outputs=outputs,
    )
    context.store.write_json(MANIFEST_NAME, manifest.model_dump(mode="json"))
    with registry_session(context.run_dir) as db:
        finish_run_record(db, run_name=context.run_name, status=status, outputs=outputs)
    logger.info("run_finished run_dir=%s status=%s outputs=%s", context.run_dir, status, len(outputs))
    return manifest
