from typing import Any

from pydantic import BaseModel


class RunManifest(BaseModel):
    """Everything needed to reproduce a run directory's numeric outputs."""

    subcommand: str
    config: dict[str, Any]
    config_hash: str
    seed: int
    tool_version: str
    started_at: str
    finished_at: str
    status: str
    outputs: list[str]
