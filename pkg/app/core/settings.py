import os
from pathlib import Path

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SAE_LAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    tool_version: str = "0.1.0"
    log_level: str = "INFO"

    seed: int = 0
    out_dir: Path = Path("runs")
    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)

    registry_name: str = "registry.sqlite"


settings = Settings()
