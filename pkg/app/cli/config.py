import json
import logging
from pathlib import Path
import re
from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

FLAGS_SOURCE = "<command line>"

RequestT = TypeVar("RequestT", bound=BaseModel)


class ConfigError(Exception):
    """Rendered as ``<source>:<line>: <field>: <reason>``."""

    def __init__(self, source: str, line: int | None, field: str, reason: str, missing: bool = False) -> None:
        location = f"{source}:{line}" if line is not None else source
        super().__init__(f"{location}: {field}: {reason}")
        self.source = source
        self.line = line
        self.field = field
        self.reason = reason
        self.missing = missing


def key_line(text: str, key: str) -> int:
    """1-based line of the first ``"key":`` in `text`, or 1 when it does not appear."""
    match = re.search(rf'"{re.escape(key)}"\s*:', text)
    if match is None:
        return 1
    return text.count("\n", 0, match.start()) + 1


def load_config_file(path: Path) -> tuple[dict[str, Any], str]:
    source = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(source, None, "<file>", f"cannot read: {exc.strerror or exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(source, exc.lineno, "<json>", exc.msg) from exc
    if not isinstance(payload, dict):
        raise ConfigError(source, 1, "<root>", "expected a JSON object")
    return payload, text


def resolve_request(
    model: type[RequestT],
    flags: dict[str, Any],
    config_path: Path | None = None,
) -> RequestT:
    """Flags override config-file values, which override the model defaults."""
    file_values: dict[str, Any] = {}
    text = ""
    if config_path is not None:
        file_values, text = load_config_file(config_path)
    merged = {**file_values, **flags}
    outcome = "unknown"
    try:
        request = model.model_validate(merged)
        outcome = "ok"
        return request
    except ValidationError as exc:
        outcome = "invalid"
        error = exc.errors()[0]
        loc = error.get("loc", ())
        field = ".".join(str(part) for part in loc) or "<root>"
        top = str(loc[0]) if loc else None
        reason = error.get("msg", "invalid value")
        missing = error.get("type") == "missing"
        if top is not None and top in flags:
            raise ConfigError(FLAGS_SOURCE, None, field, reason, missing) from exc
        if config_path is not None:
            line = key_line(text, top) if top is not None else 1
            raise ConfigError(str(config_path), line, field, reason, missing) from exc
        raise ConfigError(FLAGS_SOURCE, None, field, reason, missing) from exc
    finally:
        logger.info(
            "cli_resolve_request model=%s flags=%s config=%s outcome=%s",
            model.__name__,
            sorted(flags),
            config_path,
            outcome,
        )
