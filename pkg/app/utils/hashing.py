import hashlib
import json
import logging
from typing import Any

from pydantic import BaseModel

logger = logging.getLogger(__name__)


def canonical_json(payload: Any) -> str:
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(payload: Any) -> str:
    digest = hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()
    logger.debug("config_hash digest=%s", digest[:12])
    return digest
