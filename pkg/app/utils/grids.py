import logging
import math

logger = logging.getLogger(__name__)


class GridParseError(ValueError):
    pass


def parse_grid(text: str) -> list[int]:
    """Parse an integer grid.

    Accepted forms: ``4,8,24`` (explicit list), ``2:1024:log`` (powers-of-two
    ratio from the lower bound), ``10:1e5:log4`` (4 points per decade),
    ``1:10:lin`` (every integer). Values are rounded, deduplicated and sorted.
    """
    raw = text.strip()
    if not raw:
        raise GridParseError("grid is empty")

    if ":" not in raw:
        try:
            values = [int(float(part)) for part in raw.split(",") if part.strip()]
        except ValueError as exc:
            raise GridParseError(f"invalid grid list {raw!r}") from exc
        return _finish(raw, values)

    parts = raw.split(":")
    if len(parts) != 3:
        raise GridParseError(f"expected lo:hi:mode, got {raw!r}")
    try:
        lo = float(parts[0])
        hi = float(parts[1])
    except ValueError as exc:
        raise GridParseError(f"invalid grid bounds in {raw!r}") from exc
    mode = parts[2].strip().lower()
    if lo < 1 or hi < lo:
        raise GridParseError(f"grid bounds must satisfy 1 <= lo <= hi, got {raw!r}")

    if mode == "lin":
        values = list(range(int(lo), int(hi) + 1))
    elif mode == "log":
        values = []
        current = lo
        while current <= hi * (1 + 1e-12):
            values.append(int(round(current)))
            current *= 2
    elif mode.startswith("log"):
        try:
            per_decade = int(mode[3:])
        except ValueError as exc:
            raise GridParseError(f"invalid log density in {raw!r}") from exc
        if per_decade < 1:
            raise GridParseError(f"log density must be positive in {raw!r}")
        count = int(math.floor(per_decade * math.log10(hi / lo) + 1e-9)) + 1
        values = [int(round(lo * 10 ** (k / per_decade))) for k in range(count)]
    else:
        raise GridParseError(f"unknown grid mode {mode!r}")
    return _finish(raw, values)


def _finish(raw: str, values: list[int]) -> list[int]:
    result = sorted(set(values))
    if not result:
        raise GridParseError(f"grid {raw!r} has no points")
    if result[0] < 0:
        raise GridParseError(f"grid {raw!r} has negative points")
    logger.debug("parse_grid raw=%s points=%s", raw, len(result))
    return result
