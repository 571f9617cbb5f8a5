from collections.abc import Mapping, Sequence
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

ARRAY_DTYPE = "<f8"
FORMAT_VERSION = 1


class ArtifactError(Exception):
    pass


class ArtifactNotFoundError(ArtifactError):
    pass


class ArtifactFormatError(ArtifactError):
    pass


def sidecar_path(data_path: Path) -> Path:
    return data_path.with_suffix(".json")


class ArtifactStore:
    """Reads and writes run artifacts under one directory and remembers what it wrote.

    Arrays are stored as little-endian float64, row-major, in ``<name>.bin``
    next to a ``<name>.json`` sidecar describing the layout.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        logger.info("artifact_store_opened root=%s", self.root)

    def _record(self, path: Path) -> Path:
        relative = str(path.relative_to(self.root))
        if relative not in self.outputs:
            self.outputs.append(relative)
        return path

    def path(self, name: str) -> Path:
        return self.root / name

    def write_text(self, name: str, text: str) -> Path:
        path = self.path(name)
        outcome = "unknown"
        try:
            path.write_text(text, encoding="utf-8")
            outcome = "ok"
            return self._record(path)
        except OSError as exc:
            outcome = "os_error"
            raise ArtifactError(f"cannot write {path}: {exc}") from exc
        finally:
            logger.info("artifact_write_text name=%s bytes=%s outcome=%s", name, len(text), outcome)

    def write_json(self, name: str, payload: Any) -> Path:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(repr(value) if isinstance(value, float) else str(value) for value in row))
        return self.write_text(name, "\n".join(lines) + "\n")

    def write_svg(self, name: str, figure: Any) -> Path:
        path = self.path(name)
        outcome = "unknown"
        try:
            # Fixed metadata keeps repeated renders byte-identical.
            figure.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
            outcome = "ok"
            return self._record(path)
        except OSError as exc:
            outcome = "os_error"
            raise ArtifactError(f"cannot write {path}: {exc}") from exc
        finally:
            logger.info("artifact_write_svg name=%s outcome=%s", name, outcome)

    def write_arrays(self, name: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
        """Write several arrays back to back into one ``<name>.bin``."""
        data_path = self.path(f"{name}.bin")
        layout = []
        offset = 0
        chunks = []
        for key, array in arrays.items():
            array = np.ascontiguousarray(array, dtype=ARRAY_DTYPE)
            layout.append({"name": key, "shape": list(array.shape), "offset": offset})
            offset += int(array.size)
            chunks.append(array.tobytes(order="C"))
        sidecar = {
            "format_version": FORMAT_VERSION,
            "dtype": ARRAY_DTYPE,
            "order": "C",
            "arrays": layout,
            "meta": dict(meta or {}),
        }
        outcome = "unknown"
        try:
            data_path.write_bytes(b"".join(chunks))
            self._record(data_path)
            self.write_json(f"{name}.json", sidecar)
            outcome = "ok"
            return data_path
        except OSError as exc:
            outcome = "os_error"
            raise ArtifactError(f"cannot write {data_path}: {exc}") from exc
        finally:
            logger.info("artifact_write_arrays name=%s arrays=%s values=%s outcome=%s", name, len(layout), offset, outcome)

    def write_array(self, name: str, array: np.ndarray, meta: Mapping[str, Any] | None = None) -> Path:
        return self.write_arrays(name, {"data": array}, meta)


def read_arrays(data_path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    data_path = Path(data_path)
    side = sidecar_path(data_path)
    outcome = "unknown"
    try:
        if not data_path.exists() or not side.exists():
            outcome = "missing"
            raise ArtifactNotFoundError(f"expected {data_path} and its sidecar {side}")
        try:
            sidecar = json.loads(side.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            outcome = "bad_sidecar"
            raise ArtifactFormatError(f"{side}:{exc.lineno}: {exc.msg}") from exc
        if sidecar.get("dtype") != ARRAY_DTYPE or sidecar.get("order") != "C":
            outcome = "bad_layout"
            raise ArtifactFormatError(f"{side}: unsupported dtype/order {sidecar.get('dtype')}/{sidecar.get('order')}")

        flat = np.frombuffer(data_path.read_bytes(), dtype=ARRAY_DTYPE)
        arrays: dict[str, np.ndarray] = {}
        for entry in sidecar.get("arrays", []):
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            start = int(entry["offset"])
            if start + size > flat.size:
                outcome = "truncated"
                raise ArtifactFormatError(f"{data_path}: array {entry['name']!r} runs past the end of the file")
            arrays[entry["name"]] = flat[start : start + size].reshape(shape).astype(np.float64)
        outcome = "ok"
        return arrays, dict(sidecar.get("meta", {}))
    finally:
        logger.info("artifact_read_arrays path=%s outcome=%s", data_path, outcome)


def read_array(data_path: Path) -> tuple[np.ndarray, dict[str, Any]]:
    arrays, meta = read_arrays(data_path)
    if "data" in arrays:
        return arrays["data"], meta
    if len(arrays) == 1:
        return next(iter(arrays.values())), meta
    raise ArtifactFormatError(f"{data_path} holds {len(arrays)} arrays; expected a single matrix")


__all__ = [
    "ArtifactError",
    "ArtifactFormatError",
    "ArtifactNotFoundError",
    "ArtifactStore",
    "read_array",
    "read_arrays",
    "sidecar_path",
]
