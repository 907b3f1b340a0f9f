"""Versioned binary checkpoint container.

Layout:
    b"PEPS" | u8 version | u32 LE header length | UTF-8 JSON header |
    float64 LE arrays in header order, row-major

The header is a JSON object whose ``arrays`` entry lists ``{"name", "shape"}``
for every stored array; all other keys are model metadata.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from ..exceptions import PepsCheckpointError
from ..types import FloatArray

logger = logging.getLogger(__name__)

MAGIC = b"PEPS"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sBI")


def encode_checkpoint(metadata: dict[str, Any], arrays: dict[str, FloatArray]) -> bytes:
    """Serialize metadata and named arrays."""
    header = dict(metadata)
    header["arrays"] = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in arrays.values())
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + payload


def decode_checkpoint(data: bytes) -> tuple[dict[str, Any], dict[str, FloatArray]]:
    """Parse a container produced by ``encode_checkpoint``.

    Raises:
        PepsCheckpointError: On bad magic, an unknown version, a malformed
            header or a payload that does not match the declared shapes.
    """
    if len(data) < _PREFIX.size:
        raise PepsCheckpointError("checkpoint is truncated before its header")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise PepsCheckpointError(f"not a pepsnet checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise PepsCheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")

    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
        specs = [(str(item["name"]), tuple(int(n) for n in item["shape"])) for item in header.pop("arrays")]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise PepsCheckpointError(f"malformed checkpoint header: {e}") from e

    offset = start + header_len
    arrays: dict[str, FloatArray] = {}
    for name, shape in specs:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise PepsCheckpointError(f"checkpoint payload truncated in array {name!r}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise PepsCheckpointError(f"{len(data) - offset} trailing bytes after the last array")
    return header, arrays


def save_checkpoint(path: Path, metadata: dict[str, Any], arrays: dict[str, FloatArray]) -> None:
    """Write a checkpoint atomically (temporary file, then rename)."""
    data = encode_checkpoint(metadata, arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote checkpoint {path} ({len(data)} bytes)")


def load_checkpoint(path: Path) -> tuple[dict[str, Any], dict[str, FloatArray]]:
    """Read a checkpoint file.

    Raises:
        PepsCheckpointError: If the file is missing or malformed.
    """
    try:
        data = path.read_bytes()
    except OSError as e:
        raise PepsCheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data)
