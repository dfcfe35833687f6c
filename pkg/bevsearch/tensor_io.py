"""
TSR1 tensor container
Binary layout: b"TSR1", u32 rank, u32 dims..., little-endian f64 payload
"""

import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Optional, Tuple

import numpy as np

from .errors import DataError

MAGIC = b"TSR1"
SIDECAR_VERSION = "1.0"


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_tensor(fh: BinaryIO, array: np.ndarray) -> int:
    """Write one TSR1 record; returns the number of bytes written"""
    array = np.ascontiguousarray(array, dtype="<f8")
    head = MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    body = array.tobytes(order="C")
    fh.write(head)
    fh.write(body)
    return len(head) + len(body)


def read_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode the record starting at ``offset``; returns (array, next offset)"""
    if buffer[offset:offset + 4] != MAGIC:
        raise DataError(f"bad magic at byte {offset}: expected {MAGIC!r}")
    try:
        (rank,) = struct.unpack_from("<I", buffer, offset + 4)
        dims = struct.unpack_from(f"<{rank}I", buffer, offset + 8)
    except struct.error as e:
        raise DataError(f"truncated TSR1 header at byte {offset}") from e
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    end = start + 8 * count
    if end > len(buffer):
        raise DataError(f"truncated TSR1 payload at byte {offset}: need {end - start} bytes")
    array = np.frombuffer(buffer, dtype="<f8", count=count, offset=start).reshape(dims)
    return array.astype(np.float64), end


def save_bundle(path, tensors: Mapping[str, np.ndarray], header: Optional[Dict[str, Any]] = None) -> Path:
    """
    Write named tensors to ``path`` and their byte offsets to ``path.json``.

    The sidecar also carries a free-form ``header`` (dims, vocab maps, ...).
    Names are written in mapping order so output bytes are reproducible.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    offsets: Dict[str, int] = {}
    position = 0
    with open(path, "wb") as fh:
        for name, array in tensors.items():
            offsets[name] = position
            position += write_tensor(fh, np.asarray(array))
    sidecar = {"version": SIDECAR_VERSION, "header": header or {}, "offsets": offsets}
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def load_bundle(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a bundle written by save_bundle; returns (tensors in sidecar order, header)"""
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise DataError(f"tensor file not found: {path}")
    if not side.exists():
        raise DataError(f"sidecar not found: {side}")
    try:
        with open(side, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        offsets: Dict[str, int] = sidecar["offsets"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DataError(f"malformed sidecar {side}: {e}") from e
    buffer = path.read_bytes()
    tensors: Dict[str, np.ndarray] = {}
    for name, offset in offsets.items():
        if not isinstance(offset, int) or offset < 0 or offset >= max(len(buffer), 1):
            raise DataError(f"offset for {name!r} outside {path}")
        tensors[name], _ = read_tensor(buffer, offset)
    return tensors, sidecar.get("header", {})
