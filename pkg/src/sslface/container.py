"""Versioned binary container for fitted models.

Layout: magic ``SSLF``, little-endian uint16 format version, uint32 header
length, a UTF-8 JSON header (kind, metadata, array directory), the raw array
payload as little-endian float64, and a trailing CRC-32 over the header and
payload bytes. Loads are all-or-nothing: any mismatch raises before any model
object is built.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ModelIOError

MAGIC = b"SSLF"
FORMAT_VERSION = 1


def write_container(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Serialize named float64 arrays plus JSON metadata to ``path``."""
    directory = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        directory[name] = {"offset": offset, "shape": list(np.shape(arr))}
        chunks.append(data)
        offset += len(data)
    header = {"kind": kind, "meta": meta, "arrays": directory, "payload_size": offset}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(chunks)
    crc = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_container(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read back (kind, meta, arrays); raises ModelIOError on any defect."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ModelIOError(f"cannot read {path}: {exc}") from None
    if len(blob) < 14:
        raise ModelIOError(f"{path}: truncated container")
    if blob[:4] != MAGIC:
        raise ModelIOError(f"{path}: bad magic bytes (not an SSLF container)")
    (version,) = struct.unpack("<H", blob[4:6])
    if version > FORMAT_VERSION:
        raise ModelIOError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    (header_len,) = struct.unpack("<I", blob[6:10])
    header_end = 10 + header_len
    if len(blob) < header_end + 4:
        raise ModelIOError(f"{path}: truncated container")
    header_bytes = blob[10:header_end]
    payload = blob[header_end:-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(header_bytes + payload) & 0xFFFFFFFF != stored_crc:
        raise ModelIOError(f"{path}: checksum mismatch (corrupted file)")
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelIOError(f"{path}: corrupt header: {exc}") from None
    if header.get("payload_size") != len(payload):
        raise ModelIOError(f"{path}: payload size mismatch")

    arrays = {}
    for name, entry in header["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(payload):
            raise ModelIOError(f"{path}: array {name!r} extends past payload")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return header["kind"], header["meta"], arrays
