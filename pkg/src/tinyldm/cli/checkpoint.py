"""Checkpoint container: a JSON header you can read with ``head``, then raw little-endian tensors.

Layout::

    tinyldm-checkpoint\\n
    header-bytes: <N>\\n
    <N bytes of UTF-8 JSON: version, tensor manifest, metadata>
    <payload>
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from ..data.corpus import atomic_write_bytes

MAGIC = b"tinyldm-checkpoint\n"
VERSION = 1
_LENGTH_PREFIX = b"header-bytes: "


class CheckpointError(ValueError):
    pass


class CorruptHeader(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class OverlappingOffsets(CheckpointError):
    pass


def _little_endian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind not in "fiub":
        raise TypeError(f"unsupported dtype {a.dtype}")
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def encode_checkpoint(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = _little_endian(arr.data if hasattr(arr, "requires_grad") else arr)
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "payload_length": offset, "tensors": manifest, "metadata": dict(metadata or {})}
    text = json.dumps(header, indent=1, sort_keys=True, allow_nan=False).encode("utf-8")
    return MAGIC + _LENGTH_PREFIX + str(len(text)).encode() + b"\n" + text + b"".join(chunks)


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    """Write atomically; names are dict keys and therefore unique."""
    atomic_write_bytes(path, encode_checkpoint(tensors, metadata))


def decode_header(blob: bytes) -> tuple[dict, int]:
    """Parsed header and the byte offset where the payload starts."""
    if not blob.startswith(MAGIC):
        raise CorruptHeader("not a tinyldm checkpoint (bad magic line)")
    pos = len(MAGIC)
    end = blob.find(b"\n", pos)
    line = blob[pos:end] if end >= 0 else b""
    if not line.startswith(_LENGTH_PREFIX) or not line[len(_LENGTH_PREFIX):].isdigit():
        raise CorruptHeader(f"bad header length line {line[:40]!r}")
    n = int(line[len(_LENGTH_PREFIX):])
    start = end + 1
    if len(blob) < start + n:
        raise CorruptHeader("header cut short")
    try:
        header = json.loads(blob[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or header.get("version") != VERSION:
        raise CorruptHeader(f"unsupported or missing version in header (want {VERSION})")
    for key in ("payload_length", "tensors", "metadata"):
        if key not in header:
            raise CorruptHeader(f"header missing {key!r}")
    return header, start + n


def _check_manifest(manifest, payload_length: int) -> None:
    names, expected = set(), 0
    for entry in manifest:
        try:
            name, dtype, shape = entry["name"], np.dtype(entry["dtype"]), tuple(entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptHeader(f"bad manifest entry {entry!r}") from exc
        if name in names:
            raise CorruptHeader(f"duplicate tensor name {name!r}")
        names.add(name)
        if dtype.byteorder == ">":
            raise CorruptHeader(f"{name}: payload must be little-endian, got {dtype.str}")
        if length != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CorruptHeader(f"{name}: length {length} does not match {dtype.str}{list(shape)}")
        if offset < expected:
            raise OverlappingOffsets(f"{name}: offset {offset} overlaps the previous tensor (ends at {expected})")
        if offset != expected:
            raise CorruptHeader(f"{name}: gap before offset {offset}")
        expected = offset + length
    if expected != payload_length:
        raise TruncatedPayload(f"manifest covers {expected} bytes but payload_length is {payload_length}")


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    header, start = decode_header(blob)
    payload = memoryview(blob)[start:]
    if len(payload) != header["payload_length"]:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header declares {header['payload_length']}")
    _check_manifest(header["tensors"], header["payload_length"])
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["length"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, header["metadata"]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Named tensors and metadata; nothing is returned unless the whole file validates."""
    return decode_checkpoint(Path(path).read_bytes())


def read_manifest(path) -> dict:
    """The header alone (for ``inspect``), validated against the file size."""
    blob = Path(path).read_bytes()
    header, start = decode_header(blob)
    if len(blob) - start != header["payload_length"]:
        raise TruncatedPayload(f"payload has {len(blob) - start} bytes, header declares {header['payload_length']}")
    _check_manifest(header["tensors"], header["payload_length"])
    return header
