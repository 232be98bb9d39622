"""Versioned little-endian container for model weights and training state.

Layout::

    magic b"TPCK" | version u16 | record count u32
    record: name_len u16 | name utf-8 | kind u8 | payload_len u64 | payload

Kind 1 is a float64 tensor (``ndim u8 | dims u32[ndim] | data``); kind 2 is a
UTF-8 JSON document.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"TPCK"
VERSION = 1
_TENSOR = 1
_JSON = 2


class CheckpointError(ValueError):
    pass


def write_records(path, tensors: dict, documents: dict) -> None:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(tensors) + len(documents))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        payload = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
        chunks.append(_record(name, _TENSOR, payload))
    for name, doc in documents.items():
        chunks.append(_record(name, _JSON, json.dumps(doc, sort_keys=True).encode("utf-8")))
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def _record(name: str, kind: int, payload: bytes) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)) + payload


def read_records(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    tensors, documents = OrderedDict(), OrderedDict()
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            kind, plen = struct.unpack_from("<BQ", data, pos)
            pos += 9
        except struct.error:
            raise CheckpointError(f"{path}: truncated record at byte {pos}") from None
        payload = data[pos:pos + plen]
        if len(payload) != plen:
            raise CheckpointError(f"{path}: truncated record {name!r}")
        pos += plen
        if kind == _TENSOR:
            ndim = payload[0]
            shape = struct.unpack_from(f"<{ndim}I", payload, 1)
            tensors[name] = np.frombuffer(payload, dtype="<f8", offset=1 + 4 * ndim).reshape(shape).copy()
        elif kind == _JSON:
            documents[name] = json.loads(payload.decode("utf-8"))
        else:
            raise CheckpointError(f"{path}: unknown record kind {kind} for {name!r}")
    return tensors, documents
