"""QKEY1 key files: 32-byte header followed by packed bits."""

from __future__ import annotations

import struct
import uuid

import numpy as np

from .sifting import STAGES, KeyMaterial

KEY_MAGIC = b"QKEY1"
_HEADER = struct.Struct("<5sB2xQ16s")  # magic, stage code, pad, bit length, session id


def write_key(path, key: KeyMaterial, session_id: uuid.UUID | bytes) -> None:
    sid = session_id.bytes if isinstance(session_id, uuid.UUID) else bytes(session_id)
    if len(sid) != 16:
        raise ValueError("session id must be 16 bytes")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(KEY_MAGIC, STAGES.index(key.stage), len(key), sid))
        f.write(np.packbits(key.bits).tobytes())


def read_key(path) -> tuple[KeyMaterial, bytes]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"key file shorter than its {_HEADER.size}-byte header")
    magic, stage, nbits, sid = _HEADER.unpack_from(raw, 0)
    if magic != KEY_MAGIC:
        raise ValueError(f"bad magic {magic!r} at byte 0")
    if stage >= len(STAGES):
        raise ValueError(f"unknown stage code {stage} at byte 5")
    need = (nbits + 7) // 8
    if len(raw) - _HEADER.size != need:
        raise ValueError(f"expected {need} payload bytes after byte {_HEADER.size}, found {len(raw) - _HEADER.size}")
    bits = np.unpackbits(np.frombuffer(raw, np.uint8, offset=_HEADER.size))[:nbits]
    return KeyMaterial(bits, STAGES[stage]), sid
