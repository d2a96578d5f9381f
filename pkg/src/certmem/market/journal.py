"""Append-only journal file: ``CMJL`` magic, version byte, then records.

Each record is a u32 big-endian length followed by that many bytes of
canonical encoding. A torn final record (crash mid-write) is ignored on read
and cut off before the next append.
"""

from __future__ import annotations

import logging
import os
import struct
from pathlib import Path

from ..canon import CONTAINER_VERSION, DecodingError, pack_container

log = logging.getLogger(__name__)

JOURNAL_MAGIC = b"CMJL"
HEADER = pack_container(JOURNAL_MAGIC, b"")
_LEN = struct.Struct(">I")


def scan(data: bytes) -> tuple[list[bytes], int]:
    """Complete records in ``data`` and the byte offset where they end."""
    if len(data) < len(HEADER):
        if HEADER.startswith(data):
            return [], len(data)
        raise DecodingError("not a journal file")
    if data[:4] != JOURNAL_MAGIC:
        raise DecodingError("not a journal file")
    if data[4] != CONTAINER_VERSION:
        raise DecodingError(f"unsupported journal version {data[4]}")
    records, pos = [], len(HEADER)
    while pos + _LEN.size <= len(data):
        (n,) = _LEN.unpack_from(data, pos)
        if pos + _LEN.size + n > len(data):
            break
        records.append(data[pos + _LEN.size : pos + _LEN.size + n])
        pos += _LEN.size + n
    return records, pos


def read_journal(path: str | os.PathLike) -> list[bytes]:
    path = Path(path)
    if not path.exists():
        return []
    return scan(path.read_bytes())[0]


class Journal:
    def __init__(self, path: str | os.PathLike, *, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        if self.path.exists():
            data = self.path.read_bytes()
            _, end = scan(data)
            if end < len(HEADER):
                end = 0
            if end != len(data):
                log.warning("journal %s: dropping %d torn tail bytes", self.path, len(data) - end)
                with open(self.path, "r+b") as fh:
                    fh.truncate(end)
        self._fh = open(self.path, "ab")
        if self._fh.tell() == 0:
            self._fh.write(HEADER)
            self._fh.flush()

    def append(self, record: bytes) -> None:
        self._fh.write(_LEN.pack(len(record)) + record)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()
