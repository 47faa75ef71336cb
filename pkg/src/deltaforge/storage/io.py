"""Physical file access choke point.

Every footer and data-range read in the engine goes through one FileStore so
cache-effectiveness tests can count actual disk IO.
"""

from __future__ import annotations

import threading
from pathlib import Path

from .columnfile import FileMeta, read_file_meta


class FileStore:
    def __init__(self):
        self._mu = threading.Lock()
        self.footer_reads = 0
        self.data_reads = 0
        self.bytes_read = 0

    def read_meta(self, path: Path) -> FileMeta:
        with self._mu:
            self.footer_reads += 1
        return read_file_meta(path)

    def read_range(self, path: Path, offset: int, length: int) -> bytes:
        with open(path, "rb") as f:
            f.seek(offset)
            data = f.read(length)
        with self._mu:
            self.data_reads += 1
            self.bytes_read += len(data)
        return data

    def total_reads(self) -> int:
        with self._mu:
            return self.footer_reads + self.data_reads

    def counters(self) -> dict[str, int]:
        with self._mu:
            return {
                "footer_reads": self.footer_reads,
                "data_reads": self.data_reads,
                "bytes_read": self.bytes_read,
            }
