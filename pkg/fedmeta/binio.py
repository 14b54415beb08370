"""Little-endian helpers for the FMB1 checkpoint and FMD1 dataset containers."""

import struct

from .errors import TruncatedFileError


class ByteReader:
    """Sequential reader over an in-memory byte string."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.what = what
        self.offset = 0

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise TruncatedFileError(self.what, end - len(self.data))
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack('<' + fmt, self.take(struct.calcsize('<' + fmt)))
        return values[0] if len(values) == 1 else values

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset
