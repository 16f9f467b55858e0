"""Little-endian helpers shared by the TMRD and TMRC containers."""

import struct

import numpy as np

from errors import FormatError


class ByteReader:
    """Sequential reader over a bytes buffer that fails loudly on truncation."""

    def __init__(self, data, what="file"):
        self.data = data
        self.offset = 0
        self.what = what

    def take(self, size):
        if self.offset + size > len(self.data):
            raise FormatError(f"truncated {self.what} at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def floats(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def text(self):
        return self.take(self.unpack("<I")).decode("utf-8")

    def expect_magic(self, magic):
        if self.take(len(magic)) != magic:
            raise FormatError("bad magic")

    def expect_end(self):
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes in {self.what}")


def pack_text(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_floats(array):
    return np.ascontiguousarray(array, dtype="<f8").tobytes()
