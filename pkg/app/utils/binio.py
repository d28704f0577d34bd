"""
Little-endian readers and writers shared by the MELF and ARWK formats
"""

from typing import BinaryIO, Tuple

import numpy as np

from app.exceptions import FormatError


class ByteReader:
    """Sequential reader over an in-memory buffer that reports byte offsets on failure"""

    def __init__(self, data: bytes, label: str = "file"):
        self.data = data
        self.offset = 0
        self.label = label

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def at_end(self) -> bool:
        return self.offset >= len(self.data)

    def take(self, count: int, what: str) -> bytes:
        if count > self.remaining:
            raise FormatError(
                f"{self.label} truncated while reading {what}: need {count} bytes, {self.remaining} left",
                offset=self.offset,
            )
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(size, what), dtype=dtype, count=count)

    def scalar(self, dtype: str, what: str) -> int:
        return int(self.array(dtype, 1, what)[0])

    def magic(self, expected: bytes) -> None:
        start = self.offset
        found = self.take(len(expected), "magic")
        if found != expected:
            raise FormatError(f"bad magic {found!r}, expected {expected!r}", offset=start)


def write_scalar(sink: BinaryIO, dtype: str, value: int) -> None:
    sink.write(np.array([value], dtype=dtype).tobytes())


def write_dims(sink: BinaryIO, dims: Tuple[int, ...]) -> None:
    sink.write(np.asarray(dims, dtype="<u4").tobytes())


def write_f32(sink: BinaryIO, values: np.ndarray) -> None:
    sink.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
