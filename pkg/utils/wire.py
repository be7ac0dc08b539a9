"""
Wire protocol helpers shared by every actor.
Each message is a 4-byte big-endian length, a 1-byte type tag, then the payload.
"""

import struct
from enum import IntEnum
from typing import Iterator, List, Sequence, Tuple

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME_SIZE = 64 * 1024 * 1024


class DecodeError(ValueError):
    """Raised when bytes do not parse as the expected layout."""


class MessageType(IntEnum):
    """One-byte message tags of the harness wire protocol."""

    ENROLL = 0x01
    PAD_ISSUE = 0x02
    CONTRIBUTION = 0x03
    ROUND_RESULT = 0x04
    PAD_REVEAL_REQUEST = 0x05
    PAD_REVEAL_RESPONSE = 0x06
    ATTEST_REQUEST = 0x07
    ATTEST_QUOTE = 0x08
    SUBMIT_PRIVATE = 0x09
    SIGNED_RESULT = 0x0A
    VERDICT = 0x0B
    CHALLENGE = 0x0C


def frame(tag: MessageType, payload: bytes) -> bytes:
    """
    Wrap a payload into a length-prefixed frame.

    Args:
        tag: Message type
        payload: Message body

    Returns:
        length (4, big-endian, counts tag + payload) | tag (1) | payload
    """
    body_len = 1 + len(payload)
    if body_len > MAX_FRAME_SIZE:
        raise ValueError(f"Frame of {body_len} bytes exceeds {MAX_FRAME_SIZE}")
    return HEADER.pack(body_len) + bytes([int(tag)]) + payload


def read_frame(data: bytes, offset: int = 0) -> Tuple[MessageType, bytes, int]:
    """
    Decode one frame starting at offset.

    Returns:
        (tag, payload, offset just past the frame)
    """
    if len(data) - offset < HEADER_SIZE:
        raise DecodeError("Truncated frame header")
    (body_len,) = HEADER.unpack_from(data, offset)
    if body_len < 1:
        raise DecodeError("Frame has no type tag")
    if body_len > MAX_FRAME_SIZE:
        raise DecodeError(f"Frame too large: {body_len} bytes")
    start = offset + HEADER_SIZE
    end = start + body_len
    if end > len(data):
        raise DecodeError("Truncated frame body")
    try:
        tag = MessageType(data[start])
    except ValueError:
        raise DecodeError(f"Unknown message tag 0x{data[start]:02x}") from None
    return tag, bytes(data[start + 1:end]), end


def unframe(data: bytes) -> Tuple[MessageType, bytes]:
    """Decode a buffer that must hold exactly one frame."""
    tag, payload, end = read_frame(data)
    if end != len(data):
        raise DecodeError(f"{len(data) - end} trailing bytes after frame")
    return tag, payload


def iter_frames(data: bytes) -> Iterator[Tuple[MessageType, bytes]]:
    offset = 0
    while offset < len(data):
        tag, payload, offset = read_frame(data, offset)
        yield tag, payload


def pack_chunks(chunks: Sequence[bytes]) -> bytes:
    """Concatenate byte strings, each prefixed by its 4-byte big-endian length."""
    return b"".join(HEADER.pack(len(c)) + bytes(c) for c in chunks)


def unpack_chunks(data: bytes, expected: int = -1) -> List[bytes]:
    reader = Reader(data)
    chunks = []
    while not reader.done():
        chunks.append(reader.take(reader.u32()))
    if expected >= 0 and len(chunks) != expected:
        raise DecodeError(f"Expected {expected} chunks, got {len(chunks)}")
    return chunks


class Reader:
    """Cursor over a byte string; every read failure is a DecodeError."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.offset = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise DecodeError(
                f"Need {n} bytes at offset {self.offset}, have {len(self.data) - self.offset}"
            )
        out = self.data[self.offset:self.offset + n]
        self.offset += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def rest(self) -> bytes:
        return self.take(len(self.data) - self.offset)

    def done(self) -> bool:
        return self.offset == len(self.data)

    def finish(self):
        """Fail if unread bytes remain."""
        if not self.done():
            raise DecodeError(f"{len(self.data) - self.offset} unexpected trailing bytes")
