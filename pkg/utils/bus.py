"""
In-process actor bus with optional loopback-socket transport.
Every message crosses as a framed byte string so what the transcript records
is exactly what a network observer would see.
"""

import logging
import socket
import threading
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional, Tuple

from utils.wire import HEADER, HEADER_SIZE, MessageType, frame, unframe

logger = logging.getLogger(__name__)

Reply = Optional[Tuple[MessageType, bytes]]
Handler = Callable[[str, MessageType, bytes], Reply]


class UnknownActor(KeyError):
    """No actor is registered under the destination name."""


@dataclass(frozen=True)
class TranscriptRecord:
    seq: int
    src: str
    dst: str
    tag: MessageType
    payload: bytes

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "src": self.src,
            "dst": self.dst,
            "tag": self.tag.name,
            "payload": self.payload.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TranscriptRecord":
        return cls(
            seq=int(data["seq"]),
            src=data["src"],
            dst=data["dst"],
            tag=MessageType[data["tag"]],
            payload=bytes.fromhex(data["payload"]),
        )


class MessageBus:
    """
    Named actors exchanging framed messages.

    post() queues per destination (FIFO); drain() delivers the queue; call() is a
    synchronous request/response used for RPC-style flights.
    """

    def __init__(self, capture: bool = False):
        self.capture = capture
        self.transcript: List[TranscriptRecord] = []
        self._handlers: Dict[str, Handler] = {}
        self._queues: Dict[str, Deque[Tuple[str, bytes]]] = defaultdict(deque)
        self._seq = 0

    def register(self, name: str, handler: Handler):
        if name in self._handlers:
            raise ValueError(f"actor '{name}' already registered")
        self._handlers[name] = handler

    def unregister(self, name: str):
        self._handlers.pop(name, None)
        self._queues.pop(name, None)

    def is_registered(self, name: str) -> bool:
        return name in self._handlers

    def _carry(self, data: bytes) -> bytes:
        """Move bytes across the transport; identity for the in-process bus."""
        return data

    def _record(self, src: str, dst: str, data: bytes) -> Tuple[MessageType, bytes]:
        tag, payload = unframe(data)
        self._seq += 1
        if self.capture:
            self.transcript.append(TranscriptRecord(self._seq, src, dst, tag, payload))
        return tag, payload

    def _deliver(self, src: str, dst: str, data: bytes) -> Reply:
        handler = self._handlers.get(dst)
        if handler is None:
            raise UnknownActor(dst)
        tag, payload = self._record(src, dst, self._carry(data))
        reply = handler(src, tag, payload)
        if reply is None:
            return None
        reply_tag, reply_payload = self._record(dst, src, self._carry(frame(*reply)))
        return reply_tag, reply_payload

    def post(self, src: str, dst: str, tag: MessageType, payload: bytes):
        if dst not in self._handlers:
            raise UnknownActor(dst)
        self._queues[dst].append((src, frame(tag, payload)))

    def drain(self, dst: str) -> List[Reply]:
        """Deliver every queued message for dst in arrival order."""
        queue = self._queues[dst]
        replies = []
        while queue:
            src, data = queue.popleft()
            replies.append(self._deliver(src, dst, data))
        return replies

    def pending(self, dst: str) -> int:
        return len(self._queues[dst])

    def call(self, src: str, dst: str, tag: MessageType, payload: bytes) -> Reply:
        return self._deliver(src, dst, frame(tag, payload))

    def close(self):
        pass


class SocketBus(MessageBus):
    """MessageBus whose frames travel through a loopback socket pair."""

    def __init__(self, capture: bool = False):
        super().__init__(capture)
        self._tx, self._rx = socket.socketpair()

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            chunk = self._rx.recv(min(n, 1 << 16))
            if not chunk:
                raise ConnectionError("loopback socket closed")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def _carry(self, data: bytes) -> bytes:
        writer = threading.Thread(target=self._tx.sendall, args=(data,), daemon=True)
        writer.start()
        header = self._recv_exact(HEADER_SIZE)
        (body_len,) = HEADER.unpack(header)
        body = self._recv_exact(body_len)
        writer.join()
        return header + body

    def close(self):
        self._tx.close()
        self._rx.close()


def make_bus(transport: str, capture: bool = False) -> MessageBus:
    if transport == "bus":
        return MessageBus(capture)
    if transport == "socket":
        return SocketBus(capture)
    raise ValueError(f"unknown transport '{transport}' (expected bus or socket)")
