"""Tests for the actor bus and its socket transport."""

import pytest

from utils.bus import MessageBus, TranscriptRecord, UnknownActor, make_bus
from utils.wire import MessageType


def echo(src, tag, payload):
    return MessageType.ATTEST_QUOTE, payload[::-1]


@pytest.fixture(params=["bus", "socket"])
def bus(request):
    b = make_bus(request.param, capture=True)
    yield b
    b.close()


class TestMessageBus:
    def test_call_round_trip_is_recorded(self, bus):
        bus.register("host", echo)
        reply = bus.call("client", "host", MessageType.ATTEST_REQUEST, b"abc")
        assert reply == (MessageType.ATTEST_QUOTE, b"cba")
        assert [(r.src, r.dst, r.tag, r.payload) for r in bus.transcript] == [
            ("client", "host", MessageType.ATTEST_REQUEST, b"abc"),
            ("host", "client", MessageType.ATTEST_QUOTE, b"cba"),
        ]

    def test_post_delivers_fifo_on_drain(self, bus):
        seen = []
        bus.register("service", lambda src, tag, payload: seen.append((src, payload)))
        for i in range(3):
            bus.post(f"client:{i}", "service", MessageType.CONTRIBUTION, bytes([i]))
        assert bus.pending("service") == 3
        assert seen == []
        bus.drain("service")
        assert seen == [("client:0", b"\x00"), ("client:1", b"\x01"), ("client:2", b"\x02")]
        assert bus.pending("service") == 0

    def test_unknown_destination(self, bus):
        with pytest.raises(UnknownActor):
            bus.call("client", "nobody", MessageType.ENROLL, b"")
        with pytest.raises(UnknownActor):
            bus.post("client", "nobody", MessageType.ENROLL, b"")

    def test_duplicate_registration(self, bus):
        bus.register("host", echo)
        with pytest.raises(ValueError):
            bus.register("host", echo)

    def test_large_frame_over_transport(self, bus):
        bus.register("host", echo)
        payload = bytes(range(256)) * 2048
        assert bus.call("client", "host", MessageType.SUBMIT_PRIVATE, payload)[1] == payload[::-1]


class TestTranscript:
    def test_capture_off_records_nothing(self):
        bus = MessageBus(capture=False)
        bus.register("host", echo)
        bus.call("client", "host", MessageType.ATTEST_REQUEST, b"x")
        assert bus.transcript == []

    def test_record_dict_form(self):
        record = TranscriptRecord(4, "aggregator", "blinding", MessageType.PAD_REVEAL_REQUEST, b"\x01\xff")
        assert record.to_dict()["tag"] == "PAD_REVEAL_REQUEST"
        assert TranscriptRecord.from_dict(record.to_dict()) == record

    def test_unknown_transport(self):
        with pytest.raises(ValueError):
            make_bus("carrier-pigeon")
