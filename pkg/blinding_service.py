"""
Trusted blinding service.

Generates each round's zero-sum pads, seals every pad to the approved glimmer
measurement, wraps the sealed pad in an envelope for its client and reveals
the pads of dropped clients so a round still closes exactly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from crypto_suite import (
    PUBLIC_KEY_SIZE,
    SIGNATURE_SIZE,
    Pad,
    envelope_decrypt,
    envelope_encrypt,
    gen_pads,
    sign,
    verify,
)
from tee_emulation import Measurement, SealedBlob, TeePlatform, seal, unseal
from utils.bus import MessageBus
from utils.wire import DecodeError, MessageType, Reader, pack_chunks, unpack_chunks

logger = logging.getLogger(__name__)

BLINDING_SERVICE_CODE = b"glimmer-blinding-service/1"
_REVEAL_DOMAIN = b"glimmer-pad-reveal/1"
_STATUS_OK = 0
_STATUS_REFUSED = 1


class BlindingError(Exception):
    """Base class for blinding-service refusals."""

    reason = "BlindingError"


class EmptyRoster(BlindingError, ValueError):
    reason = "EmptyRoster"


class UnknownRound(BlindingError):
    reason = "UnknownRound"


class NotMissing(BlindingError):
    """Refusing to reveal the pad of a client that submitted."""

    reason = "NotMissing"


class NotInRoster(BlindingError):
    reason = "NotInRoster"


class IncompleteProof(BlindingError):
    """missing + accepted does not account for the whole roster."""

    reason = "IncompleteProof"


class Unauthorized(BlindingError):
    reason = "Unauthorized"


_REFUSALS = {cls.reason: cls for cls in (
    EmptyRoster, UnknownRound, NotMissing, NotInRoster, IncompleteProof, Unauthorized,
)}


def pad_envelope_context(round_id: int, client_id: int) -> bytes:
    return b"pad-issue" + struct.pack(">QQ", round_id, client_id)


@dataclass
class RoundRoster:
    """Participants of one round; frozen before any pad is issued."""

    round_id: int
    participants: List[Tuple[int, bytes]]
    approved_measurement: Measurement
    vector_length: int
    frozen: bool = False

    def __post_init__(self):
        ids = [cid for cid, _ in self.participants]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate client ids in roster for round {self.round_id}")
        for cid, key in self.participants:
            if len(key) != PUBLIC_KEY_SIZE:
                raise ValueError(f"client {cid} public key must be {PUBLIC_KEY_SIZE} bytes")
        if self.vector_length < 1:
            raise ValueError("vector length must be >= 1")

    def add(self, client_id: int, public_key: bytes):
        if self.frozen:
            raise ValueError("roster is frozen")
        if client_id in self.client_ids:
            raise ValueError(f"client {client_id} already in roster")
        self.participants.append((client_id, bytes(public_key)))

    def freeze(self) -> "RoundRoster":
        self.frozen = True
        return self

    @property
    def client_ids(self) -> List[int]:
        return [cid for cid, _ in self.participants]

    def __len__(self) -> int:
        return len(self.participants)


@dataclass(frozen=True)
class PadIssue:
    """A sealed pad encrypted to one client's envelope key."""

    round_id: int
    client_id: int
    envelope: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">QQ", self.round_id, self.client_id) + self.envelope

    @classmethod
    def from_bytes(cls, data: bytes) -> "PadIssue":
        reader = Reader(data)
        round_id, client_id = reader.u64(), reader.u64()
        return cls(round_id, client_id, reader.rest())

    def open(self, client_key: X25519PrivateKey) -> SealedBlob:
        """Decrypt the envelope; raises DecryptFailure for any other key."""
        inner = envelope_decrypt(client_key, self.envelope, pad_envelope_context(self.round_id, self.client_id))
        return SealedBlob.from_bytes(inner)


def _pack_ids(ids: Sequence[int]) -> bytes:
    return struct.pack(">I", len(ids)) + b"".join(struct.pack(">Q", cid) for cid in ids)


def _read_ids(reader: Reader) -> List[int]:
    return [reader.u64() for _ in range(reader.u32())]


@dataclass(frozen=True)
class RevealRequest:
    """
    Proof-of-absence request from the aggregation service.

    The service lists who is missing and who was accepted, and signs both with
    its credential key so the blinding service can cross-check the roster.
    """

    round_id: int
    missing: Tuple[int, ...]
    accepted: Tuple[int, ...]
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return (
            _REVEAL_DOMAIN
            + struct.pack(">Q", self.round_id)
            + _pack_ids(self.missing)
            + _pack_ids(self.accepted)
        )

    @classmethod
    def create(
        cls,
        round_id: int,
        missing: Iterable[int],
        accepted: Iterable[int],
        credential: Ed25519PrivateKey,
    ) -> "RevealRequest":
        unsigned = cls(round_id, tuple(sorted(missing)), tuple(sorted(accepted)))
        return cls(unsigned.round_id, unsigned.missing, unsigned.accepted, sign(unsigned.signed_bytes(), credential))

    def to_bytes(self) -> bytes:
        return self.signed_bytes()[len(_REVEAL_DOMAIN):] + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "RevealRequest":
        reader = Reader(data)
        round_id = reader.u64()
        missing = tuple(_read_ids(reader))
        accepted = tuple(_read_ids(reader))
        signature = reader.take(SIGNATURE_SIZE)
        reader.finish()
        return cls(round_id, missing, accepted, signature)


def encode_reveal_response(pads: Sequence[Tuple[int, Pad]]) -> bytes:
    return bytes([_STATUS_OK]) + pack_chunks([struct.pack(">Q", cid) + pad.to_bytes() for cid, pad in pads])


def encode_reveal_refusal(error: BlindingError) -> bytes:
    return bytes([_STATUS_REFUSED]) + pack_chunks([error.reason.encode(), str(error).encode()])


def decode_reveal_response(data: bytes) -> List[Tuple[int, Pad]]:
    """Parse a PAD_REVEAL_RESPONSE; a refusal is re-raised as its BlindingError."""
    if not data:
        raise DecodeError("empty reveal response")
    status, body = data[0], data[1:]
    if status == _STATUS_REFUSED:
        reason, detail = unpack_chunks(body, expected=2)
        raise _REFUSALS.get(reason.decode(), BlindingError)(detail.decode())
    if status != _STATUS_OK:
        raise DecodeError(f"unknown reveal status {status}")
    out = []
    for chunk in unpack_chunks(body):
        if len(chunk) < 8:
            raise DecodeError("reveal entry too short")
        out.append((struct.unpack(">Q", chunk[:8])[0], Pad.from_bytes(chunk[8:])))
    return out


@dataclass
class _RoundRecord:
    roster: RoundRoster
    retained: Dict[int, Union[Pad, SealedBlob]] = field(default_factory=dict)
    revealed: Set[int] = field(default_factory=set)


class BlindingService:
    """
    The trusted pad dealer.

    With host_in_enclave the service runs inside its own enclave and keeps the
    retained pads sealed to that enclave's measurement between issuance and
    reveal.
    """

    def __init__(
        self,
        platform: TeePlatform,
        aggregator_verify_key: Union[Ed25519PublicKey, bytes],
        host_in_enclave: bool = False,
    ):
        self.platform = platform
        self.aggregator_verify_key = aggregator_verify_key
        self.host_in_enclave = host_in_enclave
        self.ctx = platform.launch(BLINDING_SERVICE_CODE)
        self._rounds: Dict[int, _RoundRecord] = {}
        self.disclosures: List[Tuple[int, int]] = []

    def provision_round(self, roster: RoundRoster, seed: bytes) -> List[PadIssue]:
        """
        Issue one sealed, enveloped pad per participant.

        Args:
            roster: Frozen roster of the round
            seed: 32-byte pad seed

        Returns:
            PadIssue list in roster order
        """
        if not roster.frozen:
            raise ValueError("roster must be frozen before pad issuance")
        if len(roster) == 0:
            raise EmptyRoster(f"round {roster.round_id} has no participants")
        if roster.round_id in self._rounds:
            raise ValueError(f"round {roster.round_id} already provisioned")

        pads = gen_pads(len(roster), roster.vector_length, seed, roster.round_id)
        record = _RoundRecord(roster)
        issues = []
        for (client_id, public_key), pad in zip(roster.participants, pads):
            sealed = seal(pad.to_bytes(), roster.approved_measurement, self.ctx)
            envelope = envelope_encrypt(public_key, sealed.to_bytes(), pad_envelope_context(roster.round_id, client_id))
            issues.append(PadIssue(roster.round_id, client_id, envelope))
            if self.host_in_enclave:
                record.retained[client_id] = seal(pad.to_bytes(), self.ctx.measurement, self.ctx)
                pad.zeroize()
            else:
                record.retained[client_id] = pad
        self._rounds[roster.round_id] = record
        logger.info("Provisioned %d pads for round %d", len(issues), roster.round_id)
        return issues

    def _retained_pad(self, record: _RoundRecord, client_id: int) -> Pad:
        held = record.retained[client_id]
        if isinstance(held, SealedBlob):
            return Pad.from_bytes(unseal(held, self.ctx))
        return Pad(held.round_id, held.entries)

    def reveal_dropout_pads(self, request: RevealRequest) -> List[Tuple[int, Pad]]:
        """
        Disclose the retained pads of exactly the missing clients.

        Raises:
            UnknownRound: the round was never provisioned or is already closed
            Unauthorized: the request is not signed by the aggregation service
            NotInRoster: a listed client is not a participant
            NotMissing: a listed client submitted (now or in an earlier request)
            IncompleteProof: missing and accepted do not cover the roster
        """
        record = self._rounds.get(request.round_id)
        if record is None:
            raise UnknownRound(f"round {request.round_id} is not open at the blinding service")
        if not verify(request.signed_bytes(), request.signature, self.aggregator_verify_key):
            raise Unauthorized("reveal request is not signed by the aggregation service")

        roster_ids = set(record.roster.client_ids)
        missing, accepted = set(request.missing), set(request.accepted)
        outsiders = (missing | accepted) - roster_ids
        if outsiders:
            raise NotInRoster(f"clients {sorted(outsiders)} are not in round {request.round_id}")
        both = missing & accepted
        if both:
            raise NotMissing(f"clients {sorted(both)} submitted in round {request.round_id}")
        if missing | accepted != roster_ids:
            unaccounted = sorted(roster_ids - missing - accepted)
            raise IncompleteProof(f"clients {unaccounted} are neither missing nor accepted")
        already = record.revealed & accepted
        if already:
            raise NotMissing(f"clients {sorted(already)} had their pads revealed earlier")

        pads = []
        for client_id in sorted(missing):
            pads.append((client_id, self._retained_pad(record, client_id)))
            record.revealed.add(client_id)
            self.disclosures.append((request.round_id, client_id))
        if pads:
            logger.info(
                "Revealed pads of %d dropped clients for round %d: %s",
                len(pads), request.round_id, [cid for cid, _ in pads],
            )
        return pads

    def request_reveal(self, request: RevealRequest) -> List[Tuple[int, Pad]]:
        return self.reveal_dropout_pads(request)

    def close_round(self, round_id: int):
        """Erase every retained pad of the round."""
        record = self._rounds.pop(round_id, None)
        if record is None:
            return
        for held in record.retained.values():
            if isinstance(held, Pad):
                held.zeroize()
        record.retained.clear()
        logger.debug("Erased retained pads of round %d", round_id)

    def is_open(self, round_id: int) -> bool:
        return round_id in self._rounds

    def retained_count(self, round_id: int) -> int:
        record = self._rounds.get(round_id)
        return len(record.retained) if record else 0

    def handle(self, src: str, tag: MessageType, payload: bytes):
        """Bus handler for PAD_REVEAL_REQUEST."""
        if tag is not MessageType.PAD_REVEAL_REQUEST:
            logger.warning("Blinding service ignored %s from %s", tag.name, src)
            return None
        try:
            pads = self.reveal_dropout_pads(RevealRequest.from_bytes(payload))
        except BlindingError as e:
            logger.info("Refused reveal request from %s: %s", src, e)
            return MessageType.PAD_REVEAL_RESPONSE, encode_reveal_refusal(e)
        return MessageType.PAD_REVEAL_RESPONSE, encode_reveal_response(pads)


class BlindingClient:
    """Aggregation-side stub that reaches the blinding service over the bus."""

    def __init__(self, bus: MessageBus, src: str, dst: str):
        self.bus = bus
        self.src = src
        self.dst = dst

    def request_reveal(self, request: RevealRequest) -> List[Tuple[int, Pad]]:
        reply = self.bus.call(self.src, self.dst, MessageType.PAD_REVEAL_REQUEST, request.to_bytes())
        if reply is None or reply[0] is not MessageType.PAD_REVEAL_RESPONSE:
            raise ConnectionError("blinding service gave no reveal response")
        return decode_reveal_response(reply[1])


def open_pad_issue(issue: PadIssue, client_key: X25519PrivateKey, expected_client: Optional[int] = None) -> SealedBlob:
    if expected_client is not None and issue.client_id != expected_client:
        raise ValueError(f"pad issue addressed to client {issue.client_id}, not {expected_client}")
    return issue.open(client_key)
