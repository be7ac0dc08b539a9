"""
Aggregation service: the web service that wants the next-word model.
Provisions the sealed signing key, admits attested clients, accepts only
endorsed contributions and closes rounds with dropout repair.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Set, Tuple, Union

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from blinding_service import BlindingError, RevealRequest, RoundRoster
from crypto_suite import (
    DTYPE,
    EmptyRound,
    Pad,
    PUBLIC_KEY_SIZE,
    aggregate_unblind,
    derive_key,
    private_bytes,
    public_bytes,
    signing_key_from_seed,
    sum_plain,
)
from glimmer_core import SignedContribution
from tee_emulation import QUOTE_SIZE, Measurement, Quote, SealedBlob, TeePlatform, seal, verify_quote
from utils.bus import UnknownActor
from utils.wire import DecodeError, MessageType, Reader

logger = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_THRESHOLD = 128
PROVISIONING_CODE = b"glimmer-service-provisioning/1"

# Message types a service may ever receive from a client.
SERVICE_INBOUND = frozenset({MessageType.ENROLL, MessageType.CONTRIBUTION, MessageType.PAD_REVEAL_RESPONSE})


class AggregationError(Exception):
    """Base class for aggregation-service failures."""


class BlindingServiceUnavailable(AggregationError):
    """Dropout pads could not be obtained; the round is aborted."""


class RoundStateError(AggregationError):
    """Operation not allowed in the round's current status."""


class RejectReason(str, Enum):
    BAD_SIGNATURE = "BadSignature"
    UNKNOWN_CLIENT = "UnknownClient"
    REPLAY = "Replay"
    ROUND_CLOSED = "RoundClosed"
    ROUND_MISMATCH = "RoundMismatch"
    LOW_CONFIDENCE = "LowConfidence"
    MODE_MISMATCH = "ModeMismatch"
    MALFORMED = "Malformed"


@dataclass(frozen=True)
class AcceptResult:
    accepted: bool
    reason: Optional[RejectReason] = None
    client_id: Optional[int] = None

    def __str__(self) -> str:
        return "Accepted" if self.accepted else f"Rejected({self.reason.value})"


class RoundStatus(str, Enum):
    OPEN = "open"
    FINALIZING = "finalizing"
    CLOSED = "closed"
    ABORTED = "aborted"


@dataclass
class RoundState:
    round_id: int
    roster: RoundRoster
    deadline: int
    public: bool = False
    status: RoundStatus = RoundStatus.OPEN
    accepted: Dict[int, SignedContribution] = field(default_factory=dict)
    decisions: List[AcceptResult] = field(default_factory=list)

    @property
    def vector_length(self) -> int:
        return self.roster.vector_length

    def missing(self) -> List[int]:
        return [cid for cid in self.roster.client_ids if cid not in self.accepted]


@dataclass
class GlobalModel:
    """Published aggregate: exact entry sums over the round's accepted submitters."""

    round_id: int
    sums: np.ndarray
    submitter_count: int

    def __post_init__(self):
        self.sums = np.asarray(self.sums, dtype=DTYPE)

    @property
    def vocab_size(self) -> int:
        return math.isqrt(len(self.sums))

    def to_bytes(self) -> bytes:
        """round_id (8) | N_s (4) | V (4) | sums (8 each)."""
        header = struct.pack(">QII", self.round_id, self.submitter_count, len(self.sums))
        return header + self.sums.astype(">u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "GlobalModel":
        reader = Reader(data)
        round_id, count, length = reader.u64(), reader.u32(), reader.u32()
        sums = np.frombuffer(reader.take(8 * length), dtype=">u8").astype(DTYPE)
        reader.finish()
        return cls(round_id, sums, count)

    def mean_weights(self) -> np.ndarray:
        if self.submitter_count == 0:
            return np.zeros(len(self.sums))
        return self.sums.astype(np.float64) / self.submitter_count


def predict_next(g: GlobalModel, word: int, k: int = 3) -> List[int]:
    """
    Top-k successors of word by summed weight.

    Args:
        g: Closed global model
        word: Predecessor word id
        k: Number of successors to return

    Returns:
        Word ids, heaviest first, ties by ascending id; empty if word has no
        outgoing bigrams or lies outside the vocabulary
    """
    vocab = g.vocab_size
    if vocab * vocab != len(g.sums):
        raise ValueError(f"model of {len(g.sums)} entries is not a square bigram table")
    if not 0 <= word < vocab:
        return []
    row = g.sums[word * vocab:(word + 1) * vocab]
    ranked = sorted((-int(row[b]), b) for b in np.flatnonzero(row))
    return [int(b) for _, b in ranked[:k]]


def enrollment_report_data(client_id: int, envelope_public: bytes) -> bytes:
    return hashlib.sha512(struct.pack(">Q", client_id) + envelope_public).digest()


@dataclass(frozen=True)
class EnrollRequest:
    """client_id (8) | envelope public key (32) | quote (160)."""

    client_id: int
    envelope_public: bytes
    quote: Quote

    def to_bytes(self) -> bytes:
        return struct.pack(">Q", self.client_id) + self.envelope_public + self.quote.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnrollRequest":
        reader = Reader(data)
        client_id = reader.u64()
        envelope_public = reader.take(PUBLIC_KEY_SIZE)
        q = Quote.from_bytes(reader.take(QUOTE_SIZE))
        reader.finish()
        return cls(client_id, envelope_public, q)


class RevealSource(Protocol):
    def request_reveal(self, request: RevealRequest) -> List[Tuple[int, Pad]]: ...


class AggregationService:
    """Round owner for the service side; one instance serializes its rounds."""

    def __init__(
        self,
        platform: TeePlatform,
        approved: Measurement,
        credential_seed: bytes,
        confidence_threshold: int = DEFAULT_CONFIDENCE_THRESHOLD,
        attest_enrollment: bool = True,
    ):
        """
        Args:
            platform: Attestation root provider (only its public key is used for checks)
            approved: Published glimmer measurement
            credential_seed: Seed of the service credential and signing keys
            confidence_threshold: Minimum confidence byte accepted
            attest_enrollment: Require a glimmer quote at enrollment
        """
        if not 0 <= confidence_threshold <= 255:
            raise ValueError("confidence threshold must be a byte value")
        self.approved = approved
        self.attestation_root: Ed25519PublicKey = platform.attestation_public_key
        self.confidence_threshold = confidence_threshold
        self.attest_enrollment = attest_enrollment
        self.credential_key = signing_key_from_seed(credential_seed, b"aggregation-credential")
        self._seed = credential_seed
        self._provisioner = platform.launch(PROVISIONING_CODE)
        self.verify_key: Optional[bytes] = None
        self.enrolled: Dict[int, bytes] = {}
        self.rounds: Dict[int, RoundState] = {}
        self.received_tags: Set[MessageType] = set()
        self._current: Optional[int] = None

    @property
    def credential_public(self) -> bytes:
        return public_bytes(self.credential_key)

    def provision_signing_key(self, approved: Optional[Measurement] = None) -> Tuple[SealedBlob, bytes]:
        """
        Create the endorsement key and seal it to the approved glimmer.

        Returns:
            (sealed private key, verification key); the service keeps only the latter
        """
        approved = approved or self.approved
        sk = signing_key_from_seed(derive_key(self._seed, b"glimmer-endorsement"))
        raw = bytearray(private_bytes(sk))
        sealed = seal(bytes(raw), approved, self._provisioner)
        raw[:] = bytes(len(raw))
        self.verify_key = public_bytes(sk)
        del sk
        logger.info("Provisioned endorsement key sealed to %s", approved.hex()[:16])
        return sealed, self.verify_key

    def enroll(self, request: EnrollRequest) -> bool:
        """Admit a client whose glimmer quote matches the approved measurement."""
        if self.attest_enrollment:
            expected = enrollment_report_data(request.client_id, request.envelope_public)
            if not verify_quote(request.quote, self.approved, self.attestation_root):
                logger.info("Enrollment refused for client %d: quote does not verify", request.client_id)
                return False
            if request.quote.report_data != expected:
                logger.info("Enrollment refused for client %d: quote not bound to its key", request.client_id)
                return False
        if request.client_id in self.enrolled:
            logger.info("Enrollment refused for client %d: already enrolled", request.client_id)
            return False
        self.enrolled[request.client_id] = request.envelope_public
        return True

    def open_round(self, round_id: int, vector_length: int, deadline: int, public: bool = False) -> RoundState:
        if round_id in self.rounds:
            raise RoundStateError(f"round {round_id} already exists")
        roster = RoundRoster(
            round_id,
            sorted(self.enrolled.items()),
            self.approved,
            vector_length,
        ).freeze()
        state = RoundState(round_id, roster, deadline, public)
        self.rounds[round_id] = state
        self._current = round_id
        return state

    def current_round(self) -> Optional[RoundState]:
        return self.rounds.get(self._current) if self._current is not None else None

    def _reject(self, round: RoundState, reason: RejectReason, client_id: Optional[int]) -> AcceptResult:
        result = AcceptResult(False, reason, client_id)
        round.decisions.append(result)
        logger.info("Round %d rejected client %s: %s", round.round_id, client_id, reason.value)
        return result

    def accept(self, sc: Union[SignedContribution, bytes], round: RoundState) -> AcceptResult:
        """
        Gate one contribution into the round.

        Returns:
            Accepted, or Rejected with the first failing check's reason
        """
        if not isinstance(sc, SignedContribution):
            try:
                sc = SignedContribution.from_bytes(sc)
            except DecodeError:
                return self._reject(round, RejectReason.MALFORMED, None)
        cid = sc.client_id

        if round.status is not RoundStatus.OPEN:
            return self._reject(round, RejectReason.ROUND_CLOSED, cid)
        if sc.round_id != round.round_id:
            earlier = self.rounds.get(sc.round_id)
            if earlier is not None and earlier.status is not RoundStatus.OPEN:
                return self._reject(round, RejectReason.ROUND_CLOSED, cid)
            return self._reject(round, RejectReason.ROUND_MISMATCH, cid)
        if cid not in round.roster.client_ids:
            return self._reject(round, RejectReason.UNKNOWN_CLIENT, cid)
        if self.verify_key is None or not sc.verify(self.verify_key):
            return self._reject(round, RejectReason.BAD_SIGNATURE, cid)
        if sc.public != round.public:
            return self._reject(round, RejectReason.MODE_MISMATCH, cid)
        if cid in round.accepted:
            return self._reject(round, RejectReason.REPLAY, cid)
        if len(sc.blinded) != round.vector_length:
            return self._reject(round, RejectReason.MALFORMED, cid)
        if sc.confidence_byte < self.confidence_threshold:
            return self._reject(round, RejectReason.LOW_CONFIDENCE, cid)

        round.accepted[cid] = sc
        result = AcceptResult(True, None, cid)
        round.decisions.append(result)
        return result

    def finalize_round(
        self,
        round: RoundState,
        blinding_client: Optional[RevealSource],
        tick: Optional[int] = None,
    ) -> GlobalModel:
        """
        Close the round and compute the exact aggregate.

        Args:
            round: Open round whose deadline has passed
            blinding_client: Reaches the blinding service for dropout pads
            tick: Current logical time, checked against the deadline

        Raises:
            EmptyRound: no accepted contributions
            BlindingServiceUnavailable: dropout pads could not be obtained
        """
        if round.status is not RoundStatus.OPEN:
            raise RoundStateError(f"round {round.round_id} is {round.status.value}")
        if tick is not None and tick < round.deadline:
            raise RoundStateError(f"round {round.round_id} deadline {round.deadline} not reached at tick {tick}")
        round.status = RoundStatus.FINALIZING

        if not round.accepted:
            round.status = RoundStatus.ABORTED
            raise EmptyRound(f"round {round.round_id} has no accepted contributions")

        contributions = [round.accepted[cid] for cid in sorted(round.accepted)]
        if round.public:
            sums = sum_plain((sc.blinded.entries for sc in contributions), round.vector_length)
        else:
            missing = round.missing()
            pads: List[Pad] = []
            if missing:
                pads = self._fetch_dropout_pads(round, missing, blinding_client)
            sums = aggregate_unblind([sc.blinded for sc in contributions], pads)

        round.status = RoundStatus.CLOSED
        model = GlobalModel(round.round_id, sums, len(contributions))
        logger.info(
            "Round %d closed: %d submitters, %d dropouts",
            round.round_id, len(contributions), len(round.roster) - len(contributions),
        )
        return model

    def _fetch_dropout_pads(self, round: RoundState, missing: Sequence[int], source: Optional[RevealSource]) -> List[Pad]:
        request = RevealRequest.create(round.round_id, missing, round.accepted.keys(), self.credential_key)
        try:
            if source is None:
                raise ConnectionError("no blinding service configured")
            revealed = source.request_reveal(request)
        except (BlindingError, ConnectionError, UnknownActor, DecodeError) as e:
            round.status = RoundStatus.ABORTED
            raise BlindingServiceUnavailable(f"round {round.round_id} aborted: {e}") from e
        if sorted(cid for cid, _ in revealed) != sorted(missing):
            round.status = RoundStatus.ABORTED
            raise BlindingServiceUnavailable(f"round {round.round_id} aborted: reveal did not match the dropouts")
        return [pad for _, pad in revealed]

    def handle(self, src: str, tag: MessageType, payload: bytes):
        """Bus handler: ENROLL is answered, CONTRIBUTION goes to the open round."""
        self.received_tags.add(tag)
        if tag is MessageType.ENROLL:
            try:
                ok = self.enroll(EnrollRequest.from_bytes(payload))
            except DecodeError:
                ok = False
            return MessageType.ENROLL, bytes([1 if ok else 0])
        if tag is MessageType.CONTRIBUTION:
            current = self.current_round()
            if current is None:
                logger.warning("Contribution from %s with no round open", src)
                return None
            self.accept(payload, current)
            return None
        logger.warning("Aggregation service ignored %s from %s", tag.name, src)
        return None
