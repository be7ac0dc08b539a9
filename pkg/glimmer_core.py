"""
The Glimmer enclave program: Validation -> Blinding -> Signing.
Runs inside an EnclaveContext, endorses only validated contributions and wipes
raw inputs before returning on every path.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from crypto_suite import (
    SCALE,
    SIGNATURE_SIZE,
    BlindedVector,
    ModelVector,
    Pad,
    RoundMismatch,
    blind,
    canonical_bytes,
    sign,
    verify,
)
from tee_emulation import (
    EnclaveContext,
    IntegrityFailure,
    PolicyMismatch,
    Quote,
    SealedBlob,
    quote,
    unseal,
    wipe,
)
from utils.wire import DecodeError, Reader, pack_chunks, unpack_chunks

logger = logging.getLogger(__name__)

GLIMMER_MAGIC = b"GLIMMER-CORE\x00"
GLIMMER_VERSION = 1
_SERVICE_KEY_SIZE = 32


class GlimmerError(Exception):
    """Base class for failures inside the glimmer pipeline."""


class ValidationFailed(GlimmerError):
    """The contribution did not pass validation; nothing was signed."""

    def __init__(self, verdict: "ValidationVerdict"):
        super().__init__(f"validation failed: {verdict.reason}")
        self.verdict = verdict


class UnsealFailure(GlimmerError):
    """A sealed pad or signing key could not be opened by this enclave."""


class OutputSizeViolation(GlimmerError):
    """The glimmer tried to emit bytes other than the canonical contribution."""


# ---------------------------------------------------------------------------
# Glimmer code image
# ---------------------------------------------------------------------------


def build_glimmer_code(service_verify_key: bytes, label: bytes = b"glimmer-core") -> bytes:
    """
    Assemble the glimmer binary whose measurement gets published.

    The service's handshake verification key is embedded so the glimmer only
    accepts validators from that service.
    """
    if len(service_verify_key) != _SERVICE_KEY_SIZE:
        raise ValueError("service verification key must be 32 bytes")
    return GLIMMER_MAGIC + struct.pack(">H", GLIMMER_VERSION) + service_verify_key + label


def embedded_service_key(code: bytes) -> Optional[bytes]:
    """Service verification key compiled into the glimmer, or None if absent."""
    header = len(GLIMMER_MAGIC) + 2
    if not code.startswith(GLIMMER_MAGIC) or len(code) < header + _SERVICE_KEY_SIZE:
        return None
    return code[header:header + _SERVICE_KEY_SIZE]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


class PolicyKind(str, Enum):
    RANGE_CHECK = "range"
    CORROBORATION = "corroboration"
    COMPOSITE = "composite"


@dataclass(frozen=True)
class ValidationPolicy:
    """Service-chosen validation predicate; bounds and tolerance are raw units."""

    kind: PolicyKind = PolicyKind.RANGE_CHECK
    lo: int = 0
    hi: int = SCALE
    tolerance: int = 0
    conditional: bool = False
    children: Tuple["ValidationPolicy", ...] = ()

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"policy bounds inverted: lo={self.lo} > hi={self.hi}")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")
        if self.kind is PolicyKind.COMPOSITE and not self.children:
            raise ValueError("composite policy needs at least one child")

    @classmethod
    def range_check(cls, lo: int = 0, hi: int = SCALE) -> "ValidationPolicy":
        return cls(PolicyKind.RANGE_CHECK, lo=lo, hi=hi)

    @classmethod
    def corroboration(cls, tolerance: int = 0, conditional: bool = False) -> "ValidationPolicy":
        return cls(PolicyKind.CORROBORATION, tolerance=tolerance, conditional=conditional)

    @classmethod
    def composite(cls, *children: "ValidationPolicy") -> "ValidationPolicy":
        return cls(PolicyKind.COMPOSITE, children=tuple(children))

    def uses_corroboration(self) -> bool:
        if self.kind is PolicyKind.CORROBORATION:
            return True
        return any(child.uses_corroboration() for child in self.children)

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        if self.kind is PolicyKind.RANGE_CHECK:
            out.update(lo=self.lo, hi=self.hi)
        elif self.kind is PolicyKind.CORROBORATION:
            out.update(tolerance=self.tolerance, conditional=self.conditional)
        else:
            out["children"] = [child.to_dict() for child in self.children]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ValidationPolicy":
        kind = PolicyKind(data["kind"])
        if kind is PolicyKind.RANGE_CHECK:
            return cls.range_check(int(data.get("lo", 0)), int(data.get("hi", SCALE)))
        if kind is PolicyKind.CORROBORATION:
            return cls.corroboration(int(data.get("tolerance", 0)), bool(data.get("conditional", False)))
        return cls.composite(*(cls.from_dict(child) for child in data["children"]))

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ValidationPolicy":
        try:
            return cls.from_dict(json.loads(data))
        except (ValueError, KeyError, TypeError) as e:
            raise DecodeError(f"bad validation policy: {e}") from None


@dataclass(frozen=True)
class ValidationVerdict:
    valid: bool
    confidence: Fraction
    reason: str

    @property
    def confidence_byte(self) -> int:
        return math.floor(self.confidence * 255)


@dataclass
class PrivateValidationData:
    """Keyboard events and auxiliary bytes; lives only inside the glimmer."""

    keyboard_event_log: List[Tuple[int, int]] = field(default_factory=list)
    auxiliary: bytearray = field(default_factory=bytearray)

    def zeroize(self):
        self.keyboard_event_log.clear()
        self.auxiliary[:] = bytes(len(self.auxiliary))

    def copy(self) -> "PrivateValidationData":
        return PrivateValidationData(list(self.keyboard_event_log), bytearray(self.auxiliary))

    def to_bytes(self) -> bytes:
        events = b"".join(struct.pack(">QI", ts, word) for ts, word in self.keyboard_event_log)
        return pack_chunks([events, bytes(self.auxiliary)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "PrivateValidationData":
        events_blob, aux = unpack_chunks(data, expected=2)
        if len(events_blob) % 12:
            raise DecodeError("event log bytes are not a multiple of 12")
        events = [struct.unpack_from(">QI", events_blob, i) for i in range(0, len(events_blob), 12)]
        return cls([(int(ts), int(w)) for ts, w in events], bytearray(aux))


def validate_range(x: ModelVector, policy: ValidationPolicy) -> ValidationVerdict:
    """
    Check every raw entry against the inclusive [lo, hi] bounds.

    Returns:
        Verdict with confidence 1 on success; on failure the reason names the
        first offending index
    """
    if policy.kind is not PolicyKind.RANGE_CHECK:
        raise ValueError("validate_range needs a range-check policy")
    bad = np.flatnonzero((x.entries < policy.lo) | (x.entries > policy.hi))
    if bad.size:
        return ValidationVerdict(False, Fraction(0), f"out_of_range:{int(bad[0])}")
    return ValidationVerdict(True, Fraction(1), "ok")


def validate_corroboration(
    x: ModelVector,
    d: PrivateValidationData,
    policy: ValidationPolicy,
) -> ValidationVerdict:
    """
    Retrain the bigram model from the private event log and compare.

    Valid iff max |x - recomputed| <= tolerance; confidence falls linearly
    from 1 at zero deviation to 0 at the tolerance.
    """
    # Deferred import: client_agent depends on this module.
    from client_agent import EventLog, train_local

    if policy.kind is not PolicyKind.CORROBORATION:
        raise ValueError("validate_corroboration needs a corroboration policy")
    if not d.keyboard_event_log:
        return ValidationVerdict(False, Fraction(0), "empty_log")

    vocab_size = math.isqrt(len(x))
    if vocab_size * vocab_size != len(x):
        return ValidationVerdict(False, Fraction(0), "bad_vector_shape")
    try:
        log = EventLog(list(d.keyboard_event_log), vocab_size)
    except ValueError:
        return ValidationVerdict(False, Fraction(0), "malformed_log")

    recomputed = train_local(log, vocab_size, round_id=x.round_id, conditional=policy.conditional)
    # Unsigned distance; entries span the full uint64 range.
    ours, theirs = x.entries, recomputed.entries
    deviation = np.where(ours >= theirs, ours - theirs, theirs - ours)
    max_dev = int(deviation.max()) if deviation.size else 0
    recomputed.zeroize()

    if max_dev > policy.tolerance:
        return ValidationVerdict(False, Fraction(0), f"uncorroborated:{int(deviation.argmax())}")
    if policy.tolerance == 0:
        return ValidationVerdict(True, Fraction(1), "ok")
    confidence = min(max(Fraction(1) - Fraction(max_dev, policy.tolerance), Fraction(0)), Fraction(1))
    return ValidationVerdict(True, confidence, "ok")


def validate(x: ModelVector, d: PrivateValidationData, policy: ValidationPolicy) -> ValidationVerdict:
    """Dispatch on policy kind; composite is valid iff every child is."""
    if policy.kind is PolicyKind.RANGE_CHECK:
        return validate_range(x, policy)
    if policy.kind is PolicyKind.CORROBORATION:
        return validate_corroboration(x, d, policy)
    verdicts = [validate(x, d, child) for child in policy.children]
    for verdict in verdicts:
        if not verdict.valid:
            return verdict
    return ValidationVerdict(True, min(v.confidence for v in verdicts), "ok")


# ---------------------------------------------------------------------------
# Signed contributions
# ---------------------------------------------------------------------------


@dataclass
class SignedContribution:
    """
    Endorsed output of the glimmer.

    Canonical layout: round_id (8) | client_id (8) | public_flag (1) |
    length (4) | entries (8 each) | confidence (1) | signature (64).
    """

    blinded: BlindedVector
    client_id: int
    confidence_byte: int
    signature: bytes = b""
    public: bool = False

    @property
    def round_id(self) -> int:
        return self.blinded.round_id

    def signed_bytes(self) -> bytes:
        body = canonical_bytes(self.round_id, self.client_id, self.blinded.entries)
        # public_flag sits between client_id and the vector length
        return body[:16] + bytes([1 if self.public else 0]) + body[16:] + bytes([self.confidence_byte])

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignedContribution":
        reader = Reader(data)
        round_id = reader.u64()
        client_id = reader.u64()
        public_flag = reader.u8()
        if public_flag not in (0, 1):
            raise DecodeError(f"public flag must be 0 or 1, got {public_flag}")
        count = reader.u32()
        entries = np.frombuffer(reader.take(8 * count), dtype=">u8").astype(np.uint64)
        confidence = reader.u8()
        signature = reader.take(SIGNATURE_SIZE)
        reader.finish()
        return cls(
            blinded=BlindedVector(round_id, entries),
            client_id=client_id,
            confidence_byte=confidence,
            signature=signature,
            public=bool(public_flag),
        )

    def verify(self, verify_key: bytes) -> bool:
        return verify(self.signed_bytes(), self.signature, verify_key)


def signed_contribution_size(vector_length: int) -> int:
    return 8 + 8 + 1 + 4 + 8 * vector_length + 1 + SIGNATURE_SIZE


def _unseal_or_fail(blob: SealedBlob, ctx: EnclaveContext, what: str) -> bytes:
    try:
        return unseal(blob, ctx)
    except (PolicyMismatch, IntegrityFailure) as e:
        raise UnsealFailure(f"cannot unseal {what}: {e}") from e


def run_glimmer(
    x: ModelVector,
    d: PrivateValidationData,
    sealed_pad: Optional[SealedBlob],
    sealed_sk: SealedBlob,
    policy: ValidationPolicy,
    ctx: EnclaveContext,
    client_id: int,
    public: bool = False,
) -> SignedContribution:
    """
    Execute Validation -> Blinding -> Signing inside ctx.

    Args:
        x: Plaintext contribution (wiped on return)
        d: Private validation data (wiped on return)
        sealed_pad: This client's pad sealed to ctx.measurement (None for public rounds)
        sealed_sk: Service signing key sealed to ctx.measurement
        policy: Validation predicate
        ctx: The glimmer enclave
        client_id: Contributor id bound into the signature
        public: Sign the plaintext instead of blinding it

    Returns:
        SignedContribution whose canonical bytes are the only output

    Raises:
        UnsealFailure: seals were made for a different enclave
        RoundMismatch: pad and contribution rounds differ
        ValidationFailed: the predicate rejected x; nothing is signed
    """
    ctx.require_live()
    heap = ctx.heap
    heap.put("contribution", x.entries)
    heap.put("validation_data", d)
    try:
        sk_bytes = bytearray(_unseal_or_fail(sealed_sk, ctx, "signing key"))
        heap.put("signing_key", sk_bytes)
        pad = None
        if not public:
            if sealed_pad is None:
                raise UnsealFailure("no pad issued for a blinded round")
            pad = Pad.from_bytes(_unseal_or_fail(sealed_pad, ctx, "pad"))
            heap.put("pad", pad.entries)
            if pad.round_id != x.round_id:
                raise RoundMismatch(f"pad is for round {pad.round_id}, contribution for {x.round_id}")

        verdict = validate(x, d, policy)
        if not verdict.valid:
            logger.info("Glimmer refused client %d round %d: %s", client_id, x.round_id, verdict.reason)
            raise ValidationFailed(verdict)

        body = BlindedVector(x.round_id, x.entries) if public else blind(x, pad)
        contribution = SignedContribution(body, client_id, verdict.confidence_byte, public=public)
        signing_key = Ed25519PrivateKey.from_private_bytes(bytes(sk_bytes))
        contribution.signature = sign(contribution.signed_bytes(), signing_key)

        out = contribution.to_bytes()
        if len(out) != signed_contribution_size(len(x)):
            raise OutputSizeViolation(f"glimmer output is {len(out)} bytes")
        return SignedContribution.from_bytes(out)
    finally:
        ctx.zeroize_heap()
        wipe(x.entries)
        d.zeroize()


class GlimmerHandle(Protocol):
    """What a client needs from a glimmer, local or remote."""

    measurement_hex: str

    def attest(self, report_data: bytes) -> Quote: ...

    def process(
        self,
        x: ModelVector,
        d: PrivateValidationData,
        sealed_pad: Optional[SealedBlob],
        sealed_sk: SealedBlob,
        policy: ValidationPolicy,
        client_id: int,
        public: bool = False,
    ) -> SignedContribution: ...


class LocalGlimmer:
    """A glimmer running in an enclave on the client's own device."""

    def __init__(self, ctx: EnclaveContext):
        self.ctx = ctx

    @property
    def measurement_hex(self) -> str:
        return self.ctx.measurement.hex()

    def attest(self, report_data: bytes) -> Quote:
        return quote(self.ctx, report_data)

    def process(self, x, d, sealed_pad, sealed_sk, policy, client_id, public=False):
        return run_glimmer(x, d, sealed_pad, sealed_sk, policy, self.ctx, client_id, public)


# ---------------------------------------------------------------------------
# Request codec (used by remote glimmer hosts)
# ---------------------------------------------------------------------------


def encode_glimmer_request(
    x: ModelVector,
    d: PrivateValidationData,
    sealed_pad: Optional[SealedBlob],
    sealed_sk: SealedBlob,
    policy: ValidationPolicy,
    client_id: int,
    public: bool,
) -> bytes:
    return pack_chunks([
        struct.pack(">QB", client_id, 1 if public else 0),
        x.to_bytes(),
        d.to_bytes(),
        sealed_pad.to_bytes() if sealed_pad is not None else b"",
        sealed_sk.to_bytes(),
        policy.to_bytes(),
    ])


def decode_glimmer_request(data: bytes):
    """Inverse of encode_glimmer_request; returns the run_glimmer arguments as a tuple."""
    header, x_bytes, d_bytes, pad_bytes, sk_bytes, policy_bytes = unpack_chunks(data, expected=6)
    if len(header) != 9:
        raise DecodeError("bad request header")
    client_id, public = struct.unpack(">QB", header)
    return (
        ModelVector.from_bytes(x_bytes),
        PrivateValidationData.from_bytes(d_bytes),
        SealedBlob.from_bytes(pad_bytes) if pad_bytes else None,
        SealedBlob.from_bytes(sk_bytes),
        ValidationPolicy.from_bytes(policy_bytes),
        client_id,
        bool(public),
    )


def verdict_reason_code(reason: str) -> str:
    """Strip the index suffix: 'out_of_range:12' -> 'out_of_range'."""
    return reason.split(":", 1)[0]


__all__: Sequence[str] = [
    "GlimmerError", "GlimmerHandle", "LocalGlimmer", "OutputSizeViolation", "PolicyKind",
    "PrivateValidationData", "SignedContribution", "UnsealFailure", "ValidationFailed",
    "ValidationPolicy", "ValidationVerdict", "build_glimmer_code", "decode_glimmer_request",
    "embedded_service_key", "encode_glimmer_request", "run_glimmer", "signed_contribution_size",
    "validate", "validate_corroboration", "validate_range",
]
