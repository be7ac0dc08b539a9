"""
Confidential validation.

The service ships an encrypted validation policy into the glimmer over an
attestation-bound channel. The glimmer answers each challenge with a fixed
89-byte verdict message carrying one bit, and a host-side runtime auditor
drops anything that does not match that public format.

Policy language (JSON):
    ["and", e, ...] | ["or", e, ...] | ["not", e]
    [op, a, b] with op in >=, >, <=, <, ==, !=
    ["signal", name]          value of a named client signal
    ["count"]                 number of interaction events
    ["count", lo, hi]         events with lo <= timestamp < hi
    numbers, true, false
"""

from __future__ import annotations

import json
import logging
import operator
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from crypto_suite import (
    PUBLIC_KEY_SIZE,
    SIGNATURE_SIZE,
    BindingFailure,
    CryptoError,
    Role,
    SecureChannel,
    akx_handshake,
    handshake_report_data,
    public_bytes,
    sign,
    sign_handshake,
    verify,
)
from glimmer_core import UnsealFailure, embedded_service_key
from tee_emulation import (
    QUOTE_SIZE,
    EnclaveContext,
    IntegrityFailure,
    Measurement,
    PolicyMismatch,
    Quote,
    SealedBlob,
    quote,
    unseal,
)
from utils.wire import DecodeError

logger = logging.getLogger(__name__)

NONCE_SIZE = 16
VERDICT_SIGNED_SIZE = 8 + NONCE_SIZE + 1
VERDICT_MESSAGE_SIZE = VERDICT_SIGNED_SIZE + SIGNATURE_SIZE

_COMPARISONS = {
    ">=": operator.ge,
    ">": operator.gt,
    "<=": operator.le,
    "<": operator.lt,
    "==": operator.eq,
    "!=": operator.ne,
}


class ConfidentialError(Exception):
    """Base class for confidential-validation failures."""


class MalformedPolicy(ConfidentialError, ValueError):
    """Policy bytes do not parse as the policy language."""


class EvaluationError(ConfidentialError):
    """Policy could not be evaluated over the given signals."""


class NotInstalled(ConfidentialError):
    """No validator has been delivered to this glimmer."""


# ---------------------------------------------------------------------------
# Policy language
# ---------------------------------------------------------------------------


def _check(node: Any, path: str = "$") -> None:
    if isinstance(node, bool) or isinstance(node, (int, float)):
        return
    if not isinstance(node, list) or not node or not isinstance(node[0], str):
        raise MalformedPolicy(f"{path}: expected a literal or [operator, ...]")
    op, args = node[0], node[1:]
    if op in ("and", "or"):
        if not args:
            raise MalformedPolicy(f"{path}: '{op}' needs at least one operand")
    elif op == "not":
        if len(args) != 1:
            raise MalformedPolicy(f"{path}: 'not' takes one operand")
    elif op in _COMPARISONS:
        if len(args) != 2:
            raise MalformedPolicy(f"{path}: '{op}' takes two operands")
    elif op == "signal":
        if len(args) != 1 or not isinstance(args[0], str):
            raise MalformedPolicy(f"{path}: 'signal' takes one name")
        return
    elif op == "count":
        if len(args) not in (0, 2) or any(isinstance(a, bool) or not isinstance(a, (int, float)) for a in args):
            raise MalformedPolicy(f"{path}: 'count' takes no operands or a numeric [lo, hi)")
        return
    else:
        raise MalformedPolicy(f"{path}: unknown operator '{op}'")
    for i, arg in enumerate(args, start=1):
        _check(arg, f"{path}[{i}]")


def parse_policy(data: Union[bytes, str]) -> Any:
    """Parse and structurally check policy source; raises MalformedPolicy."""
    try:
        tree = json.loads(data)
    except (ValueError, UnicodeDecodeError) as e:
        raise MalformedPolicy(f"policy is not valid JSON: {e}") from None
    _check(tree)
    return tree


@dataclass
class SignalRecord:
    """Client-side signals the policy is evaluated over; stays on the client."""

    signals: Dict[str, float] = field(default_factory=dict)
    interactions: List[int] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        return json.dumps(
            {"signals": self.signals, "interactions": self.interactions},
            sort_keys=True, separators=(",", ":"),
        ).encode()

    @classmethod
    def from_dict(cls, data: dict) -> "SignalRecord":
        return cls(
            signals={str(k): v for k, v in (data.get("signals") or {}).items()},
            interactions=[int(t) for t in data.get("interactions") or []],
        )


def evaluate(node: Any, record: SignalRecord) -> Union[bool, float]:
    if isinstance(node, (bool, int, float)):
        return node
    op, args = node[0], node[1:]
    if op == "and":
        return all(_as_bool(evaluate(a, record)) for a in args)
    if op == "or":
        return any(_as_bool(evaluate(a, record)) for a in args)
    if op == "not":
        return not _as_bool(evaluate(args[0], record))
    if op == "signal":
        if args[0] not in record.signals:
            raise EvaluationError(f"signal '{args[0]}' not present")
        return record.signals[args[0]]
    if op == "count":
        if not args:
            return len(record.interactions)
        lo, hi = args
        return sum(1 for t in record.interactions if lo <= t < hi)
    left = _as_number(evaluate(args[0], record), op)
    right = _as_number(evaluate(args[1], record), op)
    return _COMPARISONS[op](left, right)


def _as_bool(value) -> bool:
    if not isinstance(value, bool):
        raise EvaluationError("boolean operator applied to a number")
    return value


def _as_number(value, op: str) -> Union[int, float]:
    # bool is an int subclass; signals may carry any JSON value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise EvaluationError(f"'{op}' compares numbers only, got {type(value).__name__}")
    return value


# ---------------------------------------------------------------------------
# Verdict message and auditor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VerdictMessage:
    """round_id (8) | nonce echo (16) | verdict (1) | signature (64) over the first 25 bytes."""

    round_id: int
    nonce: bytes
    verdict: int
    signature: bytes

    def signed_bytes(self) -> bytes:
        return struct.pack(">Q", self.round_id) + self.nonce + bytes([self.verdict])

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "VerdictMessage":
        if len(data) != VERDICT_MESSAGE_SIZE:
            raise DecodeError(f"verdict message must be {VERDICT_MESSAGE_SIZE} bytes")
        (round_id,) = struct.unpack(">Q", data[:8])
        return cls(round_id, data[8:24], data[24], data[25:])


class AuditReason(str, Enum):
    BAD_LENGTH = "BadLength"
    BAD_VERDICT_BYTE = "BadVerdictByte"
    BAD_NONCE = "BadNonce"
    BAD_SIGNATURE = "BadSignature"


@dataclass(frozen=True)
class AuditResult:
    passed: bool
    reason: Optional[AuditReason] = None

    def __str__(self) -> str:
        return "Pass" if self.passed else f"Fail({self.reason.value})"


def audit_message(
    data: bytes,
    expected_nonce: bytes,
    verify_key: Union[Ed25519PublicKey, bytes],
) -> AuditResult:
    """Pass only an exactly well-formed verdict message for the outstanding challenge."""
    if len(data) != VERDICT_MESSAGE_SIZE:
        return AuditResult(False, AuditReason.BAD_LENGTH)
    if data[24] not in (0, 1):
        return AuditResult(False, AuditReason.BAD_VERDICT_BYTE)
    if data[8:24] != expected_nonce:
        return AuditResult(False, AuditReason.BAD_NONCE)
    if not verify(data[:VERDICT_SIGNED_SIZE], data[VERDICT_SIGNED_SIZE:], verify_key):
        return AuditResult(False, AuditReason.BAD_SIGNATURE)
    return AuditResult(True)


class RuntimeAuditor:
    """Host-side interposer on the glimmer's outbound verdict channel."""

    def __init__(self, verify_key: Union[Ed25519PublicKey, bytes]):
        self.verify_key = verify_key
        self.outstanding: Optional[bytes] = None
        self.results: List[AuditResult] = []

    def challenge(self, nonce: bytes) -> bytes:
        if len(nonce) != NONCE_SIZE:
            raise ValueError(f"challenge nonce must be {NONCE_SIZE} bytes")
        if self.outstanding is not None:
            raise ValueError("a challenge is already outstanding")
        self.outstanding = bytes(nonce)
        return self.outstanding

    def audit(self, data: bytes) -> AuditResult:
        if self.outstanding is None:
            result = AuditResult(False, AuditReason.BAD_NONCE)
        else:
            result = audit_message(data, self.outstanding, self.verify_key)
            if result.passed:
                self.outstanding = None
        self.results.append(result)
        if not result.passed:
            logger.info("Auditor dropped verdict message: %s", result.reason.value)
        return result


# ---------------------------------------------------------------------------
# Bound channel between service and glimmer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SecretValidator:
    version: int
    ciphertext: bytes


class ConfidentialGlimmer:
    """Glimmer side: holds the policy only in its enclave heap."""

    def __init__(self, ctx: EnclaveContext, sealed_sk: SealedBlob):
        self.ctx = ctx
        self.sealed_sk = sealed_sk
        self._channel: Optional[SecureChannel] = None

    @property
    def measurement(self) -> Measurement:
        return self.ctx.measurement

    def hello(self) -> bytes:
        """Flight 1: a fresh ephemeral handshake value."""
        self.ctx.require_live()
        ephemeral = X25519PrivateKey.generate()
        self.ctx.heap.put("handshake_ephemeral", ephemeral)
        return public_bytes(ephemeral)

    def finish(self, service_public: bytes, service_signature: bytes) -> Quote:
        """
        Flight 3: check the service signature against the compiled-in key and
        answer with a quote over both handshake values.

        Raises:
            BindingFailure: the service did not sign with the embedded key
        """
        ephemeral = self.ctx.heap.get("handshake_ephemeral")
        if ephemeral is None:
            raise BindingFailure("handshake not started")
        service_key = embedded_service_key(self.ctx.code)
        if service_key is None:
            raise BindingFailure("glimmer has no embedded service key")
        own = public_bytes(ephemeral)
        q = quote(self.ctx, handshake_report_data(own, service_public))
        keys = akx_handshake(
            Role.INITIATOR, ephemeral, service_public, service_signature, q,
            peer_verify_key=service_key,
        )
        self._channel = SecureChannel(keys)
        return q

    def install(self, sv: SecretValidator) -> bytes:
        """Decrypt and parse the validator; the acknowledgement carries only the version."""
        if self._channel is None:
            raise BindingFailure("no bound channel")
        plaintext = self._channel.open(sv.ciphertext)
        try:
            tree = parse_policy(plaintext)
        finally:
            plaintext = b""
        self.ctx.heap.put("validator", tree)
        self.ctx.heap.put("validator_version", sv.version)
        return self._channel.seal(struct.pack(">I", sv.version))

    def verdict(self, signals: SignalRecord, nonce: bytes, round_id: int) -> bytes:
        """Evaluate the installed policy and emit the fixed-format verdict message."""
        self.ctx.require_live()
        tree = self.ctx.heap.get("validator")
        if tree is None:
            raise NotInstalled("no validator installed")
        if len(nonce) != NONCE_SIZE:
            raise ValueError(f"challenge nonce must be {NONCE_SIZE} bytes")
        try:
            bit = 1 if evaluate(tree, signals) is True else 0
        except EvaluationError as e:
            logger.debug("Policy evaluation failed, verdict 0: %s", e)
            bit = 0
        try:
            sk_bytes = unseal(self.sealed_sk, self.ctx)
        except (PolicyMismatch, IntegrityFailure) as e:
            raise UnsealFailure(f"cannot unseal verdict key: {e}") from e
        unsigned = VerdictMessage(round_id, bytes(nonce), bit, b"")
        signature = sign(unsigned.signed_bytes(), Ed25519PrivateKey.from_private_bytes(sk_bytes))
        out = VerdictMessage(round_id, bytes(nonce), bit, signature).to_bytes()
        assert len(out) == VERDICT_MESSAGE_SIZE
        return out


class ValidationService:
    """Service side of confidential validation: owns the secret policy."""

    def __init__(
        self,
        handshake_key: Ed25519PrivateKey,
        approved: Measurement,
        attestation_root: Union[Ed25519PublicKey, bytes],
        policy_source: bytes,
        version: int = 1,
    ):
        parse_policy(policy_source)
        self.handshake_key = handshake_key
        self.approved = approved
        self.attestation_root = attestation_root
        self._policy = bytes(policy_source)
        self.version = version

    @property
    def verify_key(self) -> bytes:
        return public_bytes(self.handshake_key)

    def respond(self, glimmer_public: bytes) -> Tuple[X25519PrivateKey, bytes, bytes]:
        """Flight 2: own ephemeral value and a signature binding both values."""
        if len(glimmer_public) != PUBLIC_KEY_SIZE:
            raise BindingFailure("glimmer handshake value has the wrong size")
        ephemeral = X25519PrivateKey.generate()
        own = public_bytes(ephemeral)
        return ephemeral, own, sign_handshake(self.handshake_key, own, glimmer_public)

    def complete(self, ephemeral: X25519PrivateKey, glimmer_public: bytes, signature: bytes, q: Quote) -> SecureChannel:
        keys = akx_handshake(
            Role.RESPONDER, ephemeral, glimmer_public, q, signature,
            expected_measurement=self.approved, attestation_root=self.attestation_root,
        )
        return SecureChannel(keys)

    def seal_validator(self, channel: SecureChannel) -> SecretValidator:
        return SecretValidator(self.version, channel.seal(self._policy))


@dataclass
class BoundSession:
    """Both ends of an established channel and every byte string that crossed."""

    glimmer: ConfidentialGlimmer
    service: ValidationService
    service_channel: SecureChannel
    wire_log: List[Tuple[str, bytes]] = field(default_factory=list)
    installed_version: Optional[int] = None


def establish_bound_channel(glimmer: ConfidentialGlimmer, service: ValidationService) -> BoundSession:
    """
    Run the three-flight handshake.

    Raises:
        BindingFailure: either side's binding does not check out
    """
    wire: List[Tuple[str, bytes]] = []
    glimmer_public = glimmer.hello()
    wire.append(("hello", glimmer_public))
    ephemeral, service_public, signature = service.respond(glimmer_public)
    wire.append(("server_hello", service_public + signature))
    q = glimmer.finish(service_public, signature)
    wire.append(("quote", q.to_bytes()))
    channel = service.complete(ephemeral, glimmer_public, signature, Quote.from_bytes(wire[-1][1]))
    return BoundSession(glimmer, service, channel, wire)


def deliver_validator(session: BoundSession, sv: Optional[SecretValidator] = None) -> int:
    """
    Install the service's encrypted policy inside the glimmer.

    Returns:
        The acknowledged version

    Raises:
        DecryptFailure: ciphertext does not open under the session keys
        MalformedPolicy: plaintext is not a valid policy
    """
    sv = sv or session.service.seal_validator(session.service_channel)
    session.wire_log.append(("validator", sv.ciphertext))
    ack = session.glimmer.install(sv)
    session.wire_log.append(("validator_ack", ack))
    (version,) = struct.unpack(">I", session.service_channel.open(ack))
    if version != sv.version:
        raise CryptoError(f"glimmer acknowledged version {version}, sent {sv.version}")
    session.installed_version = version
    return version


def run_confidential(session: BoundSession, signals: SignalRecord, nonce: bytes, round_id: int = 0) -> bytes:
    """Evaluate the installed policy over local signals; returns the 89-byte message."""
    message = session.glimmer.verdict(signals, nonce, round_id)
    session.wire_log.append(("verdict", message))
    return message


__all__ = [
    "AuditReason", "AuditResult", "BoundSession", "ConfidentialGlimmer", "EvaluationError",
    "MalformedPolicy", "NONCE_SIZE", "NotInstalled", "QUOTE_SIZE", "RuntimeAuditor",
    "SecretValidator", "SignalRecord", "VERDICT_MESSAGE_SIZE", "ValidationService",
    "VerdictMessage", "audit_message", "deliver_validator", "establish_bound_channel",
    "evaluate", "parse_policy", "run_confidential",
]
