"""
Software emulation of an SGX-like trusted execution environment.
Provides code measurement, sealed storage and remote attestation behind the
TeePlatform interface so a hardware backend could later take its place.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from utils.wire import DecodeError, Reader

logger = logging.getLogger(__name__)

MEASUREMENT_SIZE = 32
REPORT_DATA_SIZE = 64
SIGNATURE_SIZE = 64
SEAL_NONCE_SIZE = 24
QUOTE_SIZE = MEASUREMENT_SIZE + REPORT_DATA_SIZE + SIGNATURE_SIZE

_QUOTE_DOMAIN = b"glimmer-tee-quote/1"

# Modules allowed to touch an enclave's private heap when the platform runs in debug mode.
TRUSTED_MODULES = frozenset({
    "tee_emulation",
    "glimmer_core",
    "blinding_service",
    "confidential_validation",
})

__all__ = [
    "DecodeError", "EnclaveContext", "HeapAccessViolation", "IntegrityFailure",
    "Measurement", "PolicyMismatch", "Quote", "SealedBlob", "TeeError", "TeePlatform", "flip_byte",
    "measure", "quote", "seal", "unseal", "verify_quote", "wipe",
]


class TeeError(Exception):
    """Base class for enclave emulation failures."""


class PolicyMismatch(TeeError):
    """A sealed blob was opened by an enclave whose measurement is not the policy."""


class IntegrityFailure(TeeError):
    """Sealed ciphertext failed authentication."""


class EnclaveDestroyed(TeeError):
    """The enclave context was used after destroy()."""


class HeapAccessViolation(AssertionError):
    """Host code read enclave-private state while the platform is in debug mode."""


@dataclass(frozen=True)
class Measurement:
    """SHA-256 identity of an enclave's code bytes."""

    digest: bytes

    def __post_init__(self):
        if len(self.digest) != MEASUREMENT_SIZE:
            raise DecodeError(f"Measurement must be {MEASUREMENT_SIZE} bytes, got {len(self.digest)}")

    def to_bytes(self) -> bytes:
        return self.digest

    @classmethod
    def from_bytes(cls, data: bytes) -> "Measurement":
        return cls(bytes(data))

    def hex(self) -> str:
        return self.digest.hex()


def measure(code: bytes) -> Measurement:
    """Deterministic digest of enclave code; empty code is allowed."""
    return Measurement(hashlib.sha256(bytes(code)).digest())


@dataclass(frozen=True)
class SealedBlob:
    """Payload encrypted so that only an enclave matching `policy` can open it."""

    policy: Measurement
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return (
            self.policy.to_bytes()
            + self.nonce
            + len(self.ciphertext).to_bytes(4, "big")
            + self.ciphertext
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBlob":
        reader = Reader(data)
        policy = Measurement(reader.take(MEASUREMENT_SIZE))
        nonce = reader.take(SEAL_NONCE_SIZE)
        ciphertext = reader.take(reader.u32())
        reader.finish()
        return cls(policy=policy, nonce=nonce, ciphertext=ciphertext)


@dataclass(frozen=True)
class Quote:
    """Attestation evidence binding a measurement to 64 caller-chosen bytes."""

    measurement: Measurement
    report_data: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return _QUOTE_DOMAIN + self.measurement.to_bytes() + self.report_data

    def to_bytes(self) -> bytes:
        return self.measurement.to_bytes() + self.report_data + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        if len(data) != QUOTE_SIZE:
            raise DecodeError(f"Quote must be {QUOTE_SIZE} bytes, got {len(data)}")
        reader = Reader(data)
        return cls(
            measurement=Measurement(reader.take(MEASUREMENT_SIZE)),
            report_data=reader.take(REPORT_DATA_SIZE),
            signature=reader.take(SIGNATURE_SIZE),
        )


class _PrivateHeap:
    """Enclave-private key/value store. Never serialized, never printed."""

    def __init__(self, owner: "EnclaveContext"):
        self._owner = owner
        self._slots: Dict[str, Any] = {}

    def _check_caller(self):
        if not self._owner.platform.debug:
            return
        caller = sys._getframe(2).f_globals.get("__name__", "")
        if caller.split(".")[-1] not in TRUSTED_MODULES:
            raise HeapAccessViolation(f"host module '{caller}' read enclave heap")

    def put(self, name: str, value: Any):
        self._check_caller()
        self._slots[name] = value

    def get(self, name: str, default: Any = None) -> Any:
        self._check_caller()
        return self._slots.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def __repr__(self) -> str:
        return f"<enclave heap: {len(self._slots)} slots>"

    def __getstate__(self):
        raise TypeError("enclave heap cannot be serialized")

    def clear(self) -> List[str]:
        names = list(self._slots)
        for value in self._slots.values():
            wipe(value)
        self._slots.clear()
        return names


def wipe(value: Any):
    """Overwrite a mutable buffer with zeros in place."""
    if isinstance(value, np.ndarray):
        value.fill(0)
    elif isinstance(value, bytearray):
        value[:] = bytes(len(value))
    elif isinstance(value, list):
        value.clear()
    elif isinstance(value, dict):
        value.clear()
    elif hasattr(value, "zeroize"):
        value.zeroize()


class EnclaveContext:
    """A launched enclave: immutable code, its measurement and a private heap."""

    def __init__(self, platform: "TeePlatform", code: bytes):
        self.platform = platform
        self._code = bytes(code)
        self._measurement = measure(self._code)
        self.heap = _PrivateHeap(self)
        self.live = True
        # Debug hook: (event, detail) pairs, e.g. ("zeroized", "contribution").
        self.debug_events: List[Tuple[str, str]] = []

    @property
    def code(self) -> bytes:
        return self._code

    @property
    def measurement(self) -> Measurement:
        return self._measurement

    def require_live(self):
        if not self.live:
            raise EnclaveDestroyed("enclave context was destroyed")

    def note(self, event: str, detail: str = ""):
        self.debug_events.append((event, detail))

    def zeroize_heap(self):
        for name in self.heap.clear():
            self.note("zeroized", name)

    def destroy(self):
        self.zeroize_heap()
        self.live = False

    def __repr__(self) -> str:
        return f"EnclaveContext(measurement={self._measurement.hex()[:16]}..., live={self.live})"


class TeePlatform:
    """
    Process-local stand-in for the CPU: owns the attestation root keypair and the
    sealing root key that real hardware would keep fused.
    """

    def __init__(self, seed: bytes, debug: bool = False):
        """
        Args:
            seed: Harness seed; both roots are derived from it deterministically
            debug: Enforce the host-never-reads-heap assertion
        """
        self.debug = debug
        attestation_seed = _derive(seed, b"attestation-root")
        self._attestation_key = Ed25519PrivateKey.from_private_bytes(attestation_seed)
        self._sealing_root = _derive(seed, b"sealing-root")

    @property
    def attestation_public_key(self) -> Ed25519PublicKey:
        return self._attestation_key.public_key()

    def launch(self, code: bytes) -> EnclaveContext:
        ctx = EnclaveContext(self, code)
        logger.debug("Launched enclave %s", ctx.measurement.hex()[:16])
        return ctx

    def _sealing_key(self, policy: Measurement) -> bytes:
        return _derive(self._sealing_root, b"seal:" + policy.to_bytes())

    def _sign_report(self, message: bytes) -> bytes:
        return self._attestation_key.sign(message)


def _derive(key_material: bytes, info: bytes, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(key_material)


def seal(payload: bytes, policy: Measurement, ctx: EnclaveContext) -> SealedBlob:
    """
    Encrypt payload so that only an enclave measuring `policy` can unseal it.

    Args:
        payload: Bytes to protect
        policy: Measurement of the enclave allowed to unseal
        ctx: The live enclave performing the seal

    Returns:
        SealedBlob with a fresh 24-byte nonce
    """
    ctx.require_live()
    nonce = secrets.token_bytes(SEAL_NONCE_SIZE)
    key = ctx.platform._sealing_key(policy)
    ciphertext = AESGCM(key).encrypt(nonce, bytes(payload), policy.to_bytes())
    return SealedBlob(policy=policy, nonce=nonce, ciphertext=ciphertext)


def unseal(blob: SealedBlob, ctx: EnclaveContext) -> bytes:
    """
    Recover a sealed payload inside the enclave the blob was sealed to.

    The key is derived from the caller's own measurement, so a wrong enclave
    could not decrypt even without the explicit policy check.

    Raises:
        PolicyMismatch: ctx.measurement differs from blob.policy
        IntegrityFailure: the ciphertext or nonce was modified
    """
    ctx.require_live()
    if ctx.measurement != blob.policy:
        raise PolicyMismatch(
            f"blob sealed to {blob.policy.hex()[:16]}..., enclave is {ctx.measurement.hex()[:16]}..."
        )
    key = ctx.platform._sealing_key(ctx.measurement)
    try:
        return AESGCM(key).decrypt(blob.nonce, blob.ciphertext, ctx.measurement.to_bytes())
    except InvalidTag:
        raise IntegrityFailure("sealed blob failed authentication") from None


def quote(ctx: EnclaveContext, report_data: bytes) -> Quote:
    """
    Produce attestation evidence for ctx, binding report_data.

    Shorter report_data is right-padded with zeros to 64 bytes.
    """
    ctx.require_live()
    if len(report_data) > REPORT_DATA_SIZE:
        raise ValueError(f"report_data is limited to {REPORT_DATA_SIZE} bytes")
    padded = bytes(report_data).ljust(REPORT_DATA_SIZE, b"\x00")
    unsigned = Quote(ctx.measurement, padded, b"\x00" * SIGNATURE_SIZE)
    return Quote(ctx.measurement, padded, ctx.platform._sign_report(unsigned.signed_bytes()))


def verify_quote(
    q: Quote,
    expected: Measurement,
    root_pub: Union[Ed25519PublicKey, bytes],
) -> bool:
    """True iff the quote is signed by the attestation root and quotes `expected`."""
    if q.measurement != expected:
        return False
    if isinstance(root_pub, (bytes, bytearray)):
        root_pub = Ed25519PublicKey.from_public_bytes(bytes(root_pub))
    try:
        root_pub.verify(q.signature, q.signed_bytes())
    except InvalidSignature:
        return False
    return True


def flip_byte(code: bytes, index: Optional[int] = None) -> bytes:
    """Return code with one byte inverted (default: the last byte)."""
    if not code:
        raise ValueError("cannot tamper with empty code")
    buf = bytearray(code)
    pos = len(buf) - 1 if index is None else index
    buf[pos] ^= 0xFF
    return bytes(buf)
