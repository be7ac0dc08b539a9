"""
Modular fixed-point arithmetic and cryptographic primitives for the Glimmer stack.
Blinding and aggregation work on uint64 numpy vectors, so every sum wraps mod 2^64
and zero-sum pads cancel bit-exactly.
"""

from __future__ import annotations

import hashlib
import logging
import secrets
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from tee_emulation import Measurement, Quote, verify_quote
from utils.wire import DecodeError, Reader

logger = logging.getLogger(__name__)

SCALE = 10 ** 6
MODULUS = 2 ** 64
DTYPE = np.uint64
WIRE_DTYPE = np.dtype(">u8")

PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
SEED_SIZE = 32
_AEAD_NONCE_SIZE = 12
_AKX_SIGNATURE_DOMAIN = b"glimmer-akx-binding/1"


class CryptoError(Exception):
    """Base class for crypto_suite failures."""


class ZeroParties(CryptoError, ValueError):
    """A round needs at least one party."""


class LengthMismatch(CryptoError, ValueError):
    """Vectors of different lengths were combined."""


class RoundMismatch(CryptoError, ValueError):
    """Vectors from different rounds were combined."""


class EmptyRound(CryptoError):
    """Nothing was submitted, so there is nothing to aggregate."""


class BindingFailure(CryptoError):
    """A handshake value is not covered by a valid quote or signature."""


class DecryptFailure(CryptoError):
    """Authenticated decryption failed."""


# ---------------------------------------------------------------------------
# Fixed-point vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedWeight:
    """A model weight stored as raw / SCALE."""

    raw: int

    @property
    def weight(self) -> float:
        return self.raw / SCALE

    @property
    def is_valid(self) -> bool:
        return 0 <= self.raw <= SCALE

    @classmethod
    def from_weight(cls, weight: float) -> "FixedWeight":
        return cls(int(round(weight * SCALE)))


def as_u64(values) -> np.ndarray:
    """Copy values into a fresh contiguous uint64 vector."""
    arr = np.array(values, dtype=DTYPE, copy=True)
    if arr.ndim != 1:
        raise ValueError(f"Expected a 1-D vector, got shape {arr.shape}")
    return arr


def _entries_to_bytes(entries: np.ndarray) -> bytes:
    return entries.astype(WIRE_DTYPE).tobytes()


def _entries_from_bytes(data: bytes) -> np.ndarray:
    if len(data) % 8:
        raise DecodeError("Entry bytes are not a multiple of 8")
    return np.frombuffer(data, dtype=WIRE_DTYPE).astype(DTYPE)


@dataclass
class _RoundVector:
    round_id: int
    entries: np.ndarray

    def __post_init__(self):
        self.entries = as_u64(self.entries)

    def __len__(self) -> int:
        return int(self.entries.shape[0])

    def to_bytes(self) -> bytes:
        return struct.pack(">QI", self.round_id, len(self)) + _entries_to_bytes(self.entries)

    @classmethod
    def from_bytes(cls, data: bytes):
        reader = Reader(data)
        round_id = reader.u64()
        count = reader.u32()
        entries = _entries_from_bytes(reader.take(8 * count))
        reader.finish()
        return cls(round_id, entries)

    def zeroize(self):
        self.entries.fill(0)

    def __eq__(self, other) -> bool:
        return (
            type(self) is type(other)
            and self.round_id == other.round_id
            and np.array_equal(self.entries, other.entries)
        )


class ModelVector(_RoundVector):
    """A user contribution x_i: fixed-point bigram weights."""

    def in_range(self, lo: int = 0, hi: int = SCALE) -> bool:
        return bool(np.all((self.entries >= lo) & (self.entries <= hi)))

    def weights(self) -> np.ndarray:
        return self.entries.astype(np.float64) / SCALE


class Pad(_RoundVector):
    """Per-client blinding value p_i, uniform in [0, 2^64)."""


class BlindedVector(_RoundVector):
    """y_i = x_i + p_i mod 2^64."""


def canonical_bytes(round_id: int, client_id: int, entries: np.ndarray) -> bytes:
    """round_id (8) | client_id (8) | length (4) | entries (8 each), all big-endian."""
    entries = as_u64(entries)
    return struct.pack(">QQI", round_id, client_id, entries.shape[0]) + _entries_to_bytes(entries)


# ---------------------------------------------------------------------------
# Zero-sum pads, blinding, aggregation
# ---------------------------------------------------------------------------


def _keystream(seed: bytes, index: int, v: int) -> np.ndarray:
    # ChaCha20 nonce: 4-byte little-endian block counter | 12-byte nonce
    nonce = (0).to_bytes(4, "little") + index.to_bytes(12, "big")
    encryptor = Cipher(algorithms.ChaCha20(seed, nonce), mode=None).encryptor()
    return np.frombuffer(encryptor.update(bytes(8 * v)), dtype=WIRE_DTYPE).astype(DTYPE)


def gen_pads(n: int, v: int, seed: bytes, round_id: int = 0) -> List[Pad]:
    """
    Generate n zero-sum blinding pads of length v.

    Args:
        n: Number of parties
        v: Vector length
        seed: 32-byte CSPRNG seed (ChaCha20 keystream)
        round_id: Round the pads belong to

    Returns:
        n pads whose elementwise sum is 0 mod 2^64
    """
    if n < 1:
        raise ZeroParties("gen_pads needs at least one party")
    if v < 1:
        raise ValueError("vector length must be >= 1")
    if len(seed) != SEED_SIZE:
        raise ValueError(f"seed must be {SEED_SIZE} bytes")

    pads = [Pad(round_id, _keystream(seed, i, v)) for i in range(n - 1)]
    total = np.zeros(v, dtype=DTYPE)
    for pad in pads:
        total += pad.entries
    pads.append(Pad(round_id, np.zeros(v, dtype=DTYPE) - total))
    return pads


def _check_compatible(a: _RoundVector, b: _RoundVector):
    if len(a) != len(b):
        raise LengthMismatch(f"vector lengths differ: {len(a)} vs {len(b)}")
    if a.round_id != b.round_id:
        raise RoundMismatch(f"round ids differ: {a.round_id} vs {b.round_id}")


def blind(x: ModelVector, p: Pad) -> BlindedVector:
    """Elementwise wrapping addition y = x + p mod 2^64."""
    _check_compatible(x, p)
    return BlindedVector(x.round_id, x.entries + p.entries)


def aggregate_unblind(
    ys: Sequence[BlindedVector],
    dropout_pads: Sequence[Pad] = (),
) -> np.ndarray:
    """
    Sum blinded contributions plus the pads of clients that did not submit.

    Args:
        ys: Blinded vectors of one round
        dropout_pads: Pads of the round's non-submitting clients

    Returns:
        uint64 vector equal to the sum of the submitters' plaintext vectors
    """
    if not ys:
        raise EmptyRound("no contributions to aggregate")
    first = ys[0]
    total = np.zeros(len(first), dtype=DTYPE)
    for vec in list(ys) + list(dropout_pads):
        _check_compatible(first, vec)
        total += vec.entries
    return total


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------


def signing_key_from_seed(seed: bytes, label: bytes = b"") -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(derive_key(seed, b"ed25519:" + label))


def private_bytes(sk: Ed25519PrivateKey) -> bytes:
    return sk.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )


def public_bytes(key: Union[Ed25519PrivateKey, Ed25519PublicKey, X25519PrivateKey, X25519PublicKey]) -> bytes:
    if isinstance(key, (Ed25519PrivateKey, X25519PrivateKey)):
        key = key.public_key()
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def sign(msg: bytes, sk: Ed25519PrivateKey) -> bytes:
    """Deterministic Ed25519 signature over the exact message bytes."""
    return sk.sign(bytes(msg))


def verify(msg: bytes, sig: bytes, pk: Union[Ed25519PublicKey, bytes]) -> bool:
    if isinstance(pk, (bytes, bytearray)):
        try:
            pk = Ed25519PublicKey.from_public_bytes(bytes(pk))
        except ValueError:
            return False
    try:
        pk.verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError):
        return False
    return True


# ---------------------------------------------------------------------------
# Key derivation, AEAD, public-key envelopes
# ---------------------------------------------------------------------------


def derive_key(material: bytes, info: bytes, length: int = 32, salt: Optional[bytes] = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(material)


def seed_bytes(seed: int, label: str = "") -> bytes:
    """Expand an integer harness seed into 32 bytes for a named purpose."""
    return hashlib.sha256(f"{label}:{seed}".encode()).digest()


def aead_encrypt(key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    nonce = secrets.token_bytes(_AEAD_NONCE_SIZE)
    return nonce + AESGCM(key).encrypt(nonce, bytes(plaintext), aad)


def aead_decrypt(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    if len(blob) < _AEAD_NONCE_SIZE + 16:
        raise DecryptFailure("ciphertext too short")
    try:
        return AESGCM(key).decrypt(blob[:_AEAD_NONCE_SIZE], blob[_AEAD_NONCE_SIZE:], aad)
    except InvalidTag:
        raise DecryptFailure("authentication failed") from None


def envelope_encrypt(recipient: Union[X25519PublicKey, bytes], plaintext: bytes, context: bytes = b"") -> bytes:
    """
    Encrypt to a recipient's X25519 public key (ephemeral-static ECDH + HKDF + AES-GCM).

    Returns:
        ephemeral public key (32) | nonce (12) | ciphertext
    """
    if isinstance(recipient, (bytes, bytearray)):
        recipient = X25519PublicKey.from_public_bytes(bytes(recipient))
    ephemeral = X25519PrivateKey.generate()
    eph_pub = public_bytes(ephemeral)
    key = derive_key(ephemeral.exchange(recipient), b"glimmer-envelope:" + context, salt=eph_pub)
    return eph_pub + aead_encrypt(key, plaintext, aad=context)


def envelope_decrypt(recipient_sk: X25519PrivateKey, blob: bytes, context: bytes = b"") -> bytes:
    if len(blob) < PUBLIC_KEY_SIZE:
        raise DecryptFailure("envelope too short")
    eph_pub = blob[:PUBLIC_KEY_SIZE]
    shared = recipient_sk.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = derive_key(shared, b"glimmer-envelope:" + context, salt=eph_pub)
    return aead_decrypt(key, blob[PUBLIC_KEY_SIZE:], aad=context)


# ---------------------------------------------------------------------------
# Attestation-bound key exchange
# ---------------------------------------------------------------------------


class Role(Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


@dataclass(frozen=True)
class SessionKeys:
    send_key: bytes
    recv_key: bytes
    transcript_hash: bytes


Binding = Union[Quote, bytes, None]


def handshake_report_data(own_public: bytes, peer_public: bytes) -> bytes:
    """Quote report_data for a handshake: the quoting side's value, then the peer's."""
    return own_public + peer_public


def binding_message(own_public: bytes, peer_public: bytes) -> bytes:
    """Bytes a signing party signs to bind its handshake value."""
    return _AKX_SIGNATURE_DOMAIN + own_public + peer_public


def sign_handshake(sk: Ed25519PrivateKey, own_public: bytes, peer_public: bytes) -> bytes:
    return sign(binding_message(own_public, peer_public), sk)


def _binding_bytes(binding: Binding) -> bytes:
    if binding is None:
        return b""
    if isinstance(binding, Quote):
        return binding.to_bytes()
    return bytes(binding)


def akx_handshake(
    role: Role,
    my_ephemeral: X25519PrivateKey,
    peer_public: bytes,
    peer_binding: Binding,
    my_binding: Binding = None,
    *,
    expected_measurement: Optional[Measurement] = None,
    attestation_root: Optional[Union[Ed25519PublicKey, bytes]] = None,
    peer_verify_key: Optional[bytes] = None,
    allow_anonymous_peer: bool = False,
) -> SessionKeys:
    """
    Complete an X25519 handshake whose peer value is bound by a quote or a signature.

    Args:
        role: Which side of the exchange this is
        my_ephemeral: Fresh ephemeral key for this session
        peer_public: Peer's ephemeral public value
        peer_binding: Quote (enclave peer), signature bytes (service peer) or None
        my_binding: The binding this side sent, folded into the transcript
        expected_measurement: Required to check a Quote binding
        attestation_root: Attestation root key for Quote bindings
        peer_verify_key: Ed25519 key for signature bindings
        allow_anonymous_peer: Accept an unbound peer (remote glimmer clients)

    Returns:
        SessionKeys identical (with send/recv swapped) on both sides

    Raises:
        BindingFailure: the binding does not cover the handshake values
    """
    my_public = public_bytes(my_ephemeral)
    if len(peer_public) != PUBLIC_KEY_SIZE:
        raise BindingFailure("peer handshake value has the wrong size")

    if isinstance(peer_binding, Quote):
        if expected_measurement is None or attestation_root is None:
            raise BindingFailure("no attestation expectation configured")
        if not verify_quote(peer_binding, expected_measurement, attestation_root):
            raise BindingFailure("peer quote does not verify for the expected measurement")
        if peer_binding.report_data != handshake_report_data(peer_public, my_public):
            raise BindingFailure("peer quote does not cover this handshake")
    elif peer_binding is not None:
        if peer_verify_key is None:
            raise BindingFailure("no verification key for peer signature")
        if not verify(binding_message(peer_public, my_public), peer_binding, peer_verify_key):
            raise BindingFailure("peer signature does not cover this handshake")
    elif not allow_anonymous_peer:
        raise BindingFailure("peer presented no binding")

    shared = my_ephemeral.exchange(X25519PublicKey.from_public_bytes(peer_public))

    if role is Role.INITIATOR:
        init_pub, resp_pub = my_public, peer_public
        init_bind, resp_bind = _binding_bytes(my_binding), _binding_bytes(peer_binding)
    else:
        init_pub, resp_pub = peer_public, my_public
        init_bind, resp_bind = _binding_bytes(peer_binding), _binding_bytes(my_binding)

    transcript = hashlib.sha256(
        b"glimmer-akx/1" + init_pub + resp_pub
        + struct.pack(">I", len(init_bind)) + init_bind
        + struct.pack(">I", len(resp_bind)) + resp_bind
    ).digest()
    keys = derive_key(shared, b"glimmer-akx session keys", length=64, salt=transcript)
    i2r, r2i = keys[:32], keys[32:]
    if role is Role.INITIATOR:
        return SessionKeys(send_key=i2r, recv_key=r2i, transcript_hash=transcript)
    return SessionKeys(send_key=r2i, recv_key=i2r, transcript_hash=transcript)


class SecureChannel:
    """AES-GCM record layer over SessionKeys with implicit per-direction counters."""

    def __init__(self, keys: SessionKeys):
        self.keys = keys
        self._send = AESGCM(keys.send_key)
        self._recv = AESGCM(keys.recv_key)
        self._send_seq = 0
        self._recv_seq = 0

    def seal(self, plaintext: bytes) -> bytes:
        nonce = self._send_seq.to_bytes(_AEAD_NONCE_SIZE, "big")
        self._send_seq += 1
        return self._send.encrypt(nonce, bytes(plaintext), self.keys.transcript_hash)

    def open(self, ciphertext: bytes) -> bytes:
        nonce = self._recv_seq.to_bytes(_AEAD_NONCE_SIZE, "big")
        try:
            plaintext = self._recv.decrypt(nonce, bytes(ciphertext), self.keys.transcript_hash)
        except InvalidTag:
            raise DecryptFailure("channel record failed authentication") from None
        self._recv_seq += 1
        return plaintext


def sum_plain(vectors: Iterable[np.ndarray], length: int) -> np.ndarray:
    """Wrapping elementwise sum of plaintext vectors (public rounds)."""
    total = np.zeros(length, dtype=DTYPE)
    for vec in vectors:
        if vec.shape[0] != length:
            raise LengthMismatch(f"vector lengths differ: {vec.shape[0]} vs {length}")
        total += vec
    return total
