"""
Glimmer as a service for clients without trusted hardware.

A remote host runs the approved glimmer in an enclave per session. Clients
verify the host's quote, bound to the handshake, before any private byte is
sent; private data then travels only inside the secure channel.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, Optional, Union

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from crypto_suite import (
    PUBLIC_KEY_SIZE,
    BindingFailure,
    CryptoError,
    DecryptFailure,
    ModelVector,
    Role,
    SecureChannel,
    akx_handshake,
    handshake_report_data,
    public_bytes,
)
from glimmer_core import (
    GlimmerError,
    PrivateValidationData,
    SignedContribution,
    ValidationFailed,
    ValidationPolicy,
    ValidationVerdict,
    decode_glimmer_request,
    encode_glimmer_request,
    run_glimmer,
)
from tee_emulation import (
    QUOTE_SIZE,
    EnclaveContext,
    Measurement,
    Quote,
    SealedBlob,
    TeeError,
    TeePlatform,
    flip_byte,
    quote,
    wipe,
)
from utils.bus import MessageBus, UnknownActor
from utils.wire import DecodeError, MessageType, Reader

logger = logging.getLogger(__name__)

_MODE_HANDSHAKE = 0
_MODE_ENROLLMENT = 1

_RESULT_OK = 0
_RESULT_INVALID = 1
_RESULT_ERROR = 2


class ChannelError(GlimmerError):
    """The secure channel to a remote glimmer is missing or broken."""


class AttestationFailure(ChannelError):
    """The remote host's quote did not verify or did not cover the handshake."""


class Unreachable(ChannelError):
    """No remote host answers at the endpoint address."""


class Phase(str, Enum):
    CONNECTING = "connecting"
    ATTESTED = "attested"
    CLOSED = "closed"


@dataclass(frozen=True)
class RemoteEndpoint:
    address: str
    expected_measurement: Measurement
    attestation_root: Union[Ed25519PublicKey, bytes]


@dataclass
class _HostSession:
    ctx: EnclaveContext
    channel: SecureChannel


class RemoteGlimmerHost:
    """
    A glimmer host reachable over the bus ("set-top box", "university", ...).

    Each session gets its own enclave context, destroyed after its one run.
    Sessions never submitted are closed oldest first once max_open_sessions
    are open. The label and trust annotation only show up in reports.
    """

    def __init__(
        self,
        name: str,
        platform: TeePlatform,
        code: bytes,
        label: str = "remote host",
        trust: str = "",
        tampered: bool = False,
        max_open_sessions: int = 64,
    ):
        self.name = name
        self.platform = platform
        self.code = flip_byte(code) if tampered else bytes(code)
        self.label = label
        self.trust = trust
        self.tampered = tampered
        self._enrollment_ctx = platform.launch(self.code)
        self._sessions: Dict[int, _HostSession] = {}
        self.max_open_sessions = max_open_sessions
        self._next_session = 1
        self.runs = 0

    @property
    def measurement(self) -> Measurement:
        return self._enrollment_ctx.measurement

    def _open_session(self, client_public: bytes) -> bytes:
        if len(client_public) != PUBLIC_KEY_SIZE:
            raise DecodeError("client handshake value has the wrong size")
        while len(self._sessions) >= self.max_open_sessions:
            abandoned = next(iter(self._sessions))
            logger.info("Remote host %s closing abandoned session %d", self.name, abandoned)
            self.close_session(abandoned)
        ctx = self.platform.launch(self.code)
        ephemeral = X25519PrivateKey.generate()
        own = public_bytes(ephemeral)
        q = quote(ctx, handshake_report_data(own, client_public))
        keys = akx_handshake(
            Role.RESPONDER, ephemeral, client_public, None, q, allow_anonymous_peer=True,
        )
        session_id = self._next_session
        self._next_session += 1
        self._sessions[session_id] = _HostSession(ctx, SecureChannel(keys))
        return struct.pack(">Q", session_id) + own + q.to_bytes()

    def _run(self, payload: bytes) -> bytes:
        reader = Reader(payload)
        session_id = reader.u64()
        session = self._sessions.pop(session_id, None)
        if session is None:
            raise DecodeError(f"unknown session {session_id}")
        # Sessions are single-use: the enclave goes away once the reply is sealed.
        try:
            request = session.channel.open(reader.rest())
            self.runs += 1
            try:
                x, d, sealed_pad, sealed_sk, policy, client_id, public = decode_glimmer_request(request)
                contribution = run_glimmer(x, d, sealed_pad, sealed_sk, policy, session.ctx, client_id, public)
                body = bytes([_RESULT_OK]) + contribution.to_bytes()
            except ValidationFailed as e:
                body = bytes([_RESULT_INVALID]) + e.verdict.reason.encode()
            except (GlimmerError, CryptoError, TeeError, DecodeError) as e:
                body = bytes([_RESULT_ERROR]) + type(e).__name__.encode()
            finally:
                request = b""
            return struct.pack(">Q", session_id) + session.channel.seal(body)
        finally:
            session.ctx.destroy()

    @property
    def open_sessions(self) -> int:
        return len(self._sessions)

    def close_session(self, session_id: int):
        session = self._sessions.pop(session_id, None)
        if session is not None:
            session.ctx.destroy()

    def handle(self, src: str, tag: MessageType, payload: bytes):
        """Bus handler for ATTEST_REQUEST and SUBMIT_PRIVATE."""
        try:
            if tag is MessageType.ATTEST_REQUEST:
                if not payload:
                    raise DecodeError("empty attest request")
                if payload[0] == _MODE_HANDSHAKE:
                    return MessageType.ATTEST_QUOTE, self._open_session(payload[1:])
                if payload[0] == _MODE_ENROLLMENT:
                    return MessageType.ATTEST_QUOTE, quote(self._enrollment_ctx, payload[1:]).to_bytes()
                raise DecodeError(f"unknown attest mode {payload[0]}")
            if tag is MessageType.SUBMIT_PRIVATE:
                return MessageType.SIGNED_RESULT, self._run(payload)
        except (DecodeError, DecryptFailure, ValueError) as e:
            logger.info("Remote host %s dropped %s from %s: %s", self.name, tag.name, src, e)
            return None
        logger.warning("Remote host %s ignored %s from %s", self.name, tag.name, src)
        return None


@dataclass
class RemoteSession:
    """Client end of an attested channel to one remote host session."""

    endpoint: RemoteEndpoint
    bus: MessageBus
    src: str
    session_id: int = 0
    channel: Optional[SecureChannel] = None
    phase: Phase = Phase.CONNECTING
    host_quote: Optional[Quote] = field(default=None, repr=False)


def connect_remote(ep: RemoteEndpoint, bus: MessageBus, src: str) -> RemoteSession:
    """
    Attest the remote glimmer and establish the secure channel.

    Raises:
        Unreachable: nothing is registered at ep.address
        AttestationFailure: quote does not verify for the expected measurement
            or is not bound to this handshake
    """
    session = RemoteSession(ep, bus, src)
    ephemeral = X25519PrivateKey.generate()
    try:
        reply = bus.call(src, ep.address, MessageType.ATTEST_REQUEST, bytes([_MODE_HANDSHAKE]) + public_bytes(ephemeral))
    except UnknownActor:
        raise Unreachable(f"no remote glimmer at '{ep.address}'") from None
    if reply is None or reply[0] is not MessageType.ATTEST_QUOTE:
        raise Unreachable(f"remote glimmer at '{ep.address}' did not answer")

    try:
        reader = Reader(reply[1])
        session_id = reader.u64()
        host_public = reader.take(PUBLIC_KEY_SIZE)
        host_quote = Quote.from_bytes(reader.take(QUOTE_SIZE))
        reader.finish()
        keys = akx_handshake(
            Role.INITIATOR, ephemeral, host_public, host_quote,
            expected_measurement=ep.expected_measurement,
            attestation_root=ep.attestation_root,
        )
    except (DecodeError, BindingFailure) as e:
        session.phase = Phase.CLOSED
        raise AttestationFailure(f"remote glimmer at '{ep.address}' failed attestation: {e}") from e

    session.session_id = session_id
    session.channel = SecureChannel(keys)
    session.host_quote = host_quote
    session.phase = Phase.ATTESTED
    return session


def remote_submit(
    session: RemoteSession,
    x: ModelVector,
    d: PrivateValidationData,
    sealed_pad: Optional[SealedBlob],
    sealed_sk: SealedBlob,
    policy: ValidationPolicy,
    client_id: int,
    public: bool = False,
) -> SignedContribution:
    """
    Run the glimmer pipeline on the remote host.

    x and d are wiped locally once encrypted, as a local glimmer would.

    Raises:
        ChannelError: no attested channel, or the reply does not open
        ValidationFailed: the remote glimmer refused the contribution
    """
    if session.phase is not Phase.ATTESTED or session.channel is None:
        raise ChannelError("private data may only be sent over an attested channel")
    request = encode_glimmer_request(x, d, sealed_pad, sealed_sk, policy, client_id, public)
    record = session.channel.seal(request)
    wipe(x.entries)
    d.zeroize()
    request = b""

    reply = session.bus.call(
        session.src, session.endpoint.address, MessageType.SUBMIT_PRIVATE,
        struct.pack(">Q", session.session_id) + record,
    )
    session.phase = Phase.CLOSED
    if reply is None or reply[0] is not MessageType.SIGNED_RESULT:
        raise ChannelError("remote glimmer returned no result")
    try:
        reader = Reader(reply[1])
        if reader.u64() != session.session_id:
            raise ChannelError("result for a different session")
        body = session.channel.open(reader.rest())
    except (DecodeError, DecryptFailure) as e:
        raise ChannelError(f"cannot open remote result: {e}") from e

    status, rest = body[0], body[1:]
    if status == _RESULT_OK:
        return SignedContribution.from_bytes(rest)
    if status == _RESULT_INVALID:
        raise ValidationFailed(ValidationVerdict(False, Fraction(0), rest.decode()))
    raise ChannelError(f"remote glimmer failed: {rest.decode()}")


class RemoteGlimmer:
    """GlimmerHandle backed by a remote host; one attested session per run."""

    def __init__(self, endpoint: RemoteEndpoint, bus: MessageBus, src: str):
        self.endpoint = endpoint
        self.bus = bus
        self.src = src

    @property
    def measurement_hex(self) -> str:
        return self.endpoint.expected_measurement.hex()

    def attest(self, report_data: bytes) -> Quote:
        try:
            reply = self.bus.call(self.src, self.endpoint.address, MessageType.ATTEST_REQUEST,
                                  bytes([_MODE_ENROLLMENT]) + report_data)
        except UnknownActor:
            raise Unreachable(f"no remote glimmer at '{self.endpoint.address}'") from None
        if reply is None or reply[0] is not MessageType.ATTEST_QUOTE:
            raise Unreachable(f"remote glimmer at '{self.endpoint.address}' did not answer")
        return Quote.from_bytes(reply[1])

    def process(self, x, d, sealed_pad, sealed_sk, policy, client_id, public=False):
        session = connect_remote(self.endpoint, self.bus, self.src)
        return remote_submit(session, x, d, sealed_pad, sealed_sk, policy, client_id, public)
