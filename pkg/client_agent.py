"""
Per-user client actor.

Keeps the private keyboard event log, trains the local bigram model, drives
its glimmer and emits only endorsed contributions. Adversary modes reproduce
the attacks the glimmer and the service must stop.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from crypto_suite import (
    SCALE,
    BlindedVector,
    CryptoError,
    ModelVector,
    public_bytes,
    seed_bytes,
    sign,
    signing_key_from_seed,
)
from glimmer_core import (
    GlimmerError,
    GlimmerHandle,
    PrivateValidationData,
    SignedContribution,
    ValidationFailed,
    ValidationPolicy,
    verdict_reason_code,
)
from blinding_service import PadIssue
from tee_emulation import Quote, SealedBlob, TeeError

logger = logging.getLogger(__name__)

SENTINEL_PREFIX = b"GLIMMER-SENTINEL:"


class EventLog:
    """Timestamped word ids typed by one user; timestamps strictly increase."""

    def __init__(self, events: Sequence[Tuple[int, int]], vocab_size: int):
        self.events: List[Tuple[int, int]] = [(int(ts), int(w)) for ts, w in events]
        self.vocab_size = vocab_size
        last = -1
        for ts, word in self.events:
            if ts <= last:
                raise ValueError(f"timestamps must strictly increase ({ts} after {last})")
            if not 0 <= word < vocab_size:
                raise ValueError(f"word id {word} outside vocabulary of {vocab_size}")
            last = ts

    def words(self) -> List[int]:
        return [w for _, w in self.events]

    def __len__(self) -> int:
        return len(self.events)

    def __bool__(self) -> bool:
        return bool(self.events)


def bigram_counts(words: Sequence[int], vocab_size: int) -> np.ndarray:
    """Counts of consecutive (a, b) pairs, flattened at index a * V + b."""
    if len(words) < 2:
        return np.zeros(vocab_size * vocab_size, dtype=np.int64)
    seq = np.asarray(words, dtype=np.int64)
    return np.bincount(seq[:-1] * vocab_size + seq[1:], minlength=vocab_size * vocab_size).astype(np.int64)


def _round_half_up(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    safe = np.maximum(denominator, 1)
    return np.where(denominator > 0, (2 * numerator + safe) // (2 * safe), 0)


def train_local(log: EventLog, V: int, round_id: int = 0, conditional: bool = False) -> ModelVector:
    """
    Fixed-point bigram weights from a keyboard log.

    Args:
        log: Private event log
        V: Vocabulary size; the model has V * V entries
        round_id: Round the contribution belongs to
        conditional: Normalize by the predecessor's outgoing count instead of
            the total bigram count

    Returns:
        ModelVector with entries round(SCALE * count / denominator), half up
    """
    counts = bigram_counts(log.words(), V)
    if conditional:
        row_totals = counts.reshape(V, V).sum(axis=1)
        denominator = np.repeat(row_totals, V)
    else:
        denominator = np.full(counts.shape, int(counts.sum()), dtype=np.int64)
    return ModelVector(round_id, _round_half_up(SCALE * counts, denominator))


def expand_corpus(
    phrases: Sequence[Tuple[Sequence[int], int]],
    vocab_size: int,
    seed: int,
    start_ms: int = 0,
) -> EventLog:
    """
    Turn (phrase, repetitions) pairs into a shuffled, timestamped event log.

    The same seed always yields the same log.
    """
    rng = np.random.default_rng(seed)
    instances = [list(words) for words, reps in phrases for _ in range(int(reps))]
    order = rng.permutation(len(instances)) if instances else []
    events = []
    ts = start_ms
    for i in order:
        for word in instances[i]:
            ts += int(rng.integers(80, 400))
            events.append((ts, word))
    return EventLog(events, vocab_size)


class AdversaryKind(str, Enum):
    HONEST = "honest"
    OUT_OF_RANGE = "out_of_range"
    FABRICATED_IN_RANGE = "fabricated_in_range"
    BYPASS_GLIMMER = "bypass_glimmer"
    TAMPERED_CODE = "tampered_code"
    REPLAY = "replay"


@dataclass(frozen=True)
class AdversaryMode:
    kind: AdversaryKind = AdversaryKind.HONEST
    value: int = 538
    bypass: bool = False

    @classmethod
    def honest(cls) -> "AdversaryMode":
        return cls()

    def label(self) -> str:
        if self.kind is AdversaryKind.OUT_OF_RANGE:
            return f"out_of_range({self.value}{', bypass' if self.bypass else ''})"
        return self.kind.value


def fabricated_vector(seed: int, client_id: int, round_id: int, length: int) -> ModelVector:
    """In-range weights that have nothing to do with the client's typing."""
    rng = np.random.default_rng([seed, client_id, round_id])
    cap = max(1, 2 * SCALE // max(1, length))
    return ModelVector(round_id, rng.integers(0, min(cap, SCALE) + 1, size=length, dtype=np.uint64))


def out_of_range_vector(x: ModelVector, value: int) -> ModelVector:
    """x with its first non-zero entry (or entry 0) replaced by value * SCALE."""
    nonzero = np.flatnonzero(x.entries)
    idx = int(nonzero[0]) if nonzero.size else 0
    entries = x.entries.copy()
    entries[idx] = value * SCALE
    return ModelVector(x.round_id, entries)


@dataclass
class RoundContext:
    """What a client needs to contribute to one round."""

    round_id: int
    vector_length: int
    sealed_sk: SealedBlob
    policy: ValidationPolicy
    public: bool = False
    conditional: bool = False
    skip_blinding: bool = False


@dataclass
class Submission:
    """Wire payloads a client sends for one round, plus local outcome notes."""

    client_id: int
    round_id: int
    payloads: List[bytes] = field(default_factory=list)
    events: List[str] = field(default_factory=list)

    @property
    def silent(self) -> bool:
        return not self.payloads


class ClientAgent:
    """One user: private log, envelope keypair, glimmer handle, behavior mode."""

    def __init__(
        self,
        client_id: int,
        log: EventLog,
        glimmer: GlimmerHandle,
        mode: AdversaryMode = AdversaryMode(),
        seed: int = 0,
    ):
        self.client_id = client_id
        self.log = log
        self.glimmer = glimmer
        self.mode = mode
        self.seed = seed
        key_seed = seed_bytes(seed, f"client-envelope:{client_id}")
        self.envelope_key = X25519PrivateKey.from_private_bytes(key_seed)
        self.sentinel = SENTINEL_PREFIX + hashlib.sha256(key_seed + b"sentinel").digest()[:16]
        self._pads: Dict[int, SealedBlob] = {}
        self._sent: List[bytes] = []

    @property
    def envelope_public(self) -> bytes:
        return public_bytes(self.envelope_key)

    def enrollment_report_data(self) -> bytes:
        return hashlib.sha512(struct.pack(">Q", self.client_id) + self.envelope_public).digest()

    def attest(self) -> Quote:
        return self.glimmer.attest(self.enrollment_report_data())

    def receive_pad(self, issue: PadIssue):
        if issue.client_id != self.client_id:
            raise ValueError(f"pad issue for client {issue.client_id} delivered to {self.client_id}")
        self._pads[issue.round_id] = issue.open(self.envelope_key)

    def private_data(self) -> PrivateValidationData:
        return PrivateValidationData(list(self.log.events), bytearray(self.sentinel))

    def plaintext_model(self, ctx: RoundContext) -> ModelVector:
        """The vector this client intends to contribute, before any glimmer runs."""
        vocab = self.log.vocab_size
        honest = train_local(self.log, vocab, ctx.round_id, ctx.conditional)
        if self.mode.kind is AdversaryKind.FABRICATED_IN_RANGE:
            return fabricated_vector(self.seed, self.client_id, ctx.round_id, ctx.vector_length)
        if self.mode.kind is AdversaryKind.OUT_OF_RANGE:
            return out_of_range_vector(honest, self.mode.value)
        return honest

    def sentinels(self, ctx: RoundContext) -> List[Tuple[str, bytes]]:
        """Byte strings that must never reach the service from this client."""
        found = [("auxiliary", self.sentinel)]
        events = self.private_data().to_bytes()
        if self.log:
            found.append(("event_log", events[4:4 + 12 * len(self.log)]))
        x = self.plaintext_model(ctx)
        if not ctx.public and x.entries.any():
            found.append(("plaintext_model", x.entries.astype(">u8").tobytes()))
        return found

    def _forge(self, x: ModelVector) -> bytes:
        """Bypass attack: raw x signed with a key the attacker made up."""
        attacker_key = signing_key_from_seed(seed_bytes(self.seed, f"attacker:{self.client_id}"))
        forged = SignedContribution(BlindedVector(x.round_id, x.entries), self.client_id, 255)
        forged.signature = sign(forged.signed_bytes(), attacker_key)
        return forged.to_bytes()

    def _run_glimmer(self, x: ModelVector, ctx: RoundContext, out: Submission) -> Optional[bytes]:
        public = ctx.public or ctx.skip_blinding
        sealed_pad = None if public else self._pads.get(ctx.round_id)
        if not public and sealed_pad is None:
            out.events.append("no_pad")
            return None
        try:
            contribution = self.glimmer.process(
                x, self.private_data(), sealed_pad, ctx.sealed_sk, ctx.policy, self.client_id, public,
            )
        except ValidationFailed as e:
            out.events.append(f"glimmer_refused:{verdict_reason_code(e.verdict.reason)}")
            return None
        except (GlimmerError, CryptoError, TeeError) as e:
            out.events.append(f"glimmer_error:{type(e).__name__}")
            logger.info("Client %d glimmer failed in round %d: %s", self.client_id, ctx.round_id, e)
            return None
        return contribution.to_bytes()

    def contribute(self, ctx: RoundContext) -> Submission:
        """
        Produce this round's wire submissions according to the adversary mode.

        Failures are recorded as events on the Submission, never raised.
        """
        out = Submission(self.client_id, ctx.round_id)
        kind = self.mode.kind
        x = self.plaintext_model(ctx)

        if kind is AdversaryKind.BYPASS_GLIMMER:
            out.payloads.append(self._forge(x))
            out.events.append("bypassed_glimmer")
            return out

        raw = ModelVector(x.round_id, x.entries)
        payload = self._run_glimmer(x, ctx, out)
        if payload is None:
            if kind is AdversaryKind.OUT_OF_RANGE and self.mode.bypass:
                out.payloads.append(self._forge(raw))
                out.events.append("bypassed_glimmer")
            return out

        out.payloads.append(payload)
        if kind is AdversaryKind.REPLAY:
            out.payloads.append(payload)
            if self._sent:
                out.payloads.append(self._sent[0])
            out.events.append("replayed")
        self._sent.append(payload)
        return out

    def forget_round(self, round_id: int):
        self._pads.pop(round_id, None)
