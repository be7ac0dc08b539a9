"""Shared fixtures: an emulated platform, the approved glimmer and a wired service."""

import numpy as np
import pytest

from aggregation_service import AggregationService, EnrollRequest
from blinding_service import BlindingService
from client_agent import AdversaryMode, ClientAgent, EventLog
from crypto_suite import ModelVector, public_bytes, signing_key_from_seed
from glimmer_core import LocalGlimmer, PrivateValidationData, build_glimmer_code
from tee_emulation import TeePlatform, measure

VOCAB = ["the", "donald", "trump", "duck", "weather", "is", "nice", "today"]
V = len(VOCAB)


@pytest.fixture
def platform():
    return TeePlatform(b"test-platform-seed", debug=True)


@pytest.fixture
def service_key():
    return signing_key_from_seed(b"\x07" * 32, b"validation-service")


@pytest.fixture
def glimmer_code(service_key):
    return build_glimmer_code(public_bytes(service_key))


@pytest.fixture
def approved(glimmer_code):
    return measure(glimmer_code)


@pytest.fixture
def aggregator(platform, approved):
    service = AggregationService(platform, approved, b"aggregation-test-seed")
    service.provision_signing_key()
    return service


@pytest.fixture
def sealed_sk(aggregator, approved):
    sealed, _ = aggregator.provision_signing_key(approved)
    return sealed


@pytest.fixture
def blinding(platform, aggregator):
    return BlindingService(platform, aggregator.credential_public)


@pytest.fixture
def glimmer(platform, glimmer_code):
    return LocalGlimmer(platform.launch(glimmer_code))


def make_log(words, start=1000, step=150):
    """EventLog over VOCAB word names with evenly spaced timestamps."""
    return EventLog([(start + i * step, VOCAB.index(w)) for i, w in enumerate(words)], V)


@pytest.fixture
def log_factory():
    return make_log


@pytest.fixture
def enrolled_clients(platform, glimmer_code, aggregator):
    """Factory: n honest clients with distinct logs, enrolled with the service."""

    def build(n, phrases=None):
        phrases = phrases or [
            "the weather is nice today",
            "donald trump",
            "donald duck is nice",
            "the duck is nice",
            "today the weather is nice",
        ]
        clients = []
        for cid in range(1, n + 1):
            words = phrases[(cid - 1) % len(phrases)].split() * (1 + cid % 3)
            agent = ClientAgent(cid, make_log(words), LocalGlimmer(platform.launch(glimmer_code)),
                                AdversaryMode(), seed=17)
            assert aggregator.enroll(EnrollRequest(cid, agent.envelope_public, agent.attest()))
            clients.append(agent)
        return clients

    return build


def validation_data(log):
    return PrivateValidationData(list(log.events), bytearray(b"aux"))


def vector(values, round_id=1):
    return ModelVector(round_id, np.array(values, dtype=np.uint64))
