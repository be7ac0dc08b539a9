"""Tests for pad issuance and the dropout reveal protocol."""

import numpy as np
import pytest
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from blinding_service import (
    BlindingClient,
    BlindingService,
    EmptyRoster,
    IncompleteProof,
    NotInRoster,
    NotMissing,
    RevealRequest,
    RoundRoster,
    Unauthorized,
    UnknownRound,
    decode_reveal_response,
    encode_reveal_refusal,
    open_pad_issue,
)
from crypto_suite import DecryptFailure, Pad, public_bytes, signing_key_from_seed
from tee_emulation import PolicyMismatch, unseal
from utils.bus import MessageBus

SEED = bytes(range(32))
VECTOR_LENGTH = 16


@pytest.fixture
def client_keys():
    return {cid: X25519PrivateKey.from_private_bytes(bytes([cid]) * 32) for cid in range(1, 6)}


@pytest.fixture
def roster(client_keys, approved):
    participants = [(cid, public_bytes(key)) for cid, key in client_keys.items()]
    return RoundRoster(1, participants, approved, VECTOR_LENGTH).freeze()


@pytest.fixture
def credential():
    return signing_key_from_seed(b"aggregator", b"credential")


@pytest.fixture(params=[False, True], ids=["host", "enclave"])
def service(request, platform, credential):
    return BlindingService(platform, public_bytes(credential), host_in_enclave=request.param)


def _open_pads(issues, client_keys, glimmer_ctx):
    return {issue.client_id: Pad.from_bytes(unseal(issue.open(client_keys[issue.client_id]), glimmer_ctx))
            for issue in issues}


class TestRoster:
    def test_duplicate_ids_refused(self, approved):
        with pytest.raises(ValueError):
            RoundRoster(1, [(1, bytes(32)), (1, bytes(32))], approved, 4)

    def test_frozen_roster_is_immutable(self, roster):
        with pytest.raises(ValueError):
            roster.add(99, bytes(32))

    def test_empty_roster(self, service, approved):
        with pytest.raises(EmptyRoster):
            service.provision_round(RoundRoster(1, [], approved, 4).freeze(), SEED)

    def test_unfrozen_roster(self, service, approved):
        with pytest.raises(ValueError):
            service.provision_round(RoundRoster(1, [(1, bytes(32))], approved, 4), SEED)


class TestIssuance:
    def test_pads_sum_to_zero_through_glimmer(self, service, roster, client_keys, platform, glimmer_code):
        issues = service.provision_round(roster, SEED)
        assert [i.client_id for i in issues] == roster.client_ids
        pads = _open_pads(issues, client_keys, platform.launch(glimmer_code))
        total = np.zeros(VECTOR_LENGTH, dtype=np.uint64)
        for pad in pads.values():
            total += pad.entries
        assert not total.any()

    def test_envelope_only_opens_for_its_client(self, service, roster, client_keys):
        issue = service.provision_round(roster, SEED)[0]
        with pytest.raises(DecryptFailure):
            issue.open(client_keys[2])
        with pytest.raises(ValueError):
            open_pad_issue(issue, client_keys[1], expected_client=2)

    def test_sealed_pad_only_opens_in_glimmer(self, service, roster, client_keys, platform):
        issue = service.provision_round(roster, SEED)[0]
        with pytest.raises(PolicyMismatch):
            unseal(issue.open(client_keys[1]), platform.launch(b"client host process"))

    def test_round_provisioned_once(self, service, roster):
        service.provision_round(roster, SEED)
        with pytest.raises(ValueError):
            service.provision_round(roster, SEED)


class TestReveal:
    def test_reveals_exactly_the_missing(self, service, roster, credential, client_keys, platform, glimmer_code):
        issued = _open_pads(service.provision_round(roster, SEED), client_keys, platform.launch(glimmer_code))
        revealed = service.reveal_dropout_pads(RevealRequest.create(1, [2, 4], [1, 3, 5], credential))
        assert [cid for cid, _ in revealed] == [2, 4]
        for cid, pad in revealed:
            assert pad == issued[cid]
        assert service.disclosures == [(1, 2), (1, 4)]

    def test_accepted_client_is_not_missing(self, service, roster, credential):
        service.provision_round(roster, SEED)
        with pytest.raises(NotMissing):
            service.reveal_dropout_pads(RevealRequest.create(1, [2, 3], [1, 2, 3, 4, 5], credential))
        assert service.disclosures == []

    def test_earlier_reveal_blocks_later_acceptance(self, service, roster, credential):
        service.provision_round(roster, SEED)
        service.reveal_dropout_pads(RevealRequest.create(1, [2], [1, 3, 4, 5], credential))
        with pytest.raises(NotMissing):
            service.reveal_dropout_pads(RevealRequest.create(1, [3], [1, 2, 4, 5], credential))

    def test_outsider(self, service, roster, credential):
        service.provision_round(roster, SEED)
        with pytest.raises(NotInRoster):
            service.reveal_dropout_pads(RevealRequest.create(1, [42], [1, 2, 3, 4, 5], credential))

    def test_incomplete_proof(self, service, roster, credential):
        service.provision_round(roster, SEED)
        with pytest.raises(IncompleteProof):
            service.reveal_dropout_pads(RevealRequest.create(1, [2], [1, 3], credential))

    def test_unsigned_request(self, service, roster):
        service.provision_round(roster, SEED)
        forger = signing_key_from_seed(b"not the aggregator")
        with pytest.raises(Unauthorized):
            service.reveal_dropout_pads(RevealRequest.create(1, [2], [1, 3, 4, 5], forger))

    def test_closed_round_forgets_pads(self, service, roster, credential):
        service.provision_round(roster, SEED)
        assert service.retained_count(1) == 5
        service.close_round(1)
        assert not service.is_open(1)
        with pytest.raises(UnknownRound):
            service.reveal_dropout_pads(RevealRequest.create(1, [2], [1, 3, 4, 5], credential))


class TestOverBus:
    def test_reveal_and_refusal_cross_the_bus(self, service, roster, credential):
        service.provision_round(roster, SEED)
        bus = MessageBus()
        bus.register("blinding", service.handle)
        client = BlindingClient(bus, "aggregator", "blinding")
        assert [cid for cid, _ in client.request_reveal(RevealRequest.create(1, [5], [1, 2, 3, 4], credential))] == [5]
        with pytest.raises(NotMissing):
            client.request_reveal(RevealRequest.create(1, [1], [1, 2, 3, 4, 5], credential))

    def test_refusal_codec_keeps_class(self):
        with pytest.raises(IncompleteProof):
            decode_reveal_response(encode_reveal_refusal(IncompleteProof("gap")))

    def test_request_wire_form(self, credential):
        request = RevealRequest.create(3, [9, 1], [2], credential)
        assert request.missing == (1, 9)
        assert RevealRequest.from_bytes(request.to_bytes()) == request
