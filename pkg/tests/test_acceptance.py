"""End-to-end properties of the whole stack over the bundled scenarios."""

import random
import sys
from pathlib import Path

import numpy as np
import pytest
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from aggregation_service import EnrollRequest, enrollment_report_data
from blinding_service import NotMissing, RevealRequest
from client_agent import expand_corpus, train_local
from conftest import V, make_log, validation_data
from crypto_suite import SCALE, ModelVector, aggregate_unblind, blind, gen_pads, public_bytes, seed_bytes
from glimmer_core import LocalGlimmer, PrivateValidationData, UnsealFailure, ValidationPolicy
from remote_glimmer import RemoteEndpoint, RemoteGlimmer, RemoteGlimmerHost
from sim_harness import load_scenario, run_scenario
from tee_emulation import PolicyMismatch, flip_byte, quote, seal, unseal, verify_quote
from utils.bus import MessageBus

ROOT = Path(__file__).parent.parent
SCENARIOS = ROOT / "scenarios"
sys.path.insert(0, str(ROOT / "scripts"))

from check_hiding import blinded_bucket_counts, chi_square_per_entry  # noqa: E402


def run(name, **kwargs):
    return run_scenario(load_scenario(SCENARIOS / f"{name}.yaml"), **kwargs).report


class TestExactAggregation:
    @pytest.mark.parametrize("n", [1, 3, 10, 100])
    @pytest.mark.parametrize("length", [1, 100, 10_000])
    def test_sum_with_dropouts(self, n, length):
        rng = np.random.default_rng(n * 7919 + length)
        pads = gen_pads(n, length, seed_bytes(n * length, "acceptance"), round_id=3)
        xs = [rng.integers(0, SCALE + 1, size=length) for _ in range(n)]
        dropped = set(range(2, n, 3))
        ys = [blind(ModelVector(3, xs[i]), pads[i]) for i in range(n) if i not in dropped]
        total = aggregate_unblind(ys, [pads[i] for i in sorted(dropped)])
        expected = np.sum([xs[i] for i in range(n) if i not in dropped], axis=0).astype(np.uint64)
        assert np.array_equal(total, expected)


def _pipeline_cases(count=50, seed=4242):
    rng = random.Random(seed)
    cases = []
    for case in range(count):
        n = rng.choice([1, 3, 10, 100])
        length = rng.choice([1, 100, 10_000])
        dropped = sorted(rng.sample(range(1, n + 1), rng.randrange(n)))
        cases.append(pytest.param(case, n, length, dropped, id=f"{case}-n{n}-len{length}-drop{len(dropped)}"))
    return cases


class TestEndToEndAggregation:
    @pytest.mark.parametrize("case, n, length, dropped", _pipeline_cases())
    def test_round_sums_match_plaintext(self, case, n, length, dropped, aggregator, blinding, glimmer, sealed_sk):
        keys = {}
        for cid in range(1, n + 1):
            keys[cid] = X25519PrivateKey.generate()
            envelope = public_bytes(keys[cid])
            attestation = glimmer.attest(enrollment_report_data(cid, envelope))
            assert aggregator.enroll(EnrollRequest(cid, envelope, attestation))

        state = aggregator.open_round(1, length, deadline=1)
        issues = blinding.provision_round(state.roster, seed_bytes(case, "end-to-end"))
        rng = np.random.default_rng(case)
        kept = []
        for issue in issues:
            cid = issue.client_id
            entries = rng.integers(0, SCALE + 1, size=length, dtype=np.uint64)
            if cid in dropped:
                continue
            kept.append(entries.copy())
            sc = glimmer.process(ModelVector(1, entries), PrivateValidationData(), issue.open(keys[cid]),
                                 sealed_sk, ValidationPolicy.range_check(), cid)
            assert aggregator.accept(sc, state).accepted

        model = aggregator.finalize_round(state, blinding, tick=1)
        oracle = np.sum(kept, axis=0, dtype=np.int64)
        assert model.sums.tolist() == oracle.tolist()
        assert model.submitter_count == n - len(dropped)
        assert sorted(blinding.disclosures) == [(1, cid) for cid in dropped]


class TestRejectedOutlier:
    def test_alice_538(self):
        report = run("alice_538", capture=True)
        (record,) = report.rounds
        assert record["accepted"] == [2, 3, 4, 5]
        assert record["rejected_clients"] == [[1, "BadSignature"]]
        assert record["events"]["1"] == ["glimmer_refused:out_of_range", "bypassed_glimmer"]
        assert "trump" not in record["predictions"]["donald"]
        assert record["exact"]
        assert report.invariant_violations == 0


class TestDropoutRepair:
    def test_dropout_3_of_10(self):
        report = run("dropout_3_of_10")
        first, second = report.rounds
        assert first["dropouts_revealed"] == [3, 7, 9]
        assert second["dropouts_revealed"] == [1]
        assert first["submitter_count"] == 7 and second["submitter_count"] == 9
        assert first["exact"] and second["exact"]
        assert report.invariant_violations == 0

    def test_submitted_client_pad_never_revealed(self, enrolled_clients, aggregator, blinding):
        enrolled_clients(3)
        state = aggregator.open_round(1, V * V, deadline=1)
        blinding.provision_round(state.roster, seed_bytes(1, "pads"))
        request = RevealRequest.create(1, [1, 2], [1, 3], aggregator.credential_key)
        with pytest.raises(NotMissing):
            blinding.reveal_dropout_pads(request)
        assert blinding.disclosures == []


class TestHiding:
    def test_blinded_entries_are_uniform(self):
        counts = blinded_bucket_counts([0, SCALE // 2, SCALE, 538 * SCALE], n_seeds=10_000)
        assert counts.sum(axis=1).tolist() == [10_000] * 4
        for result in chi_square_per_entry(counts):
            assert result.pvalue >= 0.001

    @pytest.mark.parametrize("name", ["honest_10", "dropout_3_of_10", "remote", "trending_trump"])
    def test_no_plaintext_in_honest_transcripts(self, name):
        report = run(name, capture=True)
        assert report.invariant_violations == 0
        assert report.run["sentinels"]


class TestTamperedGlimmer:
    def test_every_flipped_byte_is_locked_out(self, platform, glimmer_code, approved, sealed_sk):
        rng = random.Random(538)
        for index in [rng.randrange(len(glimmer_code)) for _ in range(100)]:
            ctx = platform.launch(flip_byte(glimmer_code, index))
            with pytest.raises(PolicyMismatch):
                unseal(sealed_sk, ctx)
            assert not verify_quote(quote(ctx, b"enroll"), approved, platform.attestation_public_key)

    def test_tampered_glimmer_cannot_endorse(self, platform, glimmer_code, sealed_sk):
        log = make_log("the weather is nice today".split())
        glimmer = LocalGlimmer(platform.launch(flip_byte(glimmer_code)))
        with pytest.raises(UnsealFailure):
            glimmer.process(train_local(log, V, 1), validation_data(log), None, sealed_sk,
                            ValidationPolicy.range_check(), 1, public=True)

    def test_tampered_scenario(self):
        report = run("tampered", capture=True)
        (record,) = report.rounds
        assert record["accepted"] == [3, 4]
        assert record["dropouts_revealed"] == [1, 2]
        assert record["exact"]
        assert report.invariant_violations == 0


class TestConfidentialScenario:
    def test_verdicts_and_audits(self):
        report = run("confidential", capture=True)
        (record,) = [r for r in report.records if r["type"] == "confidential"]
        results = record["results"]
        assert {cid: r["verdict"] for cid, r in results.items()} == {"1": 1, "2": 0, "3": 0}
        assert all(r["audit"] == "Pass" and r["version"] == 3 for r in results.values())
        assert report.invariant_violations == 0


@pytest.fixture
def remote(platform, glimmer_code, approved):
    bus = MessageBus(capture=True)
    host = RemoteGlimmerHost("remote:box", platform, glimmer_code)
    bus.register(host.name, host.handle)
    return RemoteGlimmer(RemoteEndpoint(host.name, approved, platform.attestation_public_key), bus, "client:1")


class TestLocalRemoteEquivalence:
    @pytest.mark.parametrize("seed", range(20))
    def test_same_bytes(self, seed, glimmer, remote, platform, approved, sealed_sk):
        phrases = [([0, 4, 5, 6, 7], 2), ([1, 2], seed % 4), ([1, 3], 1)]
        log = expand_corpus(phrases, V, seed)
        (pad,) = gen_pads(1, V * V, seed_bytes(seed, "equivalence"), round_id=1)
        sealed_pad = seal(pad.to_bytes(), approved, platform.launch(b"dealer"))
        policy = ValidationPolicy.composite(ValidationPolicy.range_check(), ValidationPolicy.corroboration())
        local = glimmer.process(train_local(log, V, 1), validation_data(log), sealed_pad, sealed_sk, policy, 1)
        far = remote.process(train_local(log, V, 1), validation_data(log), sealed_pad, sealed_sk, policy, 1)
        assert far.to_bytes() == local.to_bytes()


class TestTrendingTopic:
    def test_trump_follows_donald(self):
        report = run("trending_trump")
        (record,) = report.rounds
        assert record["predictions"]["donald"][0] == "trump"
        assert record["predictions"] == record["oracle_predictions"]


class TestDeterminism:
    @pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.yaml")), ids=lambda p: p.stem)
    def test_reports_repeat_exactly(self, path):
        config = load_scenario(path)
        assert run_scenario(config).report.to_jsonl() == run_scenario(config).report.to_jsonl()


class TestScenarioOutcomes:
    @pytest.mark.parametrize("name", [
        "tampered", "replay", "fabricated_corroboration", "fabricated_range", "public_poll", "remote",
    ])
    def test_adversarial_scenarios_hold(self, name):
        report = run(name, capture=True)
        assert report.invariant_violations == 0
        assert all(r["exact"] for r in report.rounds)
    def test_range_check_alone_admits_fabrication(self):
        (record,) = run("fabricated_range").rounds
        assert 1 in record["accepted"]

    def test_corroboration_refuses_fabrication(self):
        (record,) = run("fabricated_corroboration").rounds
        assert 1 not in record["accepted"]
        assert record["events"]["1"] == ["glimmer_refused:uncorroborated"]

    def test_replayed_payloads_rejected(self):
        first, second = run("replay").rounds
        assert first["rejections"] == {"Replay": 1}
        assert second["rejections"] == {"Replay": 1, "RoundClosed": 1}
        assert 1 in first["accepted"] and 1 in second["accepted"]
