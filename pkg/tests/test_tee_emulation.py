"""Tests for the emulated enclave: measurement, sealing, quotes and the private heap."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tee_emulation import (
    QUOTE_SIZE,
    EnclaveDestroyed,
    HeapAccessViolation,
    IntegrityFailure,
    PolicyMismatch,
    Quote,
    SealedBlob,
    TeePlatform,
    flip_byte,
    measure,
    quote,
    seal,
    unseal,
    verify_quote,
)

CODE = b"some enclave program"


class TestMeasurement:
    def test_deterministic(self):
        assert measure(CODE) == measure(bytes(CODE))

    def test_empty_code_is_measurable(self):
        assert len(measure(b"").to_bytes()) == 32

    @given(code=st.binary(min_size=1, max_size=256), index=st.integers(min_value=0))
    @settings(max_examples=100, deadline=None)
    def test_single_byte_change_changes_measurement(self, code, index):
        assert measure(flip_byte(code, index % len(code))) != measure(code)


class TestSealing:
    def test_roundtrip_in_target_enclave(self, platform):
        sealer = platform.launch(b"sealer")
        target = platform.launch(CODE)
        blob = seal(b"secret", target.measurement, sealer)
        assert unseal(blob, target) == b"secret"

    def test_wrong_enclave_refused(self, platform):
        sealer = platform.launch(b"sealer")
        blob = seal(b"secret", measure(CODE), sealer)
        with pytest.raises(PolicyMismatch):
            unseal(blob, platform.launch(flip_byte(CODE)))

    def test_modified_ciphertext_refused(self, platform):
        ctx = platform.launch(CODE)
        blob = seal(b"secret", ctx.measurement, ctx)
        broken = dataclasses.replace(blob, ciphertext=flip_byte(blob.ciphertext, 0))
        with pytest.raises(IntegrityFailure):
            unseal(broken, ctx)

    def test_other_platform_cannot_unseal(self, platform):
        blob = seal(b"secret", measure(CODE), platform.launch(b"sealer"))
        other = TeePlatform(b"another-machine")
        with pytest.raises(IntegrityFailure):
            unseal(blob, other.launch(CODE))

    def test_fresh_nonce_per_seal(self, platform):
        ctx = platform.launch(CODE)
        assert seal(b"x", ctx.measurement, ctx).nonce != seal(b"x", ctx.measurement, ctx).nonce

    def test_blob_wire_form(self, platform):
        ctx = platform.launch(CODE)
        blob = seal(b"payload", ctx.measurement, ctx)
        assert SealedBlob.from_bytes(blob.to_bytes()) == blob


class TestQuotes:
    def test_verify_against_expected_measurement(self, platform):
        ctx = platform.launch(CODE)
        q = quote(ctx, b"nonce")
        assert len(q.to_bytes()) == QUOTE_SIZE
        assert q.report_data == b"nonce".ljust(64, b"\x00")
        assert verify_quote(q, measure(CODE), platform.attestation_public_key)
        assert not verify_quote(q, measure(flip_byte(CODE)), platform.attestation_public_key)

    def test_report_data_limit(self, platform):
        with pytest.raises(ValueError):
            quote(platform.launch(CODE), bytes(65))

    def test_altered_report_data_fails(self, platform):
        q = quote(platform.launch(CODE), b"a" * 64)
        forged = Quote(q.measurement, b"b" * 64, q.signature)
        assert not verify_quote(forged, q.measurement, platform.attestation_public_key)

    def test_foreign_root_fails(self, platform):
        q = quote(platform.launch(CODE), b"")
        other = TeePlatform(b"another-machine")
        assert not verify_quote(q, q.measurement, other.attestation_public_key)

    def test_destroyed_enclave_cannot_quote(self, platform):
        ctx = platform.launch(CODE)
        ctx.destroy()
        with pytest.raises(EnclaveDestroyed):
            quote(ctx, b"")


class TestHeap:
    def test_host_access_detected_in_debug(self, platform):
        ctx = platform.launch(CODE)
        with pytest.raises(HeapAccessViolation):
            ctx.heap.get("contribution")

    def test_zeroize_wipes_and_records(self):
        ctx = TeePlatform(b"release-build").launch(CODE)
        buf = np.arange(5, dtype=np.uint64)
        secret = bytearray(b"key material")
        ctx.heap.put("contribution", buf)
        ctx.heap.put("signing_key", secret)
        ctx.zeroize_heap()
        assert not buf.any()
        assert secret == bytearray(len(secret))
        assert len(ctx.heap) == 0
        assert ("zeroized", "contribution") in ctx.debug_events
        assert ("zeroized", "signing_key") in ctx.debug_events

    def test_heap_repr_hides_contents(self):
        ctx = TeePlatform(b"release-build").launch(CODE)
        ctx.heap.put("signing_key", bytearray(b"topsecret"))
        assert "topsecret" not in repr(ctx.heap)
