import os
import random

import pytest
from hypothesis import given, settings, strategies as st

from bcmon.crypto import (
    AggregateRegistry,
    AggregationError,
    RelayKeyPair,
    aggregate,
    client_keygen,
    client_sign,
    client_verify,
    decode_proof,
    encode_proof,
    hash_to_g2,
    relay_keygen,
    relay_sign,
    relay_verify,
    verify_aggregate_same_message,
)
from bcmon.crypto.bls import mask_from_bytes, mask_to_bytes
from conftest import pairing_product_oracle


def test_bilinearity(group):
    rng = random.Random(7)
    base = group.pair(group.g1, group.g2)
    assert base != group.gt_one()
    for _ in range(100 if group.name == "toy" else 20):
        a, b = rng.randrange(1, group.order), rng.randrange(1, group.order)
        lhs = group.pair(group.g1_mul(group.g1, a), group.g2_mul(group.g2, b))
        assert lhs == group.gt_pow(base, a * b)


def test_keygen_exponent_one(group):
    kp = RelayKeyPair.from_secret(1, group)
    assert group.g1_eq(kp.bpk, group.g1)
    assert group.g2_eq(relay_sign(kp, b"m"), group.hash_to_g2(b"m"))


def test_keygen_rejects_zero(group):
    with pytest.raises(ValueError):
        RelayKeyPair.from_secret(0, group)
    kp = relay_keygen(b"seed", group)
    assert 0 < kp.bsk < group.order
    assert group.g1_eq(kp.bpk, group.g1_mul(group.g1, kp.bsk))


def test_keygen_distinct_seeds(toy):
    keys = {relay_keygen(i, toy).bsk for i in range(1000)}
    assert len(keys) == 1000


def test_hash_to_g2(group):
    assert group.g2_eq(hash_to_g2(b"abc", group), hash_to_g2(b"abc", group))
    empty = hash_to_g2(b"", group)
    assert not group.g2_eq(empty, group.g2_identity())
    n = 10000 if group.name == "toy" else 1000
    rng = random.Random(1)
    seen = set()
    for _ in range(n):
        m = rng.randbytes(16)
        seen.add(group.g2_to_bytes(hash_to_g2(m, group)))
    assert len(seen) == n


def test_sign_verify_roundtrip_and_binding(group):
    kp = relay_keygen(42, group)
    sig = relay_sign(kp, b"request")
    assert relay_verify(sig, kp.bpk, b"request", group)
    assert not relay_verify(sig, kp.bpk, b"requesT", group)
    other = relay_keygen(43, group)
    assert not relay_verify(sig, other.bpk, b"request", group)
    assert not relay_verify(group.g2_identity(), other.bpk, b"request", group)


def test_verify_malformed_bytes_is_false(bls):
    kp = relay_keygen(3, bls)
    assert not relay_verify(os.urandom(96), kp.bpk, b"m", bls)
    assert not relay_verify(b"\x00" * 5, kp.bpk, b"m", bls)
    sig = bls.g2_to_bytes(relay_sign(kp, b"m"))
    assert relay_verify(sig, kp.bpk_bytes, b"m", bls)
    # infinity flag with junk payload must not decode as the identity
    junk = bytes([0xC0 | 0x01]) + os.urandom(95)
    assert not relay_verify(junk, kp.bpk, b"m", bls)


def _committee(group, n, seed=0):
    return [relay_keygen(f"{seed}-{i}", group) for i in range(n)]


def test_aggregate_singleton(group):
    kps = _committee(group, 4)
    sig = relay_sign(kps[2], b"m")
    proof = aggregate([(2, sig, kps[2].bpk)], 4, group)
    assert group.g2_eq(proof.subsig, sig)
    assert proof.mask == (0, 0, 1, 0)


def test_aggregate_duplicate_index(group):
    kps = _committee(group, 4)
    sig = relay_sign(kps[1], b"m")
    with pytest.raises(AggregationError):
        aggregate([(1, sig, kps[1].bpk), (1, sig, kps[1].bpk)], 4, group)


def test_aggregate_three_signers_matches_oracle(group):
    kps = _committee(group, 4)
    reg = AggregateRegistry.from_keypairs(kps)
    parts = [(i, relay_sign(kps[i], b"req"), kps[i].bpk) for i in (0, 1, 3)]
    proof = aggregate(parts, 4, group)
    assert pairing_product_oracle(group, proof.subsig, [(kps[i].bpk, b"req") for i in (0, 1, 3)])
    assert verify_aggregate_same_message(proof, reg, b"req", 3)
    assert not verify_aggregate_same_message(proof, reg, b"req", 4)
    assert not verify_aggregate_same_message(proof, reg, b"reX", 3)


def test_mask_flip_claims_non_signer(group):
    kps = _committee(group, 4)
    reg = AggregateRegistry.from_keypairs(kps)
    proof = aggregate([(i, relay_sign(kps[i], b"m"), kps[i].bpk) for i in range(3)], 4, group)
    flipped = type(proof)(proof.subsig, proof.subpub, (1, 1, 1, 1))
    assert not verify_aggregate_same_message(flipped, reg, b"m", 3)
    with pytest.raises(AggregationError):
        verify_aggregate_same_message(type(proof)(proof.subsig, proof.subpub, (1, 1, 1)), reg, b"m", 3)


def test_removing_member_signature_breaks_proof(group):
    kps = _committee(group, 5)
    reg = AggregateRegistry.from_keypairs(kps)
    sigs = [relay_sign(k, b"x") for k in kps]
    proof = aggregate([(i, sigs[i], kps[i].bpk) for i in range(4)], 5, group)
    partial = aggregate([(i, sigs[i], kps[i].bpk) for i in range(3)], 5, group)
    forged = type(proof)(partial.subsig, proof.subpub, proof.mask)
    assert verify_aggregate_same_message(proof, reg, b"x", 3)
    assert not verify_aggregate_same_message(forged, reg, b"x", 3)


def test_proof_encoding_roundtrip(group):
    kps = _committee(group, 9)
    proof = aggregate([(i, relay_sign(kps[i], b"m"), kps[i].bpk) for i in (0, 4, 8)], 9, group)
    data = encode_proof(proof, group)
    assert data == encode_proof(decode_proof(data, group), group)
    back = decode_proof(data, group)
    assert back.mask == proof.mask
    with pytest.raises(ValueError):
        decode_proof(data + b"\x00", group)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=40))
def test_mask_bytes_roundtrip(mask):
    assert mask_from_bytes(mask_to_bytes(mask)) == tuple(mask)


@settings(max_examples=50, deadline=None)
@given(st.binary(max_size=64), st.integers(min_value=1, max_value=2**64))
def test_toy_sign_verify_property(msg, seed):
    from bcmon.crypto import get_group
    toy = get_group("toy")
    kp = relay_keygen(seed, toy)
    assert relay_verify(relay_sign(kp, msg), kp.bpk, msg, toy)
    assert not relay_verify(relay_sign(kp, msg), kp.bpk, msg + b"!", toy)


def test_client_signatures():
    a, b = client_keygen(1), client_keygen(2)
    sig = client_sign(a, b"payload")
    assert client_verify(a.pk, b"payload", sig)
    assert client_sign(a, b"payload") == sig  # deterministic nonce
    tampered = bytearray(sig)
    tampered[10] ^= 1
    assert not client_verify(a.pk, b"payload", bytes(tampered))
    assert not client_verify(a.pk, b"payloaD", sig)
    assert not client_verify(b.pk, b"payload", sig)
    assert not client_verify(a.pk, b"payload", b"short")
    assert a.address != b.address and a.address.startswith("0x") and len(a.address) == 42
