from bcmon.crypto.bls import (
    AggregateProof,
    AggregateRegistry,
    AggregationError,
    RelayKeyPair,
    aggregate,
    decode_proof,
    encode_proof,
    hash_to_g2,
    relay_keygen,
    relay_sign,
    relay_verify,
    verify_aggregate_same_message,
)
from bcmon.crypto.client import ClientKeyPair, address_of, client_keygen, client_sign, client_verify
from bcmon.crypto.groups import BilinearGroup, Bls12381Group, ToyGroup, get_group

__all__ = [
    "AggregateProof", "AggregateRegistry", "AggregationError", "RelayKeyPair", "aggregate",
    "decode_proof", "encode_proof", "hash_to_g2", "relay_keygen", "relay_sign", "relay_verify",
    "verify_aggregate_same_message", "ClientKeyPair", "address_of", "client_keygen",
    "client_sign", "client_verify", "BilinearGroup", "Bls12381Group", "ToyGroup", "get_group",
]
