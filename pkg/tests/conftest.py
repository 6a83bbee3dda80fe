import pytest

from bcmon.crypto import get_group


@pytest.fixture(scope="session")
def bls():
    return get_group("bls12-381")


@pytest.fixture(scope="session")
def toy():
    return get_group("toy")


@pytest.fixture(params=["bls12-381", "toy"], scope="session")
def group(request):
    return get_group(request.param)


def pairing_product_oracle(group, subsig, signers):
    """Distinct-message aggregate check: e(g1, subsig) == prod e(bpk_i, H(m_i)).

    ``signers`` is a list of ``(bpk, message)``. Independent of the
    same-message verifier under test: no registry, no mask, one pairing per
    signer.
    """
    lhs = group.pair(group.g1, subsig)
    rhs = group.gt_one()
    for bpk, msg in signers:
        rhs = group.gt_mul(rhs, group.pair(bpk, group.hash_to_g2(msg)))
    return lhs == rhs


def attest_hex(committee, tag, payload, signers=None):
    """Proof hex over ``payload`` signed by relay indices ``signers`` (default: a quorum)."""
    from bcmon.crypto.bls import aggregate, encode_proof, relay_sign
    from bcmon.records import attest_message

    signers = list(range(committee.quorum)) if signers is None else signers
    msg = attest_message(tag, payload)
    sigs = [(i, relay_sign(committee.keys[i], msg), committee.keys[i].bpk) for i in signers]
    return encode_proof(aggregate(sigs, committee.n, committee.group), committee.group).hex()


@pytest.fixture(scope="session")
def committee4(toy):
    from bcmon.committee import Committee

    return Committee.generate(4, toy, seed=99)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
