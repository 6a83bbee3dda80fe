from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bcmon.faultprob import FaultModel, fault_probability, fault_probability_exact


def enumerate_tail(n, f, t, k):
    """Count every size-t sample of nodes 0..n-1 where nodes < f are malicious."""
    hits = total = 0
    for sample in combinations(range(n), t):
        total += 1
        hits += sum(1 for x in sample if x < f) >= k
    return Fraction(hits, total)


@pytest.mark.parametrize("args,want", [
    ((4, 0, 3, 1), Fraction(0)),
    ((4, 1, 3, 1), Fraction(3, 4)),
    ((7, 2, 5, 2), Fraction(10, 21)),
])
def test_known_values(args, want):
    n, f, t, k = args
    assert fault_probability_exact(FaultModel(n, f, t), k) == want
    assert fault_probability((n, f, t), k) == pytest.approx(float(want), abs=1e-12)


@pytest.mark.parametrize("bad", [(4, 5, 3), (4, -1, 3), (4, 1, 0), (4, 1, 5)])
def test_invalid_models(bad):
    with pytest.raises(ValueError):
        FaultModel(*bad)


def test_k_out_of_range():
    with pytest.raises(ValueError):
        fault_probability_exact(FaultModel(5, 2, 3), 4)


@given(st.integers(1, 9).flatmap(lambda n: st.tuples(
    st.just(n), st.integers(0, n), st.integers(1, n))).flatmap(lambda m: st.tuples(
    st.just(m), st.integers(0, m[2]))))
def test_matches_enumeration(case):
    (n, f, t), k = case
    assert fault_probability_exact(FaultModel(n, f, t), k) == enumerate_tail(n, f, t, k)


@given(st.integers(1, 10).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(1, n))))
def test_tail_is_monotone_in_k(m):
    n, f, t = m
    tail = [fault_probability_exact(FaultModel(n, f, t), k) for k in range(t + 1)]
    assert tail[0] == 1
    assert all(a >= b for a, b in zip(tail, tail[1:]))


def test_monte_carlo_agrees():
    rng = np.random.default_rng(4)
    n, f, t, k = 40, 10, 13, 5
    draws = rng.hypergeometric(f, n - f, t, size=200_000)
    p = float(fault_probability_exact(FaultModel(n, f, t), k))
    sigma = (p * (1 - p) / draws.size) ** 0.5
    assert abs((draws >= k).mean() - p) <= 3 * sigma
