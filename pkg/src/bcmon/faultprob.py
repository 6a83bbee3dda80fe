"""Probability that a random aggregation sample holds too many malicious relays.

Out of ``N`` relays ``F`` are malicious; ``T`` are sampled without
replacement. ``X`` counts malicious nodes in the sample, so ``X`` is
hypergeometric and ``P[X >= k]`` is its upper tail.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb


@dataclass(frozen=True)
class FaultModel:
    n_total: int
    f_malicious: int
    t_sample: int

    def __post_init__(self):
        if not 0 <= self.f_malicious <= self.n_total:
            raise ValueError("need 0 <= F <= N")
        if not 1 <= self.t_sample <= self.n_total:
            raise ValueError("need 1 <= T <= N")


def fault_probability_exact(model: FaultModel, k: int) -> Fraction:
    n, f, t = model.n_total, model.f_malicious, model.t_sample
    if not 0 <= k <= t:
        raise ValueError("need 0 <= k <= T")
    total = comb(n, t)
    hits = sum(comb(f, x) * comb(n - f, t - x) for x in range(k, min(f, t) + 1))
    return Fraction(hits, total)


def fault_probability(model: FaultModel | tuple[int, int, int], k: int) -> float:
    """``P[X >= k]``; pass ``k = F`` for the all-malicious-sampled case."""
    if not isinstance(model, FaultModel):
        model = FaultModel(*model)
    return float(fault_probability_exact(model, k))
