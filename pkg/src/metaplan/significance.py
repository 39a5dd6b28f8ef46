"""One-sided Mann-Whitney U test for small run-reward samples.

Exact p-values come from enumerating every split of the pooled sample (so
ties are handled by the permutation distribution of the midrank statistic);
larger samples fall back to the tie-corrected normal approximation.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Sequence

EXACT_MAX_RUNS = 8


def midranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    return ranks


def u_statistic(x: Sequence[float], y: Sequence[float]) -> float:
    """U for ``x``: number of (x, y) pairs with x > y, ties counting one half."""
    ranks = midranks(list(x) + list(y))
    n1 = len(x)
    return sum(ranks[:n1]) - n1 * (n1 + 1) / 2


def exact_p_greater(x: Sequence[float], y: Sequence[float]) -> Fraction:
    """P(U >= observed) over all relabelings of the pooled sample."""
    pooled = list(x) + list(y)
    n1 = len(x)
    # Doubled midranks are integers, which keeps the comparison exact.
    doubled = [int(round(2 * r)) for r in midranks(pooled)]
    observed = sum(doubled[:n1])
    hits = total = 0
    for combo in itertools.combinations(range(len(pooled)), n1):
        total += 1
        if sum(doubled[i] for i in combo) >= observed:
            hits += 1
    return Fraction(hits, total)


def normal_p_greater(x: Sequence[float], y: Sequence[float], continuity: bool = True) -> float:
    n1, n2 = len(x), len(y)
    pooled = list(x) + list(y)
    n = n1 + n2
    u = u_statistic(x, y)
    mean = n1 * n2 / 2
    tie_term = 0.0
    for count in _tie_counts(pooled):
        tie_term += count**3 - count
    var = n1 * n2 / 12 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (u - mean - (0.5 if continuity else 0.0)) / math.sqrt(var)
    return 0.5 * math.erfc(z / math.sqrt(2))


def _tie_counts(values: Sequence[float]) -> list[int]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return list(counts.values())


def mann_whitney_greater(x: Sequence[float], y: Sequence[float], exact_max: int = EXACT_MAX_RUNS) -> float:
    """p-value for H1: ``x`` is stochastically greater than ``y``."""
    if not x or not y:
        raise ValueError("both samples need at least one value")
    if len(x) <= exact_max and len(y) <= exact_max:
        return float(exact_p_greater(x, y))
    return normal_p_greater(x, y)
