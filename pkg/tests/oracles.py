"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np
from scipy import stats as sps


def exact_signed_rank_p(e):
    """P(W+ >= observed) under random signs, by enumerating all 2^n assignments."""
    e = np.asarray([v for v in e if v != 0], dtype=float)
    ranks = sps.rankdata(np.abs(e))
    observed = ranks[e > 0].sum()
    hits = sum(
        1 for signs in itertools.product((0, 1), repeat=len(e)) if np.dot(signs, ranks) >= observed - 1e-9
    )
    return hits / 2 ** len(e)


WILCOXON_FIXTURES = [
    [0.3, 0.25, 0.2, 0.15, 0.1, -0.05],
    [0.1, 0.2, 0.3, 0.4, 0.5],
    [0.1, -0.2, 0.3, -0.4, 0.5, 0.6, 0.7],
    [0.2, 0.2, 0.2, -0.2, 0.1, 0.1, 0.3],  # ties
    [-0.1, -0.2, -0.3, 0.05, -0.4, -0.5, 0.6, -0.7, 0.8],
    [0.05 * (i + 1) * (-1) ** (i // 3) for i in range(12)],
    [0.3, 0.3, -0.3, 0.3, 0.3, 0.3, -0.1, 0.2, 0.2, 0.2],  # heavy ties
    [0.01 * (i + 1) for i in range(12)],
]
