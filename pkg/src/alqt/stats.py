"""Wilcoxon signed-rank test for paired per-sample metric comparisons.

Zero differences are dropped (Wilcoxon's original rule), |d| is ranked with
average ranks for ties, and W = min(W+, W-). The two-sided p-value is exact
for n_effective <= 20 (dynamic programming over the rank-sum distribution
when there are no ties, direct 2^n sign enumeration with ties) and a
tie-corrected normal approximation with 0.5 continuity correction above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import ContractError

EXACT_LIMIT = 20


@dataclass
class WilcoxonResult:
    n_effective: int
    w_plus: float
    w_minus: float
    statistic: float      # W = min(W+, W-)
    p_value: float        # two-sided, in (0, 1]
    method: str           # "exact" | "normal-approximation"

    def to_dict(self) -> dict:
        return {
            "n_effective": self.n_effective,
            "w_plus": self.w_plus,
            "w_minus": self.w_minus,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
        }


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n of `values` with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg = (i + j + 2) / 2.0  # ranks are 1-based
        ranks[order[i:j + 1]] = avg
        i = j + 1
    return ranks


def _exact_p_no_ties(n: int, w: float) -> float:
    """P-style exact tail via the integer rank-sum distribution.

    counts[s] = number of sign assignments with W+ == s, built by the
    classic DP over ranks 1..n.
    """
    total = n * (n + 1) // 2
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in range(1, n + 1):
        counts[r:] += counts[:-r].copy()
    cdf = counts.cumsum()
    w_int = int(np.floor(w + 1e-9))
    p = 2.0 * cdf[min(w_int, total)] / (2.0 ** n)
    return min(1.0, p)


def _exact_p_enumeration(ranks: np.ndarray, w: float) -> float:
    """Exact tail by enumerating all 2^n sign assignments (handles ties)."""
    sums = np.zeros(1, dtype=np.float64)
    for r in ranks:
        sums = np.concatenate([sums, sums + r])
    p = 2.0 * float((sums <= w + 1e-9).mean())
    return min(1.0, p)


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"wilcoxon: need equal-length 1-D sequences, got {x.shape}/{y.shape}")
    if x.size == 0:
        raise ContractError("wilcoxon: empty input")

    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0, 0.0, 0.0, 0.0, 1.0, "exact")

    absd = np.abs(d)
    ranks = _average_ranks(absd)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    has_ties = len(np.unique(absd)) != n
    if n <= EXACT_LIMIT:
        if has_ties:
            p = _exact_p_enumeration(ranks, w)
        else:
            p = _exact_p_no_ties(n, w)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        # tie correction: subtract sum(t^3 - t)/48 over tie groups
        _, tie_counts = np.unique(absd, return_counts=True)
        var -= float(((tie_counts ** 3 - tie_counts).sum())) / 48.0
        if var <= 0:
            return WilcoxonResult(n, w_plus, w_minus, w, 1.0, "normal-approximation")
        z = (w - mean + 0.5) / np.sqrt(var)
        p = min(1.0, max(float(2.0 * norm.cdf(z)), np.nextafter(0, 1)))
        method = "normal-approximation"

    return WilcoxonResult(n, w_plus, w_minus, w, float(p), method)
