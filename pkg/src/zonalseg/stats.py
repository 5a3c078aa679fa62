"""Friedman test and Bonferroni-Dunn post hoc comparison against a control method."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as st



@dataclass
class RankTable:
    ranks: np.ndarray  # (N, k), 1 = best
    mean_ranks: np.ndarray  # (k,)

    @property
    def n_blocks(self):
        return self.ranks.shape[0]

    @property
    def n_methods(self):
        return self.ranks.shape[1]


def _check(scores):
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2:
        raise ValueError(f"scores must be an N x k matrix, got shape {scores.shape}")
    n, k = scores.shape
    if n < 2 or k < 2:
        raise ValueError(f"need N >= 2 blocks and k >= 2 methods, got N={n}, k={k}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    return scores


def rank_table(scores, higher_is_better=True):
    """Rank methods within each block; ties share the average rank."""
    scores = _check(scores)
    keyed = -scores if higher_is_better else scores
    ranks = np.vstack([st.rankdata(row, method="average") for row in keyed])
    return RankTable(ranks, ranks.mean(axis=0))


@dataclass
class FriedmanResult:
    statistic: float
    p_value: float
    mean_ranks: np.ndarray
    n_blocks: int
    n_methods: int
    iman_davenport: float = math.nan
    p_value_f: float = math.nan


def friedman(scores, higher_is_better=True, f_refinement=False):
    """Friedman chi-square statistic on average ranks.

    ``chi2 = 12 N / (k (k + 1)) * (sum_j R_j^2 - k (k + 1)^2 / 4)`` with the
    p-value from the chi-square upper tail on ``k - 1`` degrees of freedom.
    With ``f_refinement`` the Iman-Davenport F statistic and its p-value are
    filled in as well.
    """
    table = rank_table(scores, higher_is_better)
    n, k = table.n_blocks, table.n_methods
    r = table.mean_ranks
    chi2 = 12.0 * n / (k * (k + 1)) * (np.sum(r**2) - k * (k + 1) ** 2 / 4.0)
    chi2 = max(float(chi2), 0.0)
    if chi2 < 1e-12:
        chi2 = 0.0
    p = float(st.chi2.sf(chi2, k - 1)) if chi2 > 0 else 1.0
    result = FriedmanResult(chi2, p, r, n, k)
    if f_refinement:
        denom = n * (k - 1) - chi2
        if denom > 0:
            ff = (n - 1) * chi2 / denom
            result.iman_davenport = float(ff)
            result.p_value_f = float(st.f.sf(ff, k - 1, (k - 1) * (n - 1)))
        else:
            result.iman_davenport = math.inf
            result.p_value_f = 0.0
    return result


# Two-tailed Bonferroni-Dunn critical values q_alpha for k = 2..10 methods,
# i.e. z(1 - alpha / (2 (k - 1))) to three decimals, as in the standard
# printed table. That table lists 2.724 for k = 9, alpha = 0.05; the quantile
# it tabulates is 2.734, which is used here.
BONFERRONI_DUNN_Q = {
    0.05: {2: 1.960, 3: 2.241, 4: 2.394, 5: 2.498, 6: 2.576, 7: 2.638, 8: 2.690, 9: 2.734, 10: 2.773},
    0.10: {2: 1.645, 3: 1.960, 4: 2.128, 5: 2.241, 6: 2.326, 7: 2.394, 8: 2.450, 9: 2.498, 10: 2.539},
}


def critical_value(k, alpha=0.05):
    table = BONFERRONI_DUNN_Q.get(alpha)
    if table is None:
        raise ValueError(f"alpha {alpha} not tabulated; supported: {sorted(BONFERRONI_DUNN_Q)}")
    if k not in table:
        raise ValueError(f"Bonferroni-Dunn critical values are tabulated for k in {min(table)}..{max(table)}, got k={k}")
    return table[k]


def critical_difference(k, n, alpha=0.05):
    return critical_value(k, alpha) * math.sqrt(k * (k + 1) / (6.0 * n))


@dataclass
class BonferroniDunnResult:
    cd: float
    control: int
    mean_ranks: np.ndarray
    significant: list  # per method: differs from control
    q_alpha: float
    alpha: float


def bonferroni_dunn(scores, control=None, alpha=0.05, higher_is_better=True):
    """Compare every method with ``control`` (default: best mean rank)."""
    table = rank_table(scores, higher_is_better)
    n, k = table.n_blocks, table.n_methods
    q = critical_value(k, alpha)
    cd = q * math.sqrt(k * (k + 1) / (6.0 * n))
    r = table.mean_ranks
    if control is None:
        control = int(np.argmin(r))
    if not 0 <= control < k:
        raise ValueError(f"control index {control} out of range for {k} methods")
    sig = [bool(j != control and abs(r[j] - r[control]) > cd) for j in range(k)]
    return BonferroniDunnResult(cd, control, r, sig, q, alpha)
