"""Independent reference implementations used only as test oracles.

These are written deliberately with different algorithms and data flow
than the package code so that agreement is meaningful evidence.
"""

import math
from collections import defaultdict

from scipy import stats


def ref_bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """BLEU-4, unsmoothed unigram precision, add-one for n >= 2;
    geometric mean computed via product (not log sum)."""
    cand = candidate.split()
    ref = reference.split()
    if not cand:
        return 0.0
    prod = 1.0
    for n in range(1, max_n + 1):
        cgrams = defaultdict(int)
        for g in zip(*(cand[i:] for i in range(n))):
            cgrams[g] += 1
        rgrams = defaultdict(int)
        for g in zip(*(ref[i:] for i in range(n))):
            rgrams[g] += 1
        clipped = 0
        total = 0
        for g, c in cgrams.items():
            clipped += min(c, rgrams[g])
            total += c
        if n == 1:
            if clipped == 0:
                return 0.0
            prod *= clipped / total
        else:
            prod *= (clipped + 1.0) / (total + 1.0)
    score = prod ** (1.0 / max_n)
    if len(cand) < len(ref):
        score *= math.exp(1.0 - len(ref) / len(cand))
    return score


def _lcs_table(a, b):
    """Full O(len(a)*len(b)) LCS DP table; returns the final length."""
    rows = len(a) + 1
    cols = len(b) + 1
    table = [[0] * cols for _ in range(rows)]
    for i in range(1, rows):
        for j in range(1, cols):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def ref_rouge(candidate: str, reference: str, kind: str) -> float:
    cand = candidate.split()
    ref = reference.split()
    if not cand:
        return 0.0
    if kind == "rouge1":
        remaining = defaultdict(int)
        for w in ref:
            remaining[w] += 1
        overlap = 0
        for w in cand:
            if remaining[w] > 0:
                remaining[w] -= 1
                overlap += 1
    else:
        overlap = _lcs_table(cand, ref)
    if overlap == 0:
        return 0.0
    precision = overlap / len(cand)
    recall = overlap / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def ref_welch_p(a, b) -> float:
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def ref_t_sf2(t: float, df: float) -> float:
    return float(2.0 * stats.t.sf(abs(t), df))
