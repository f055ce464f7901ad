"""Text-similarity metrics and the two-sample significance test.

BLEU-4 with add-one smoothed modified precisions over whitespace tokens,
ROUGE-1 / ROUGE-L F1, and Welch's unequal-variance t-test with a
from-scratch Student-t CDF (regularized incomplete beta via Lentz's
continued fraction).
"""

from __future__ import annotations

import math
from collections import Counter


def _tokens(text: str) -> list[str]:
    return text.split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Smoothed BLEU in [0, 1]; empty candidate scores 0.

    The unigram precision is left unsmoothed (a candidate sharing no token
    with the reference scores exactly 0); add-one smoothing applies to the
    higher-order precisions only. Smoothing the unigram as well would give
    every candidate a positive floor that depends only on its length, which
    turns BLEU into a length detector on unrelated text.
    """
    ref = _tokens(reference)
    if not ref:
        raise ValueError("reference must be nonempty")
    cand = _tokens(candidate)
    if not cand:
        return 0.0
    log_prec = 0.0
    for n in range(1, max_n + 1):
        cn = _ngrams(cand, n)
        rn = _ngrams(ref, n)
        match = sum(min(c, rn[g]) for g, c in cn.items())
        total = max(sum(cn.values()), 0)
        if n == 1:
            if match == 0:
                return 0.0
            log_prec += math.log(match / total)
        else:
            log_prec += math.log((match + 1.0) / (total + 1.0))
    log_prec /= max_n
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_prec)


def rouge(candidate: str, reference: str, kind: str = "rouge1") -> float:
    """ROUGE F1 in [0, 1]; rouge1 = unigram overlap, rougeL = LCS."""
    ref = _tokens(reference)
    if not ref:
        raise ValueError("reference must be nonempty")
    cand = _tokens(candidate)
    if not cand:
        return 0.0
    if kind == "rouge1":
        overlap = sum((Counter(cand) & Counter(ref)).values())
    elif kind == "rougeL":
        overlap = _lcs_len(cand, ref)
    else:
        raise ValueError(f"unknown rouge kind: {kind}")
    if overlap == 0:
        return 0.0
    p = overlap / len(cand)
    r = overlap / len(ref)
    return 2.0 * p * r / (p + r)


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# Welch's t-test


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's method)."""
    MAXIT, EPS, FPMIN = 200, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return h


def _betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = df / (df + t * t)
    return _betainc(df / 2.0, 0.5, x)


def welch_ttest(a, b) -> float:
    """Two-sided p-value of Welch's unequal-variance two-sample t-test.

    Degenerate inputs (both samples constant): p = 1 when the constants
    agree, 0 when they differ.
    """
    a = [float(x) for x in a]
    b = [float(x) for x in b]
    n1, n2 = len(a), len(b)
    if n1 < 2 or n2 < 2:
        raise ValueError("each sample needs at least 2 observations")
    m1 = sum(a) / n1
    m2 = sum(b) / n2
    v1 = sum((x - m1) ** 2 for x in a) / (n1 - 1)
    v2 = sum((x - m2) ** 2 for x in b) / (n2 - 1)
    se2 = v1 / n1 + v2 / n2
    if se2 == 0.0:
        return 1.0 if m1 == m2 else 0.0
    t = (m1 - m2) / math.sqrt(se2)
    df = se2 * se2 / (
        (v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1)
    )
    return student_t_sf2(t, df)
