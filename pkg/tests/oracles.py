"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache


def levenshtein_rec(a: str, b: str) -> int:
    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            d(i - 1, j) + 1,
            d(i, j - 1) + 1,
            d(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return d(len(a), len(b))


def confusion_brute(pairs, codes):
    """Nested-loop confusion counts, rows = human, cols = model."""
    return [[sum(1 for h, m in pairs if h == r and m == c) for c in codes] for r in codes]


def kappa_brute(pairs, codes):
    """Textbook kappa from the confusion table with exact fractions; None when undefined."""
    n = len(pairs)
    table = confusion_brute(pairs, codes)
    p_o = Fraction(sum(table[i][i] for i in range(len(codes))), n)
    p_e = Fraction(0)
    for i in range(len(codes)):
        row = sum(table[i])
        col = sum(table[r][i] for r in range(len(codes)))
        p_e += Fraction(row, n) * Fraction(col, n)
    if p_e == 1:
        return None
    return float((p_o - p_e) / (1 - p_e))


def match_rates_brute(pairs):
    """(strict, lenient) where a pair is (human, model_or_None) and every pair has a human code."""
    strict = sum(1 for h, m in pairs if m == h) / len(pairs)
    joint = [(h, m) for h, m in pairs if m is not None]
    lenient = sum(1 for h, m in joint if m == h) / len(joint) if joint else 0.0
    return strict, lenient


def comb_multiplicative(n: int, k: int) -> int:
    num = den = 1
    for i in range(k):
        num *= n - i
        den *= i + 1
    return num // den
