"""Edit-distance helpers used for label matching and sentence alignment."""

from __future__ import annotations

import math
import re
import unicodedata

_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    """Lowercase, drop punctuation and symbols, collapse whitespace.

    Apostrophes are dropped rather than replaced by a space so that
    "can't" normalizes to "cant".
    """
    out = []
    for ch in text.lower():
        cat = unicodedata.category(ch)
        if cat[0] in ("P", "S"):
            if ch in "'’‘`":
                continue
            out.append(" ")
        else:
            out.append(ch)
    return _WS.sub(" ", "".join(out)).strip()


def levenshtein(a: str, b: str, max_distance: int | None = None) -> int:
    """Unit-cost edit distance between ``a`` and ``b``.

    With ``max_distance`` set, returns ``max_distance + 1`` as soon as the
    distance is known to exceed it.
    """
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    if max_distance is not None and len(a) - len(b) > max_distance:
        return max_distance + 1

    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        row_min = i
        for j, cb in enumerate(b, 1):
            cost = prev[j - 1] + (ca != cb)
            if prev[j] + 1 < cost:
                cost = prev[j] + 1
            if cur[j - 1] + 1 < cost:
                cost = cur[j - 1] + 1
            cur.append(cost)
            if cost < row_min:
                row_min = cost
        if max_distance is not None and row_min > max_distance:
            return max_distance + 1
        prev = cur
    return prev[-1]


def similarity(a: str, b: str, *, normalized: bool = False, floor: float | None = None) -> float:
    """Normalized Levenshtein similarity in [0, 1].

    ``1 - distance / max(len)`` on normalized text; two empty strings are
    identical. ``floor`` allows an early exit: any result below it is
    reported as 0.0.
    """
    if not normalized:
        a, b = normalize(a), normalize(b)
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    bound = None
    if floor is not None:
        bound = math.floor(longest * (1.0 - floor) + 1e-9)
    dist = levenshtein(a, b, bound)
    if bound is not None and dist > bound:
        return 0.0
    return 1.0 - dist / longest
