"""Choosing which human-coded transcripts to use as in-context examples."""

from __future__ import annotations

import csv
import io
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

from .backend import BackendConfig
from .evaluation import compare_many
from .runner import RunOptions, code_transcript
from .scheme import CodedTranscript, CodingScheme, ExemplarSet

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


def combination_count(n: int, k: int = 5) -> int:
    """Number of k-subsets of an n-transcript pool."""
    if n < 0 or k < 0:
        raise SelectionError("n and k must be non-negative")
    if k > n:
        raise SelectionError(f"cannot choose {k} transcripts from a pool of {n}")
    return math.comb(n, k)


@dataclass(frozen=True)
class TranscriptPool:
    transcripts: tuple[CodedTranscript, ...]
    codes: tuple[str, ...]
    # one bit per scheme code, in ``codes`` order
    coverage: dict[str, int]

    @classmethod
    def build(cls, transcripts: Sequence[CodedTranscript], scheme: CodingScheme) -> "TranscriptPool":
        bit = {cid: 1 << i for i, cid in enumerate(scheme.code_ids)}
        coverage: dict[str, int] = {}
        for ct in transcripts:
            if ct.transcript_id in coverage:
                raise SelectionError(f"duplicate transcript id {ct.transcript_id!r} in pool")
            mask = 0
            for u in ct.units:
                mask |= bit[u.code_id]
            coverage[ct.transcript_id] = mask
        return cls(tuple(transcripts), tuple(scheme.code_ids), coverage)

    @property
    def full_mask(self) -> int:
        return (1 << len(self.codes)) - 1

    def ids(self) -> list[str]:
        return [ct.transcript_id for ct in self.transcripts]

    def get(self, transcript_id: str) -> CodedTranscript:
        for ct in self.transcripts:
            if ct.transcript_id == transcript_id:
                return ct
        raise KeyError(transcript_id)

    def mask_codes(self, mask: int) -> list[str]:
        return [c for i, c in enumerate(self.codes) if mask >> i & 1]


@dataclass
class CandidateSet:
    members: tuple[str, ...]
    covered: tuple[str, ...]
    lenient: float | None = None
    strict: float | None = None
    kappa: float | None = None
    disqualified: bool = False
    reason: str | None = None


def sample_covering_sets(
    pool: TranscriptPool,
    scheme: CodingScheme,
    k: int = 5,
    n_candidates: int = 5,
    seed: int = 0,
    max_attempts: int = 100_000,
) -> list[CandidateSet]:
    """Draw distinct k-subsets of the pool whose annotations include every code.

    Plain rejection sampling over uniformly drawn subsets.
    """
    ids = pool.ids()
    combination_count(len(ids), k)
    union = 0
    for m in pool.coverage.values():
        union |= m
    absent = pool.mask_codes(pool.full_mask & ~union)
    if absent:
        labels = [scheme.label_of(c) for c in absent]
        raise SelectionError(f"no transcript in the pool contains: {', '.join(labels)}")
    rng = random.Random(seed)
    seen: set[tuple[str, ...]] = set()
    found: list[CandidateSet] = []
    attempts = 0
    while len(found) < n_candidates:
        if attempts >= max_attempts:
            raise SelectionError(
                f"found only {len(found)} of {n_candidates} covering sets after {max_attempts} draws"
            )
        attempts += 1
        members = tuple(sorted(rng.sample(ids, k)))
        if members in seen:
            continue
        seen.add(members)
        mask = 0
        for m in members:
            mask |= pool.coverage[m]
        if mask == pool.full_mask:
            found.append(CandidateSet(members, tuple(pool.mask_codes(mask))))
    log.info("drew %d covering sets in %d attempts", len(found), attempts)
    return found


@dataclass
class Leaderboard:
    entries: list[CandidateSet] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate_members", "strict", "lenient", "kappa", "disqualified"])
        fmt = lambda v: "" if v is None else f"{v:.4f}"
        for c in self.entries:
            w.writerow([";".join(c.members), fmt(c.strict), fmt(c.lenient), fmt(c.kappa), str(c.disqualified).lower()])
        return buf.getvalue()


def _rank_key(c: CandidateSet):
    score = lambda v: -math.inf if v is None or math.isnan(v) else v
    return (-score(c.lenient), -score(c.strict), -score(c.kappa), c.members)


def select_best(
    candidates: Sequence[CandidateSet],
    validation: Sequence[CodedTranscript],
    scheme: CodingScheme,
    backend_cfg: BackendConfig,
    pool: TranscriptPool,
    opts: RunOptions | None = None,
    *,
    backend=None,
) -> tuple[CandidateSet, Leaderboard]:
    """Code the validation transcripts with each candidate's exemplars and keep the best.

    Ranking: lenient match rate, then strict rate, then kappa, then the
    lexicographically smallest member list. Candidates with a failed
    segment or a pipeline error are disqualified.
    """
    if not candidates:
        raise SelectionError("no candidates to evaluate")
    if not validation:
        raise SelectionError("no validation transcripts")
    supplements = dict(scheme.supplements)
    for cand in candidates:
        exemplars = ExemplarSet("coded-transcripts", tuple(pool.get(m) for m in cand.members), {}, supplements)
        try:
            results = [
                code_transcript(ct.transcript, scheme, exemplars, backend_cfg, opts, backend=backend)
                for ct in validation
            ]
        except Exception as exc:  # noqa: BLE001 - any pipeline failure disqualifies
            cand.disqualified, cand.reason = True, str(exc)
            log.warning("candidate %s disqualified: %s", cand.members, exc)
            continue
        failed = [f"{r.transcript_id}#{s}" for r in results for s in r.failed_segments]
        if failed:
            cand.disqualified, cand.reason = True, f"failed segments: {', '.join(failed)}"
            log.warning("candidate %s disqualified: %s", cand.members, cand.reason)
        report = compare_many(list(zip(results, validation)), scheme).pooled
        cand.lenient, cand.strict, cand.kappa = report.lenient_match_rate, report.strict_match_rate, report.kappa
    board = Leaderboard(list(candidates))
    qualified = [c for c in candidates if not c.disqualified]
    if not qualified:
        raise SelectionError("every candidate was disqualified")
    winner = min(qualified, key=_rank_key)
    return winner, board
