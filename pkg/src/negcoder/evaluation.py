"""Model-versus-human match statistics and the blinded mismatch review."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .runner import CodedResult, ConsistencyLabel
from .scheme import CodedTranscript, CodedUnit, CodingScheme
from .textsim import normalize

log = logging.getLogger(__name__)

EXPORT_COLUMNS = ("sample_id", "context_turn_1", "context_turn_2", "unit_text", "option_1", "option_2")
ADJUDICATION_COLUMNS = ("sample_id", "chosen", "adjudicator_id")
CHOICES = ("option_1", "option_2", "neither")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with human codes on rows and model codes on columns."""

    codes: tuple[str, ...]
    counts: tuple[tuple[int, ...], ...]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def diagonal(self) -> int:
        return sum(self.counts[i][i] for i in range(len(self.codes)))

    def row_sums(self) -> dict[str, int]:
        return {c: sum(row) for c, row in zip(self.codes, self.counts)}

    def col_sums(self) -> dict[str, int]:
        return {c: sum(row[j] for row in self.counts) for j, c in enumerate(self.codes)}

    def to_csv(self, labels: dict[str, str] | None = None) -> str:
        name = (lambda c: labels.get(c, c)) if labels else (lambda c: c)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["human \\ model"] + [name(c) for c in self.codes])
        for c, row in zip(self.codes, self.counts):
            w.writerow([name(c)] + list(row))
        return buf.getvalue()


@dataclass(frozen=True)
class KappaStats:
    kappa: float
    observed: float
    expected: float
    degenerate: bool = False


@dataclass
class MatchReport:
    n_units: int
    n_jointly_coded: int
    n_model_unreported: int
    n_without_human: int
    strict_match_rate: float
    lenient_match_rate: float
    per_code_match: dict[str, float | None]
    kappa: float | None
    kappa_degenerate: bool
    confusion: ConfusionMatrix
    human_frequencies: dict[str, int]
    model_frequencies: dict[str, int]
    consistency_distribution: dict[str, int]

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["confusion"] = {"codes": list(self.confusion.codes), "counts": [list(r) for r in self.confusion.counts]}
        for key in ("strict_match_rate", "lenient_match_rate"):
            doc[key] = round(doc[key], 4)
        if self.kappa is not None and math.isfinite(self.kappa):
            doc["kappa"] = round(self.kappa, 4)
        elif self.kappa is not None:
            doc["kappa"] = None  # NaN is not valid JSON
        return doc

    def to_text(self, scheme: CodingScheme) -> str:
        lines = [
            f"units with a human code : {self.n_units}",
            f"jointly coded units     : {self.n_jointly_coded}",
            f"model unreported        : {self.n_model_unreported}",
            f"units without human code: {self.n_without_human}",
            f"strict match rate       : {self.strict_match_rate:.4f}",
            f"lenient match rate      : {self.lenient_match_rate:.4f}",
            f"Cohen's kappa           : {'n/a' if self.kappa is None else f'{self.kappa:.4f}'}",
            "",
            f"{'code':<45} {'human':>6} {'model':>6} {'match':>7}",
        ]
        for c in scheme.codes:
            rate = self.per_code_match.get(c.code_id)
            shown = "-" if rate is None else f"{rate:.4f}"
            lines.append(
                f"{c.label:<45} {self.human_frequencies.get(c.code_id, 0):>6} "
                f"{self.model_frequencies.get(c.code_id, 0):>6} {shown:>7}"
            )
        lines.append("")
        lines.append("consistency: " + ", ".join(f"{k} {v}" for k, v in self.consistency_distribution.items()))
        return "\n".join(lines) + "\n"


def kappa_stats(pairs: Sequence[tuple[str, str]]) -> KappaStats:
    """Cohen's kappa with observed and chance agreement, in exact arithmetic."""
    n = len(pairs)
    if n == 0:
        raise EvaluationError("cohens_kappa needs at least one pair")
    agree = sum(a == b for a, b in pairs)
    rows = Counter(a for a, _ in pairs)
    cols = Counter(b for _, b in pairs)
    chance = sum(rows[c] * cols.get(c, 0) for c in rows)
    p_o = Fraction(agree, n)
    p_e = Fraction(chance, n * n)
    if chance == n * n:
        if agree == n:
            return KappaStats(1.0, 1.0, 1.0, degenerate=True)
        return KappaStats(float("nan"), float(p_o), 1.0, degenerate=True)
    return KappaStats(float((p_o - p_e) / (1 - p_e)), float(p_o), float(p_e))


def cohens_kappa(pairs: Sequence[tuple[str, str]]) -> float:
    """(p_o - p_e) / (1 - p_e) over (human_code, model_code) pairs."""
    return kappa_stats(pairs).kappa


def estimate_true_accuracy(match_rate: float, adjudicator_agreement_with_model: float) -> float:
    """Match rate plus the share of mismatches that reviewers credit to the model."""
    for name, v in (("match_rate", match_rate), ("adjudicator_agreement_with_model", adjudicator_agreement_with_model)):
        if not 0.0 <= v <= 1.0:
            raise EvaluationError(f"{name} must be in [0, 1], got {v}")
    return match_rate + (1.0 - match_rate) * adjudicator_agreement_with_model


@dataclass(frozen=True)
class UnitPair:
    transcript_id: str
    unit_index: int
    human: str | None
    model: str | None
    consistency: ConsistencyLabel | None = None


def _human_map(human: Iterable[CodedUnit] | CodedTranscript) -> dict[tuple[str, int], str]:
    units = human.units if isinstance(human, CodedTranscript) else list(human)
    out = {}
    for u in units:
        out[(u.transcript_id, u.unit_index)] = u.code_id
    return out


def unit_pairs(
    model: CodedResult, human: Iterable[CodedUnit] | CodedTranscript, scheme: CodingScheme
) -> list[UnitPair]:
    """Line up model and human codes unit by unit, checking they describe the same units."""
    if isinstance(human, CodedTranscript):
        a = [normalize(s.text) for s in human.transcript.sentences]
        b = [normalize(s.text) for s in model.transcript.sentences]
        if human.transcript_id != model.transcript_id:
            raise EvaluationError(
                f"transcript mismatch: human {human.transcript_id!r} vs model {model.transcript_id!r}"
            )
        if a != b:
            raise EvaluationError(f"{model.transcript_id}: human and model units differ")
    codes = _human_map(human)
    if not codes:
        raise EvaluationError(f"{model.transcript_id}: no human annotations")
    known = set(scheme.code_ids)
    n_units = len(model.votes)
    for (tid, idx), cid in codes.items():
        if tid != model.transcript_id:
            raise EvaluationError(f"human annotation for transcript {tid!r}, model coded {model.transcript_id!r}")
        if not 0 <= idx < n_units:
            raise EvaluationError(f"{tid}: human annotation for unit {idx} outside the {n_units} coded units")
        if cid not in known:
            raise EvaluationError(f"{tid}: unknown human code {cid!r}")
    out = []
    for rv in model.votes:
        if rv.assigned is not None and rv.assigned not in known:
            raise EvaluationError(f"{model.transcript_id}: unknown model code {rv.assigned!r}")
        out.append(
            UnitPair(model.transcript_id, rv.sentence_index, codes.get((model.transcript_id, rv.sentence_index)),
                     rv.assigned, rv.consistency)
        )
    return out


def report_from_pairs(pairs: Sequence[UnitPair], scheme: CodingScheme) -> MatchReport:
    coded = [p for p in pairs if p.human is not None]
    if not coded:
        raise EvaluationError("no units carry a human code")
    joint = [p for p in coded if p.model is not None]
    matches = sum(p.human == p.model for p in joint)
    axis = tuple(scheme.code_ids)
    pos = {c: i for i, c in enumerate(axis)}
    grid = [[0] * len(axis) for _ in axis]
    for p in joint:
        grid[pos[p.human]][pos[p.model]] += 1
    confusion = ConfusionMatrix(axis, tuple(tuple(r) for r in grid))

    per_code: dict[str, float | None] = {}
    for c in axis:
        row = [p for p in joint if p.human == c]
        per_code[c] = (sum(p.model == c for p in row) / len(row)) if row else None

    kappa, degenerate = None, False
    if joint:
        stats = kappa_stats([(p.human, p.model) for p in joint])
        kappa, degenerate = stats.kappa, stats.degenerate

    consistency = {label.value: 0 for label in ConsistencyLabel}
    for p in pairs:
        if p.consistency is not None:
            consistency[ConsistencyLabel(p.consistency).value] += 1
    return MatchReport(
        n_units=len(coded),
        n_jointly_coded=len(joint),
        n_model_unreported=len(coded) - len(joint),
        n_without_human=len(pairs) - len(coded),
        strict_match_rate=matches / len(coded),
        lenient_match_rate=matches / len(joint) if joint else 0.0,
        per_code_match=per_code,
        kappa=kappa,
        kappa_degenerate=degenerate,
        confusion=confusion,
        human_frequencies={c: sum(p.human == c for p in coded) for c in axis},
        model_frequencies={c: sum(p.model == c for p in pairs if p.model is not None) for c in axis},
        consistency_distribution=consistency,
    )


def compare(model: CodedResult, human: Iterable[CodedUnit] | CodedTranscript, scheme: CodingScheme) -> MatchReport:
    """Match statistics for one transcript coded by the model and by humans."""
    return report_from_pairs(unit_pairs(model, human, scheme), scheme)


@dataclass
class PooledReport:
    pooled: MatchReport
    per_transcript: dict[str, MatchReport] = field(default_factory=dict)


def compare_many(
    items: Sequence[tuple[CodedResult, Iterable[CodedUnit] | CodedTranscript]], scheme: CodingScheme
) -> PooledReport:
    """Pool several transcripts into one report, keeping a per-transcript breakdown."""
    if not items:
        raise EvaluationError("nothing to compare")
    all_pairs: list[UnitPair] = []
    per: dict[str, MatchReport] = {}
    for model, human in items:
        if model.transcript_id in per:
            raise EvaluationError(f"transcript {model.transcript_id!r} given twice")
        pairs = unit_pairs(model, human, scheme)
        per[model.transcript_id] = report_from_pairs(pairs, scheme)
        all_pairs.extend(pairs)
    return PooledReport(report_from_pairs(all_pairs, scheme), per)


@dataclass(frozen=True)
class MismatchSample:
    sample_id: str
    context_turn_1: str
    context_turn_2: str
    unit_text: str
    option_1: str
    option_2: str


@dataclass(frozen=True)
class KeyEntry:
    sample_id: str
    transcript_id: str
    unit_index: int
    model_option: int
    model_code: str
    human_code: str


@dataclass
class MismatchKey:
    entries: list[KeyEntry]
    seed: int
    lenient_match_rate: float | None = None

    def to_json(self) -> str:
        doc = {
            "seed": self.seed,
            "lenient_match_rate": self.lenient_match_rate,
            "samples": [asdict(e) for e in self.entries],
        }
        return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MismatchKey":
        doc = json.loads(text)
        return cls([KeyEntry(**e) for e in doc["samples"]], doc.get("seed", 0), doc.get("lenient_match_rate"))


@dataclass
class MismatchExport:
    samples: list[MismatchSample]
    key: MismatchKey
    warnings: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EXPORT_COLUMNS)
        for s in self.samples:
            w.writerow([getattr(s, c) for c in EXPORT_COLUMNS])
        return buf.getvalue()


def _turn_line(turn) -> str:
    return f"{turn.speaker}: {turn.text}"


def sample_mismatches(
    model: CodedResult | Sequence[CodedResult],
    human: Iterable[CodedUnit],
    scheme: CodingScheme,
    k: int = 100,
    seed: int = 0,
) -> MismatchExport:
    """Draw up to ``k`` disagreements for blinded review.

    Draws are uniform without replacement; for every sample a coin flip
    decides whether the model's code is shown as option 1 or option 2.
    Each record carries the two speaking turns before the unit's own turn.
    """
    results = [model] if isinstance(model, CodedResult) else list(model)
    human = list(human)
    pairs: list[UnitPair] = []
    by_id = {}
    for r in results:
        mine = [u for u in human if u.transcript_id == r.transcript_id]
        if not mine:
            continue
        pairs.extend(unit_pairs(r, mine, scheme))
        by_id[r.transcript_id] = r
    if not pairs:
        raise EvaluationError("no human annotations match the coded transcripts")
    joint = [p for p in pairs if p.human is not None and p.model is not None]
    mismatches = [p for p in joint if p.human != p.model]
    if not mismatches:
        raise EvaluationError("no mismatches to sample")
    warnings = []
    if k > len(mismatches):
        msg = f"requested {k} samples but only {len(mismatches)} mismatches exist"
        log.warning(msg)
        warnings.append(msg)
        k = len(mismatches)
    rng = random.Random(seed)
    chosen = rng.sample(mismatches, k)
    labels = {c.code_id: c.label for c in scheme.codes}
    samples, entries = [], []
    width = max(4, len(str(k)))
    for n, p in enumerate(chosen, 1):
        sid = f"S{n:0{width}d}"
        r = by_id[p.transcript_id]
        unit = r.transcript.sentences[p.unit_index]
        prior = [t for t in r.transcript.turns if t.turn_index < unit.turn_index][-2:]
        context = [""] * (2 - len(prior)) + [_turn_line(t) for t in prior]
        model_first = rng.random() < 0.5
        first, second = (p.model, p.human) if model_first else (p.human, p.model)
        samples.append(MismatchSample(sid, context[0], context[1], unit.text, labels[first], labels[second]))
        entries.append(KeyEntry(sid, p.transcript_id, p.unit_index, 1 if model_first else 2, p.model, p.human))
    matches = sum(p.human == p.model for p in joint)
    key = MismatchKey(entries, seed, matches / len(joint))
    return MismatchExport(samples, key, warnings)


@dataclass(frozen=True)
class Adjudication:
    sample_id: str
    chosen: str
    adjudicator_id: str = ""


@dataclass
class AdjudicationRates:
    n: int
    agree_with_model_rate: float
    agree_with_human_rate: float
    neither_rate: float


@dataclass
class AdjudicationSummary(AdjudicationRates):
    implied_accuracy: float | None = None
    per_adjudicator: dict[str, AdjudicationRates] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def normalize_choice(value: str) -> str:
    key = value.strip().lower().replace(" ", "_").replace("-", "_")
    aliases = {"1": "option_1", "option1": "option_1", "2": "option_2", "option2": "option_2", "none": "neither"}
    key = aliases.get(key, key)
    if key not in CHOICES:
        raise EvaluationError(f"unknown adjudication choice {value!r}")
    return key


def _rates(outcomes: list[str]) -> AdjudicationRates:
    n = len(outcomes)
    c = Counter(outcomes)
    return AdjudicationRates(n, c["model"] / n, c["human"] / n, c["neither"] / n)


def ingest_adjudications(
    adjudications: Iterable[Adjudication], key: MismatchKey, match_rate: float | None = None
) -> AdjudicationSummary:
    """Unblind reviewer choices and estimate true accuracy.

    A reviewer judging the same sample twice keeps their later choice.
    ``match_rate`` defaults to the lenient rate recorded in the key.
    """
    lookup = {e.sample_id: e for e in key.entries}
    decisions: dict[tuple[str, str], str] = {}
    warnings = []
    for adj in adjudications:
        if adj.sample_id not in lookup:
            raise EvaluationError(f"unknown sample_id {adj.sample_id!r}")
        choice = normalize_choice(adj.chosen)
        slot = (adj.sample_id, adj.adjudicator_id)
        if slot in decisions:
            msg = f"duplicate adjudication of {adj.sample_id} by {adj.adjudicator_id!r}; keeping the later one"
            log.warning(msg)
            warnings.append(msg)
            del decisions[slot]
        decisions[slot] = choice
    if not decisions:
        raise EvaluationError("no adjudications given")

    def outcome(sample_id: str, choice: str) -> str:
        if choice == "neither":
            return "neither"
        picked = 1 if choice == "option_1" else 2
        return "model" if picked == lookup[sample_id].model_option else "human"

    outcomes = [(adj_id, outcome(sid, choice)) for (sid, adj_id), choice in decisions.items()]
    pooled = _rates([o for _, o in outcomes])
    per = {}
    for adj_id in sorted({a for a, _ in outcomes}):
        per[adj_id] = _rates([o for a, o in outcomes if a == adj_id])
    rate = match_rate if match_rate is not None else key.lenient_match_rate
    implied = None if rate is None else estimate_true_accuracy(rate, pooled.agree_with_model_rate)
    return AdjudicationSummary(
        pooled.n, pooled.agree_with_model_rate, pooled.agree_with_human_rate, pooled.neither_rate,
        implied, per, warnings,
    )


def read_adjudications(path: str | Path) -> list[Adjudication]:
    text = Path(path).read_text("utf-8").lstrip("﻿")
    reader = csv.DictReader(io.StringIO(text))
    missing = [c for c in ("sample_id", "chosen") if c not in (reader.fieldnames or [])]
    if missing:
        raise EvaluationError(f"{path}: adjudication csv is missing columns {missing}")
    return [Adjudication(r["sample_id"].strip(), r["chosen"], (r.get("adjudicator_id") or "").strip()) for r in reader]
