"""Repeated coding runs per segment, output parsing, alignment and voting."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backend import BackendConfig, CompletionRequest, RunTag, complete_batch, make_backend
from .mock import prompt_sha256
from .prompt import (
    BudgetCheck,
    ModelProfile,
    PromptOptions,
    PromptText,
    build_prompt,
    builtin_profiles,
    check_budget,
    find_profile,
)
from .scheme import (
    CodeDeficit,
    CodingScheme,
    ExemplarSet,
    deficient,
    find_underrepresented,
)
from .textsim import normalize, similarity
from .transcript import Segment, Transcript, segment_transcript

log = logging.getLogger(__name__)

DELIMITERS = (" | ", "|", "\t", " - ", ",")
LABEL_MATCH_THRESHOLD = 0.85
DEFAULT_SIMILARITY = 0.8


class ConsistencyLabel(str, enum.Enum):
    UNREPORTED = "Unreported"
    MODERATE = "Moderate"
    HIGH = "High"
    PERFECT = "Perfect"


class DeficitError(ValueError):
    def __init__(self, deficits: Sequence[CodeDeficit], labels: Mapping[str, str] | None = None):
        self.deficits = list(deficits)
        names = ", ".join(
            f"{labels.get(d.code_id, d.code_id) if labels else d.code_id} (needs {d.deficit} more)"
            for d in self.deficits
        )
        super().__init__(f"codes below the example floor: {names}")


class BudgetExceeded(ValueError):
    def __init__(self, segment_index: int, check: BudgetCheck, profile_name: str):
        self.segment_index = segment_index
        self.check = check
        super().__init__(
            f"segment {segment_index} prompt is ~{check.estimated_tokens} tokens, over the "
            f"{check.limit_tokens}-token budget for {profile_name} by {check.exceeds_by}"
        )


@dataclass(frozen=True)
class ParsedLine:
    claimed_index: int | None
    echoed_sentence: str
    code_label: str
    code_id: str
    line_no: int = 0


@dataclass(frozen=True)
class Diagnostic:
    line_no: int
    line: str
    reason: str


@dataclass(frozen=True)
class ParseResult:
    lines: list[ParsedLine]
    diagnostics: list[Diagnostic]


_INT_FIELD = re.compile(r"^\s*(?:#|no\.?|sentence|unit)?\s*[(\[]?\s*(\d+)\s*[.):\]]?\s*$", re.IGNORECASE)
_LEADING_INT = re.compile(r"^\s*[(\[]?(\d+)[.):\]]\s+(.*)$")
_DECOR = re.compile(r"^[\s*_`\"'\[\]()]+|[\s*_`\"'\[\]()]+$")
_CODE_PREFIX = re.compile(r"^(?:assigned\s+)?code\s*[:=]?\s*", re.IGNORECASE)


def _label_keys(scheme: CodingScheme) -> list[tuple[str, str, str]]:
    out = []
    for c in scheme.codes:
        for key in {normalize(c.label), normalize(c.code_id.replace("_", " "))}:
            out.append((key, c.code_id, c.label))
    return out


def _match_code(field_text: str, keys) -> tuple[float, str, str] | None:
    """Score a field as a code: 2.0 for exact, the similarity for fuzzy."""
    bare = _CODE_PREFIX.sub("", _DECOR.sub("", field_text))
    bare = re.sub(r"^\d+[.)]\s+", "", bare)
    key = normalize(bare)
    if not key:
        return None
    best = None
    for label_key, cid, label in keys:
        if key == label_key:
            return 2.0, cid, label
        score = similarity(key, label_key, normalized=True, floor=LABEL_MATCH_THRESHOLD)
        if score > LABEL_MATCH_THRESHOLD and (best is None or score > best[0]):
            best = (score, cid, label)
    return best


def _parse_fields(fields: list[str], delim: str, keys, speakers: set[str], line_no: int) -> ParsedLine | None:
    scored = [(_match_code(f, keys), i) for i, f in enumerate(fields)]
    scored = [(m, i) for m, i in scored if m is not None]
    if not scored:
        return None
    top = max(m[0] for m, _ in scored)
    match, pos = [(m, i) for m, i in scored if m[0] == top][-1]
    rest = list(enumerate(fields))
    index = None
    for i, f in rest:
        if i == pos:
            continue
        m = _INT_FIELD.match(_DECOR.sub("", f))
        if m:
            index = int(m.group(1))
            rest = [(j, g) for j, g in rest if j != i]
            break
    before = [g for j, g in rest if j < pos]
    after = [g for j, g in rest if j > pos]
    body = before or after
    if index is None and body:
        m = _LEADING_INT.match(body[0])
        if m:
            index = int(m.group(1))
            body = [m.group(2)] + body[1:]
    if len(body) > 1 and normalize(body[0]) in speakers:
        body = body[1:]
    echoed = delim.join(g.strip() for g in body).strip() if delim.strip() else " ".join(g.strip() for g in body)
    return ParsedLine(index, echoed, match[2], match[1], line_no)


def parse_model_output(text: str, scheme: CodingScheme, speakers: Iterable[str] = ()) -> ParseResult:
    """Turn free-form model output into (index, echoed sentence, code) records.

    Each line is split on `` | `` first, then on bare ``|``, tab, `` - ``
    and comma. The code field is the one matching a scheme label, exact
    match first, then the closest label above 0.85 similarity; the index
    is the first standalone integer; the rest is the echoed sentence (a
    leading speaker field is dropped). Lines with no recognizable code
    land in the diagnostics.
    """
    keys = _label_keys(scheme)
    speaker_keys = {normalize(s) for s in speakers}
    lines: list[ParsedLine] = []
    diags: list[Diagnostic] = []
    for line_no, raw in enumerate(text.splitlines()):
        line = raw.strip()
        if not line or line.startswith("```"):
            continue
        line = re.sub(r"^(?:[-*•]\s+)", "", line)
        parsed = None
        had_fields = False
        for delim in DELIMITERS:
            fields = [f for f in line.split(delim)]
            if len(fields) < 2:
                continue
            had_fields = True
            parsed = _parse_fields(fields, delim, keys, speaker_keys, line_no)
            if parsed is not None:
                break
        if parsed is not None:
            lines.append(parsed)
        else:
            diags.append(Diagnostic(line_no, raw, "unknown_code" if had_fields else "unparseable"))
    return ParseResult(lines, diags)


@dataclass(frozen=True)
class Alignment:
    codes: list[str | None]
    # segment position -> index into the parsed line list
    bindings: dict[int, int]
    scores: dict[int, float]

    @property
    def missing(self) -> int:
        return sum(c is None for c in self.codes)


def align_run(
    parsed: Sequence[ParsedLine], segment: Segment, threshold: float = DEFAULT_SIMILARITY
) -> Alignment:
    """Bind parsed lines to the segment's sentences, at most one line each.

    A line binds to the sentence it claims when the echo is similar
    enough; otherwise to the most similar unbound sentence above the
    threshold. Conflicts go to the higher similarity, then the lower
    index.
    """
    targets = [normalize(s.text) for s in segment.sentences]
    n = len(targets)
    echoes = [normalize(p.echoed_sentence) for p in parsed]
    claims: dict[int, tuple[float, int]] = {}
    for li, p in enumerate(parsed):
        k = p.claimed_index
        if k is None or not 1 <= k <= n:
            continue
        sim = similarity(echoes[li], targets[k - 1], normalized=True, floor=threshold)
        if sim >= threshold:
            prev = claims.get(k - 1)
            if prev is None or sim > prev[0]:
                claims[k - 1] = (sim, li)
    bindings = {pos: li for pos, (_, li) in claims.items()}
    scores = {pos: sim for pos, (sim, _) in claims.items()}

    bound_lines = set(bindings.values())
    loose = [li for li in range(len(parsed)) if li not in bound_lines]
    if loose:
        open_pos = [pos for pos in range(n) if pos not in bindings]
        pairs = []
        for li in loose:
            for pos in open_pos:
                sim = similarity(echoes[li], targets[pos], normalized=True, floor=threshold)
                if sim >= threshold:
                    pairs.append((-sim, pos, li))
        pairs.sort()
        used_lines: set[int] = set()
        for neg_sim, pos, li in pairs:
            if pos in bindings or li in used_lines:
                continue
            bindings[pos] = li
            scores[pos] = -neg_sim
            used_lines.add(li)

    codes = [parsed[bindings[pos]].code_id if pos in bindings else None for pos in range(n)]
    return Alignment(codes, dict(sorted(bindings.items())), dict(sorted(scores.items())))


def consistency_label(top_count: int, runs: int = 5, threshold: int = 3) -> ConsistencyLabel:
    if top_count < threshold:
        return ConsistencyLabel.UNREPORTED
    if top_count >= runs:
        return ConsistencyLabel.PERFECT
    if top_count == threshold:
        return ConsistencyLabel.MODERATE
    return ConsistencyLabel.HIGH


def vote(
    votes: Sequence[str | None], runs: int = 5, threshold: int = 3
) -> tuple[str | None, ConsistencyLabel]:
    """Majority vote over the runs of one unit.

    ``None`` marks a run that produced no code for the unit; it never
    counts towards any code but still counts as an attempted run. When
    the threshold is at most half the runs two codes can tie at the top;
    such a unit gets no code.
    """
    if not 1 <= runs <= 9:
        raise ValueError(f"runs must be between 1 and 9, got {runs}")
    if not 1 <= threshold <= runs:
        raise ValueError(f"threshold must be between 1 and runs ({runs}), got {threshold}")
    if len(votes) > runs:
        raise ValueError(f"got {len(votes)} votes for {runs} runs")
    counts = Counter(v for v in votes if v is not None)
    if not counts:
        return None, ConsistencyLabel.UNREPORTED
    ranked = counts.most_common()
    top_code, top = ranked[0]
    if top < threshold or (len(ranked) > 1 and ranked[1][1] == top):
        return None, ConsistencyLabel.UNREPORTED
    return top_code, consistency_label(top, runs, threshold)


@dataclass(frozen=True)
class RunVotes:
    sentence_index: int
    votes: tuple[str | None, ...]
    assigned: str | None
    consistency: ConsistencyLabel


@dataclass
class RunRecord:
    segment_index: int
    run_index: int
    prompt_sha256: str
    text: str | None
    error: str | None = None
    parsed_lines: int = 0
    bound: int = 0
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.error is not None or not self.text


@dataclass
class SegmentRecord:
    segment_index: int
    first_sentence: int
    last_sentence: int
    failed: bool = False
    failed_runs: int = 0


@dataclass
class CodedResult:
    transcript: Transcript
    scheme_id: str
    votes: list[RunVotes]
    segments: list[SegmentRecord] = field(default_factory=list)
    runs: list[RunRecord] = field(default_factory=list)
    prompts: dict[int, str] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def transcript_id(self) -> str:
        return self.transcript.transcript_id

    @property
    def failed_segments(self) -> list[int]:
        return [s.segment_index for s in self.segments if s.failed]

    def label_counts(self) -> dict[str, int]:
        counts = {label.value: 0 for label in ConsistencyLabel}
        for rv in self.votes:
            counts[rv.consistency.value] += 1
        return counts


@dataclass(frozen=True)
class RunOptions:
    runs: int = 5
    vote_threshold: int = 3
    max_sentences_per_segment: int = 100
    context_turns: int = 2
    temperature: float = 0.2
    max_output_tokens: int = 4096
    seed: int | None = None
    similarity_threshold: float = DEFAULT_SIMILARITY
    prompt: PromptOptions = field(default_factory=PromptOptions)
    model_profile: str | None = "Claude 3"
    reserve_fraction: float = 0.25
    max_in_flight: int = 5
    allow_sparse: bool = False
    example_floor: int = 15
    extra_profiles: tuple[ModelProfile, ...] = ()

    def __post_init__(self):
        if not 1 <= self.runs <= 9:
            raise ValueError("runs must be between 1 and 9")
        if not 1 <= self.vote_threshold <= self.runs:
            raise ValueError("vote_threshold must be between 1 and runs")


def check_exemplars(exemplars: ExemplarSet, scheme: CodingScheme, opts: RunOptions) -> list[CodeDeficit]:
    """Raise DeficitError for codes below the floor unless sparse mode is on."""
    if exemplars.mode != "coded-transcripts":
        return []
    short = deficient(find_underrepresented(exemplars, scheme, opts.example_floor))
    if short:
        labels = {c.code_id: c.label for c in scheme.codes}
        if not opts.allow_sparse:
            raise DeficitError(short, labels)
        log.warning("%s", DeficitError(short, labels))
    return short


def prepare_prompts(
    t: Transcript, scheme: CodingScheme, exemplars: ExemplarSet, opts: RunOptions
) -> tuple[list[Segment], list[PromptText]]:
    segments = segment_transcript(t, opts.max_sentences_per_segment, context_turns=opts.context_turns)
    prompts = [build_prompt(scheme, exemplars, seg, opts.prompt) for seg in segments]
    if opts.model_profile:
        profile = find_profile(opts.model_profile, opts.extra_profiles + tuple(builtin_profiles()))
        if profile is None:
            raise ValueError(f"unknown model profile {opts.model_profile!r}")
        for seg, prompt in zip(segments, prompts):
            check = check_budget(prompt, profile, opts.reserve_fraction)
            if not check.fits:
                raise BudgetExceeded(seg.segment_index, check, profile.model_name)
    return segments, prompts


def code_transcript(
    t: Transcript,
    scheme: CodingScheme,
    exemplars: ExemplarSet,
    backend_cfg: BackendConfig,
    opts: RunOptions | None = None,
    *,
    backend=None,
) -> CodedResult:
    """Code every unit of ``t`` with ``opts.runs`` runs per segment and vote."""
    opts = opts or RunOptions()
    check_exemplars(exemplars, scheme, opts)
    seed = opts.seed if opts.seed is not None else random.SystemRandom().randrange(2**31)
    if opts.seed is None:
        log.info("using seed %d", seed)
    if backend_cfg.kind == "mock" and backend_cfg.mock_seed is None:
        backend_cfg = dataclasses.replace(backend_cfg, mock_seed=seed)
    started = datetime.now(timezone.utc)

    segments, prompts = prepare_prompts(t, scheme, exemplars, opts)
    requests = [
        CompletionRequest(
            prompt.text,
            temperature=opts.temperature,
            max_output_tokens=opts.max_output_tokens,
            run_tag=RunTag(seg.segment_index, run, t.transcript_id),
        )
        for seg, prompt in zip(segments, prompts)
        for run in range(1, opts.runs + 1)
    ]
    backend = backend or make_backend(backend_cfg)
    items = complete_batch(requests, backend_cfg, opts.max_in_flight, backend=backend)

    result_votes: list[RunVotes] = []
    seg_records: list[SegmentRecord] = []
    run_records: list[RunRecord] = []
    for s_pos, (seg, prompt) in enumerate(zip(segments, prompts)):
        digest = prompt_sha256(prompt.text)
        speakers = {s.speaker for s in seg.sentences}
        per_run: list[list[str | None]] = []
        failures = 0
        for r in range(opts.runs):
            item = items[s_pos * opts.runs + r]
            text = item.response.text if item.response else None
            rec = RunRecord(seg.segment_index, r + 1, digest, text, str(item.error) if item.error else None)
            if rec.failed:
                failures += 1
                if item.error is None:
                    rec.error = "empty response"
                per_run.append([None] * len(seg))
                log.warning("%s#%d run %d failed: %s", t.transcript_id, seg.segment_index, r + 1, rec.error)
            else:
                parsed = parse_model_output(text, scheme, speakers)
                alignment = align_run(parsed.lines, seg, opts.similarity_threshold)
                rec.parsed_lines = len(parsed.lines)
                rec.bound = len(alignment.bindings)
                rec.diagnostics = parsed.diagnostics
                per_run.append(alignment.codes)
            run_records.append(rec)
        failed = failures > opts.runs - opts.vote_threshold
        if failed:
            log.error("%s segment %d failed: %d of %d runs failed", t.transcript_id, seg.segment_index, failures, opts.runs)
        seg_records.append(
            SegmentRecord(seg.segment_index, seg.sentences[0].sentence_index, seg.sentences[-1].sentence_index, failed, failures)
        )
        for pos, unit in enumerate(seg.sentences):
            unit_votes = tuple(run[pos] for run in per_run)
            assigned, label = vote(unit_votes, opts.runs, opts.vote_threshold)
            result_votes.append(RunVotes(unit.sentence_index, unit_votes, assigned, label))

    metadata = {
        "backend": backend_cfg.kind,
        "model_id": backend_cfg.model_id,
        "temperature": opts.temperature,
        "seed": seed,
        "runs": opts.runs,
        "vote_threshold": opts.vote_threshold,
        "max_sentences_per_segment": opts.max_sentences_per_segment,
        "similarity_threshold": opts.similarity_threshold,
        "model_profile": opts.model_profile,
        "started_at": started.isoformat(),
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    return CodedResult(
        t,
        scheme.scheme_id,
        result_votes,
        seg_records,
        run_records,
        {seg.segment_index: p.text for seg, p in zip(segments, prompts)},
        metadata,
    )


def coded_csv(result: CodedResult, scheme: CodingScheme) -> str:
    """The coded-output table, one row per unit in transcript order."""
    n_runs = max(5, max((len(rv.votes) for rv in result.votes), default=0))
    labels = {c.code_id: c.label for c in scheme.codes}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["sentence_index", "turn_index", "speaker", "text", "assigned_code", "consistency"]
        + [f"vote_{i}" for i in range(1, n_runs + 1)]
    )
    units = {s.sentence_index: s for s in result.transcript.sentences}
    for rv in result.votes:
        unit = units[rv.sentence_index]
        votes = [labels[v] if v else "" for v in rv.votes] + [""] * (n_runs - len(rv.votes))
        w.writerow(
            [unit.sentence_index, unit.turn_index, unit.speaker, unit.text,
             labels[rv.assigned] if rv.assigned else "", rv.consistency.value]
            + votes
        )
    return buf.getvalue()


def report_dict(result: CodedResult) -> dict:
    return {
        "transcript_id": result.transcript_id,
        "scheme_id": result.scheme_id,
        "units": len(result.votes),
        "consistency": result.label_counts(),
        "failed_segments": result.failed_segments,
        "segments": [dataclasses.asdict(s) for s in result.segments],
        "runs": [
            {
                "segment_index": r.segment_index,
                "run_index": r.run_index,
                "prompt_sha256": r.prompt_sha256,
                "error": r.error,
                "parsed_lines": r.parsed_lines,
                "bound": r.bound,
                "diagnostics": [dataclasses.asdict(d) for d in r.diagnostics],
            }
            for r in result.runs
        ],
        "metadata": result.metadata,
    }


def write_outputs(result: CodedResult, scheme: CodingScheme, out_dir: str | Path) -> dict[str, Path]:
    """Write ``<id>.coded.csv``, ``<id>.report.json`` and the raw run archive."""
    out = Path(out_dir)
    raw = out / "raw" / result.transcript_id
    raw.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / f"{result.transcript_id}.coded.csv",
        "report": out / f"{result.transcript_id}.report.json",
        "raw": raw,
    }
    paths["csv"].write_text(coded_csv(result, scheme), encoding="utf-8")
    paths["report"].write_text(json.dumps(report_dict(result), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    for seg_index, text in result.prompts.items():
        (raw / f"seg{seg_index}.prompt.txt").write_text(text, encoding="utf-8")
    for r in result.runs:
        (raw / f"seg{r.segment_index}_run{r.run_index}.txt").write_text(r.text or "", encoding="utf-8")
    return paths


def parse_coded_csv(text: str, scheme: CodingScheme, transcript_id: str) -> CodedResult:
    """Rebuild a CodedResult from the coded-output table."""
    reader = csv.DictReader(io.StringIO(text.lstrip("﻿")))
    need = ("sentence_index", "turn_index", "speaker", "text", "assigned_code", "consistency")
    missing = [c for c in need if c not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"{transcript_id}: coded output is missing columns {missing}")
    vote_cols = [c for c in reader.fieldnames if c.startswith("vote_")]
    rows = list(reader)

    def code(value: str) -> str | None:
        value = (value or "").strip()
        if not value:
            return None
        cid = scheme.resolve(value)
        if cid is None:
            raise ValueError(f"{transcript_id}: unknown code {value!r}")
        return cid

    t = Transcript.from_units(
        transcript_id,
        [(r["turn_index"], r["speaker"], r["text"]) for r in rows],
        unit_of_analysis=scheme.unit_of_analysis,
    )
    votes = []
    for unit, r in zip(t.sentences, rows):
        votes.append(
            RunVotes(
                unit.sentence_index,
                tuple(code(r[c]) for c in vote_cols),
                code(r["assigned_code"]),
                ConsistencyLabel(r["consistency"]),
            )
        )
    return CodedResult(t, scheme.scheme_id, votes)


def read_coded_csv(path: str | Path, scheme: CodingScheme, transcript_id: str | None = None) -> CodedResult:
    path = Path(path)
    if transcript_id is None:
        transcript_id = path.name.split(".")[0]
    return parse_coded_csv(path.read_text("utf-8"), scheme, transcript_id)
