"""Coding schemes, human-coded exemplar material and example-floor checks."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .textsim import normalize
from .transcript import UNIT_MODES, Transcript, TranscriptError

MIN_CODES = 2
MAX_CODES = 25
SOFT_MAX_CODES = 20
MAX_EXEMPLAR_TRANSCRIPTS = 5
DEFAULT_FLOOR = 15
BUILTIN_SCHEMES = ("jackel19",)


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class ExampleSentence:
    text: str
    note: str | None = None


@dataclass(frozen=True)
class Code:
    code_id: str
    label: str
    definition: str
    extra_instructions: str | None = None
    example_sentences: tuple[ExampleSentence, ...] = ()


@dataclass(frozen=True)
class CodingScheme:
    scheme_id: str
    name: str
    unit_of_analysis: str
    codes: tuple[Code, ...]
    has_other: bool = False
    supplements: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        validate_scheme(self)

    @property
    def code_ids(self) -> list[str]:
        return [c.code_id for c in self.codes]

    def code(self, code_id: str) -> Code:
        for c in self.codes:
            if c.code_id == code_id:
                return c
        raise KeyError(code_id)

    def label_of(self, code_id: str) -> str:
        return self.code(code_id).label

    def resolve(self, value: str) -> str | None:
        """Map a code id or label (case- and punctuation-insensitive) to its id."""
        value = value.strip()
        for c in self.codes:
            if value == c.code_id or value == c.label:
                return c.code_id
        key = normalize(value)
        for c in self.codes:
            if key in (normalize(c.code_id), normalize(c.label)):
                return c.code_id
        return None


@dataclass(frozen=True)
class CodedUnit:
    transcript_id: str
    unit_index: int
    code_id: str
    coder_id: str = "human"


@dataclass(frozen=True)
class CodedTranscript:
    transcript: Transcript
    units: tuple[CodedUnit, ...]

    @property
    def transcript_id(self) -> str:
        return self.transcript.transcript_id

    def code_map(self) -> dict[int, str]:
        return {u.unit_index: u.code_id for u in self.units}


@dataclass(frozen=True)
class ExemplarSet:
    mode: str
    transcripts: tuple[CodedTranscript, ...] = ()
    ideal_sentences: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    supplements: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("ideal-sentences", "coded-transcripts"):
            raise SchemeError(f"unknown exemplar mode {self.mode!r}")
        if self.mode == "coded-transcripts" and not 1 <= len(self.transcripts) <= MAX_EXEMPLAR_TRANSCRIPTS:
            raise SchemeError(
                f"coded-transcripts mode takes 1 to {MAX_EXEMPLAR_TRANSCRIPTS} transcripts, "
                f"got {len(self.transcripts)}"
            )

    def annotations(self) -> list[CodedUnit]:
        return [u for ct in self.transcripts for u in ct.units]


@dataclass(frozen=True)
class CodeDeficit:
    code_id: str
    natural: int
    supplements: int
    deficit: int


def validate_scheme(s: CodingScheme) -> None:
    if s.unit_of_analysis not in UNIT_MODES:
        raise SchemeError(f"unknown unit_of_analysis {s.unit_of_analysis!r}")
    n = len(s.codes)
    if not MIN_CODES <= n <= MAX_CODES:
        raise SchemeError(f"scheme {s.scheme_id!r} has {n} codes; allowed range is {MIN_CODES}-{MAX_CODES}")
    if n > SOFT_MAX_CODES:
        warnings.warn(
            f"scheme {s.scheme_id!r} has {n} codes; categorization degrades above {SOFT_MAX_CODES}",
            stacklevel=3,
        )
    seen: set[str] = set()
    for c in s.codes:
        if not c.code_id.strip():
            raise SchemeError("empty code id")
        if c.code_id in seen:
            raise SchemeError(f"duplicate code id {c.code_id!r}")
        seen.add(c.code_id)
        if not c.label.strip():
            raise SchemeError(f"code {c.code_id!r} has an empty label")
        if not c.definition.strip():
            raise SchemeError(f"code {c.code_id!r} has an empty definition")
    for code_id in s.supplements:
        if code_id not in seen:
            raise SchemeError(f"supplements given for unknown code {code_id!r}")


def scheme_from_dict(doc: Mapping) -> CodingScheme:
    try:
        codes = []
        for raw in doc["codes"]:
            examples = []
            for ex in raw.get("examples") or []:
                if isinstance(ex, str):
                    examples.append(ExampleSentence(ex))
                else:
                    examples.append(ExampleSentence(ex["text"], ex.get("note")))
            codes.append(
                Code(
                    code_id=str(raw["id"]),
                    label=str(raw.get("label") or ""),
                    definition=str(raw.get("definition") or ""),
                    extra_instructions=raw.get("extra_instructions") or None,
                    example_sentences=tuple(examples),
                )
            )
        supplements = {str(k): tuple(v) for k, v in (doc.get("supplements") or {}).items()}
        has_other = doc.get("has_other")
        if has_other is None:
            has_other = any(c.code_id == "other" or c.label.lower() == "other" for c in codes)
        return CodingScheme(
            scheme_id=str(doc["scheme_id"]),
            name=str(doc.get("name") or doc["scheme_id"]),
            unit_of_analysis=str(doc.get("unit_of_analysis") or "sentence"),
            codes=tuple(codes),
            has_other=bool(has_other),
            supplements=supplements,
        )
    except (KeyError, TypeError) as exc:
        raise SchemeError(f"malformed scheme document: missing or bad field {exc}") from None


def scheme_to_dict(s: CodingScheme) -> dict:
    codes = []
    for c in s.codes:
        entry: dict = {"id": c.code_id, "label": c.label, "definition": c.definition}
        if c.extra_instructions:
            entry["extra_instructions"] = c.extra_instructions
        entry["examples"] = [
            {"text": e.text, "note": e.note} if e.note else {"text": e.text} for e in c.example_sentences
        ]
        codes.append(entry)
    doc: dict = {
        "scheme_id": s.scheme_id,
        "name": s.name,
        "unit_of_analysis": s.unit_of_analysis,
        "has_other": s.has_other,
        "codes": codes,
    }
    if s.supplements:
        doc["supplements"] = {k: list(v) for k, v in s.supplements.items()}
    return doc


def dump_scheme(s: CodingScheme) -> str:
    return json.dumps(scheme_to_dict(s), indent=2, ensure_ascii=False) + "\n"


def load_scheme(source: str | Path) -> CodingScheme:
    """Load a scheme from a JSON/YAML file, or by built-in name."""
    if isinstance(source, str) and source in BUILTIN_SCHEMES:
        text = resources.files("negcoder").joinpath(f"data/{source}.json").read_text("utf-8")
        return scheme_from_dict(json.loads(text))
    path = Path(source)
    if not path.is_file():
        raise SchemeError(f"{source} is neither a built-in scheme ({', '.join(BUILTIN_SCHEMES)}) nor a file")
    text = path.read_text("utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if not isinstance(doc, Mapping):
        raise SchemeError(f"{path}: expected a mapping at the top level")
    return scheme_from_dict(doc)


def builtin_jackel19() -> CodingScheme:
    return load_scheme("jackel19")


def code_frequencies(annotations: Iterable[CodedUnit], scheme: CodingScheme) -> dict[str, int]:
    counts = {cid: 0 for cid in scheme.code_ids}
    for unit in annotations:
        if unit.code_id not in counts:
            raise SchemeError(f"unknown code id {unit.code_id!r}")
        counts[unit.code_id] += 1
    return counts


def find_underrepresented(
    exemplars: ExemplarSet, scheme: CodingScheme, floor: int = DEFAULT_FLOOR
) -> list[CodeDeficit]:
    """Per-code example counts against ``floor``; ``deficit`` is 0 when met."""
    if floor < 1:
        raise ValueError("floor must be positive")
    natural = code_frequencies(exemplars.annotations(), scheme)
    out = []
    for cid in scheme.code_ids:
        extra = len(exemplars.supplements.get(cid, ()))
        out.append(CodeDeficit(cid, natural[cid], extra, max(0, floor - natural[cid] - extra)))
    return out


def deficient(deficits: Iterable[CodeDeficit]) -> list[CodeDeficit]:
    return [d for d in deficits if d.deficit > 0]


def parse_coded_transcript(
    text: str, scheme: CodingScheme, *, transcript_id: str, coder_id: str = "human"
) -> CodedTranscript:
    """Parse a unit-per-row CSV with columns ``turn_id,speaker,text,code``.

    Rows are units as given (no re-splitting); a blank code leaves the
    unit uncoded. Codes may be given by id or by label.
    """
    reader = csv.DictReader(io.StringIO(text.lstrip("﻿")))
    need = ("turn_id", "speaker", "text", "code")
    missing = [c for c in need if c not in (reader.fieldnames or [])]
    if missing:
        raise TranscriptError(f"{transcript_id}: coded csv is missing columns {missing}")
    rows, codes = [], []
    for rec in reader:
        rows.append((rec["turn_id"], rec["speaker"] or "", rec["text"] or ""))
        codes.append((rec["code"] or "").strip())
    if not rows:
        raise TranscriptError(f"{transcript_id}: coded csv has no rows")
    transcript = Transcript.from_units(transcript_id, rows, unit_of_analysis=scheme.unit_of_analysis)
    units = []
    for idx, raw in enumerate(codes):
        if not raw:
            continue
        cid = scheme.resolve(raw)
        if cid is None:
            raise SchemeError(f"{transcript_id}: row {idx + 2} has unknown code {raw!r}")
        units.append(CodedUnit(transcript_id, idx, cid, coder_id))
    return CodedTranscript(transcript, tuple(units))


def read_coded_transcript(path: str | Path, scheme: CodingScheme, **kwargs) -> CodedTranscript:
    path = Path(path)
    kwargs.setdefault("transcript_id", path.stem)
    return parse_coded_transcript(path.read_text("utf-8"), scheme, **kwargs)


def coded_transcript_csv(ct: CodedTranscript, scheme: CodingScheme) -> str:
    codes = ct.code_map()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["turn_id", "speaker", "text", "code"])
    for s in ct.transcript.sentences:
        cid = codes.get(s.sentence_index)
        w.writerow([s.turn_index + 1, s.speaker, s.text, scheme.label_of(cid) if cid else ""])
    return buf.getvalue()


def _read_mapping(path: Path) -> dict:
    text = path.read_text("utf-8")
    doc = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    return doc or {}


def _sentence_map(doc: Mapping, scheme: CodingScheme, what: str) -> dict[str, tuple[str, ...]]:
    out: dict[str, tuple[str, ...]] = {}
    for key, sentences in doc.items():
        cid = scheme.resolve(str(key))
        if cid is None:
            raise SchemeError(f"{what} given for unknown code {key!r}")
        out[cid] = out.get(cid, ()) + tuple(str(s) for s in sentences)
    return out


def load_exemplars(source: str | Path | None, scheme: CodingScheme) -> ExemplarSet:
    """Load exemplar material from a directory.

    ``*.csv`` files are human-coded transcripts (coded-transcripts mode,
    at most five). Optional ``supplements.{json,yaml}`` and
    ``ideal_sentences.{json,yaml}`` map code ids or labels to sentence
    lists. With no csv files, or no directory at all, the set falls back
    to ideal-sentences mode using the scheme's example sentences.
    """
    supplements = dict(scheme.supplements)
    ideal: dict[str, tuple[str, ...]] = {}
    transcripts: list[CodedTranscript] = []
    if source is not None:
        root = Path(source)
        if not root.is_dir():
            raise SchemeError(f"exemplar directory {root} does not exist")
        for ext in ("json", "yaml", "yml"):
            p = root / f"supplements.{ext}"
            if p.exists():
                for cid, extra in _sentence_map(_read_mapping(p), scheme, "supplements").items():
                    supplements[cid] = supplements.get(cid, ()) + extra
            p = root / f"ideal_sentences.{ext}"
            if p.exists():
                ideal.update(_sentence_map(_read_mapping(p), scheme, "ideal sentences"))
        transcripts = [read_coded_transcript(p, scheme) for p in sorted(root.glob("*.csv"))]
    if transcripts:
        return ExemplarSet("coded-transcripts", tuple(transcripts), ideal, supplements)
    if not ideal:
        ideal = {c.code_id: tuple(e.text for e in c.example_sentences) for c in scheme.codes if c.example_sentences}
    return ExemplarSet("ideal-sentences", (), ideal, supplements)
