"""In-context-learning prompt assembly and context-length budgeting.

The instruction wording below is original to this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import yaml

from .scheme import CodingScheme, ExemplarSet
from .transcript import Segment

OUTPUT_DELIMITER = " | "
CONTEXT_MARKER = "CONTEXT ONLY — do not code"
# words per token shared by the four large-model rows of the context table
WORDS_PER_TOKEN = Fraction(3, 4)
SECTION_ORDER = ("instructions", "definitions", "exemplars", "supplements", "case", "guidance", "target")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptOptions:
    include_speaker_context: bool = True
    include_adjacent_context_instruction: bool = True
    include_case_description: bool = False
    use_xml_tags: bool = False
    use_chain_of_thought: bool = False
    case_description: str | None = None


@dataclass(frozen=True)
class ModelProfile:
    model_name: str
    context_length_tokens: int
    approx_word_capacity: int
    release_note: str | None = None

    def __post_init__(self):
        if self.approx_word_capacity > self.context_length_tokens:
            raise ValueError(f"{self.model_name}: word capacity exceeds token capacity")


@dataclass(frozen=True)
class PromptText:
    text: str
    # character offsets [start, end) into ``text``
    section_map: dict[str, tuple[int, int]] = field(default_factory=dict)
    estimated_tokens: int = 0

    def section(self, name: str) -> str:
        start, end = self.section_map[name]
        return self.text[start:end]


@dataclass(frozen=True)
class BudgetCheck:
    fits: bool
    estimated_tokens: int
    limit_tokens: int
    exceeds_by: int = 0


_BUILTIN_PROFILES = (
    ModelProfile("BERT", 512, 400, "10/2018"),
    ModelProfile("GPT4", 128_000, 96_000, "3/2023"),
    ModelProfile("Claude 1", 100_000, 75_000, "4/2023"),
    ModelProfile("Claude 2", 200_000, 150_000, "11/2023"),
    ModelProfile("Claude 3", 1_000_000, 750_000, "4/2024"),
)


def builtin_profiles() -> list[ModelProfile]:
    return list(_BUILTIN_PROFILES)


def _profile_key(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


def find_profile(name: str, profiles: Iterable[ModelProfile] | None = None) -> ModelProfile | None:
    """Look a profile up by name, ignoring case, spaces and punctuation."""
    key = _profile_key(name)
    for p in profiles if profiles is not None else _BUILTIN_PROFILES:
        if _profile_key(p.model_name) == key:
            return p
    return None


def load_profiles(path: str | Path) -> list[ModelProfile]:
    """Read extra profiles (a list of objects with the ModelProfile fields)."""
    path = Path(path)
    text = path.read_text("utf-8")
    doc = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    if isinstance(doc, dict):
        doc = doc.get("profiles", [])
    return [
        ModelProfile(
            str(d["model_name"]),
            int(d["context_length_tokens"]),
            int(d["approx_word_capacity"]),
            d.get("release_note"),
        )
        for d in doc
    ]


def estimate_tokens(text: str) -> int:
    """ceil(words / 0.75), counting whitespace-delimited words."""
    words = len(text.split())
    return -(-words * WORDS_PER_TOKEN.denominator // WORDS_PER_TOKEN.numerator)


def check_budget(prompt: PromptText | str, profile: ModelProfile, reserve_fraction: float = 0.25) -> BudgetCheck:
    """Whether the prompt fits the profile with ``reserve_fraction`` kept for output."""
    if not 0 <= reserve_fraction < 1:
        raise ValueError("reserve_fraction must be in [0, 1)")
    tokens = prompt.estimated_tokens if isinstance(prompt, PromptText) else estimate_tokens(prompt)
    limit = Fraction(profile.context_length_tokens) * (1 - Fraction(str(reserve_fraction)))
    fits = tokens <= limit
    over = 0 if fits else int(-(-(tokens - limit) // 1))
    return BudgetCheck(fits, tokens, int(limit // 1), over)


class _Builder:
    def __init__(self, xml: bool):
        self.xml = xml
        self.parts: list[str] = []
        self.length = 0
        self.sections: dict[str, tuple[int, int]] = {}

    def _emit(self, s: str):
        self.parts.append(s)
        self.length += len(s)

    def section(self, name: str, body: str):
        if self.xml:
            self._emit(f"<{name}>\n")
        start = self.length
        self._emit(body.rstrip("\n") + "\n")
        self.sections[name] = (start, self.length)
        if self.xml:
            self._emit(f"</{name}>\n")
        self._emit("\n")

    def text(self) -> str:
        return "".join(self.parts)


def _code_line(sentence_no: int | str, speaker: str | None, text: str, label: str | None = None) -> str:
    fields = [str(sentence_no)]
    if speaker is not None:
        fields.append(speaker)
    fields.append(text)
    if label is not None:
        fields.append(label)
    return OUTPUT_DELIMITER.join(fields)


def _instructions(scheme: CodingScheme, opts: PromptOptions) -> str:
    unit = {"sentence": "sentence", "speaking-turn": "speaking turn", "thought-unit": "thought unit"}[
        scheme.unit_of_analysis
    ]
    fields = "the sentence number, the sentence that was coded, and the assigned code"
    lines = [
        f"You are coding a negotiation transcript with the \"{scheme.name}\" coding scheme.",
        f"Assign exactly one code to every numbered {unit} in the transcript to be coded.",
        "Use only the code labels listed under the code definitions, spelled exactly as given.",
        "",
        f"Output format: write one line per numbered {unit}, in order, containing {fields},",
        f"separated by \"{OUTPUT_DELIMITER.strip()}\" with a space on each side, like this:",
    ]
    example_label = scheme.codes[0].label
    if opts.use_chain_of_thought:
        lines.append(f"1{OUTPUT_DELIMITER}The first {unit}, copied unchanged{OUTPUT_DELIMITER}{example_label}"
                     f"{OUTPUT_DELIMITER}One sentence explaining the code")
        lines.append("After the code, add a short reason for your choice as a fourth field.")
    else:
        lines.append(f"1{OUTPUT_DELIMITER}The first {unit}, copied unchanged{OUTPUT_DELIMITER}{example_label}")
    lines += [
        f"Copy each {unit} exactly as written; do not fix its grammar or wording.",
        f"Do not skip, merge or reorder {unit}s, and do not output anything else.",
    ]
    return "\n".join(lines)


def _definitions(scheme: CodingScheme) -> str:
    lines = ["Code definitions:"]
    for c in scheme.codes:
        line = f"- {c.label}: {c.definition}"
        if c.extra_instructions:
            line += f" Additional guidance: {c.extra_instructions}"
        lines.append(line)
    return "\n".join(lines)


def _exemplars(scheme: CodingScheme, exemplars: ExemplarSet, opts: PromptOptions) -> str:
    if exemplars.mode == "coded-transcripts":
        lines = ["Human-coded example transcripts (number | speaker | sentence | code):"]
        for n, ct in enumerate(exemplars.transcripts, 1):
            codes = ct.code_map()
            lines.append("")
            lines.append(f"Example transcript {n}:")
            for s in ct.transcript.sentences:
                cid = codes.get(s.sentence_index)
                label = scheme.label_of(cid) if cid else "(uncoded)"
                speaker = s.speaker if opts.include_speaker_context else None
                lines.append(_code_line(s.sentence_index + 1, speaker, s.text, label))
        return "\n".join(lines)
    lines = ["Example sentences for each code:"]
    for c in scheme.codes:
        sentences = exemplars.ideal_sentences.get(c.code_id, ())
        if not sentences:
            continue
        lines.append("")
        lines.append(f"{c.label}:")
        lines.extend(f"- {s}" for s in sentences)
    return "\n".join(lines)


def _supplements(scheme: CodingScheme, exemplars: ExemplarSet) -> str | None:
    if not any(exemplars.supplements.get(cid) for cid in scheme.code_ids):
        return None
    lines = ["Additional example sentences for codes that are rare in the example transcripts:"]
    for c in scheme.codes:
        sentences = exemplars.supplements.get(c.code_id, ())
        if sentences:
            lines.append("")
            lines.append(f"{c.label}:")
            lines.extend(f"- {s}" for s in sentences)
    return "\n".join(lines)


def _guidance(opts: PromptOptions) -> str | None:
    lines = []
    if opts.include_speaker_context:
        lines.append("Pay attention to who is speaking (for example buyer or seller) when choosing a code.")
    if opts.include_adjacent_context_instruction:
        lines.append(
            "Read each sentence in light of the sentences before and after it; "
            "the surrounding conversation often decides which code applies."
        )
    return "\n".join(lines) or None


def _target(segment: Segment, opts: PromptOptions) -> str:
    lines = ["Transcript to be coded:"]
    for turn in segment.context_preamble:
        who = f"{turn.speaker}: " if opts.include_speaker_context else ""
        lines.append(f"[{CONTEXT_MARKER}] {who}{turn.text}")
    for n, s in enumerate(segment.sentences, 1):
        lines.append(_code_line(n, s.speaker if opts.include_speaker_context else None, s.text))
    return "\n".join(lines)


def build_prompt(
    scheme: CodingScheme,
    exemplars: ExemplarSet,
    segment: Segment,
    opts: PromptOptions | None = None,
) -> PromptText:
    """Assemble the full prompt for one segment.

    Section order: instructions, definitions, exemplars, supplements,
    optional case description, context guidance, target segment. Target
    units are numbered from 1; context-preamble turns carry no number.
    Deficit checks are the caller's job.
    """
    opts = opts or PromptOptions()
    if not segment.sentences:
        raise PromptError("cannot build a prompt for an empty segment")
    b = _Builder(opts.use_xml_tags)
    b.section("instructions", _instructions(scheme, opts))
    b.section("definitions", _definitions(scheme))
    b.section("exemplars", _exemplars(scheme, exemplars, opts))
    supp = _supplements(scheme, exemplars)
    if supp:
        b.section("supplements", supp)
    if opts.include_case_description and opts.case_description:
        b.section("case", "Case description:\n" + opts.case_description.strip())
    guide = _guidance(opts)
    if guide:
        b.section("guidance", guide)
    b.section("target", _target(segment, opts))
    text = b.text()
    return PromptText(text, b.sections, estimate_tokens(text))
