"""Transcript parsing, sentence splitting and segmentation."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

UNIT_MODES = ("sentence", "speaking-turn", "thought-unit")
FORMATS = ("labeled-lines", "turn-csv")
CSV_HEADER = ("turn_id", "speaker", "text")


class TranscriptError(ValueError):
    """Raised for unreadable or malformed transcript input."""


@dataclass(frozen=True)
class SpeakingTurn:
    turn_index: int
    speaker: str
    text: str


@dataclass(frozen=True)
class SentenceUnit:
    sentence_index: int
    turn_index: int
    speaker: str
    text: str


@dataclass(frozen=True)
class Transcript:
    """A parsed conversation.

    ``sentences`` holds the units of analysis. In sentence mode they come
    from the splitter; in speaking-turn mode each turn is one unit; in
    thought-unit mode they are taken from the input rows as given.
    """

    transcript_id: str
    turns: tuple[SpeakingTurn, ...]
    sentences: tuple[SentenceUnit, ...]
    simulation_name: str | None = None
    unit_of_analysis: str = "sentence"

    @classmethod
    def from_turns(
        cls,
        transcript_id: str,
        turns: Iterable[tuple[str, str]],
        *,
        unit_of_analysis: str = "sentence",
        simulation_name: str | None = None,
    ) -> "Transcript":
        """Build from ``(speaker, text)`` pairs, deriving the units."""
        if unit_of_analysis not in ("sentence", "speaking-turn"):
            raise TranscriptError(
                f"from_turns supports sentence or speaking-turn units, not {unit_of_analysis!r}"
            )
        built: list[SpeakingTurn] = []
        units: list[SentenceUnit] = []
        for speaker, text in turns:
            norm = normalize_space(text)
            if not norm:
                raise TranscriptError(f"turn {len(built)} has empty text")
            turn = SpeakingTurn(len(built), speaker.strip(), norm)
            built.append(turn)
            pieces = split_sentences(norm) if unit_of_analysis == "sentence" else [norm]
            for piece in pieces:
                units.append(SentenceUnit(len(units), turn.turn_index, turn.speaker, piece))
        return cls(transcript_id, tuple(built), tuple(units), simulation_name, unit_of_analysis)

    @classmethod
    def from_units(
        cls,
        transcript_id: str,
        rows: Iterable[tuple[object, str, str]],
        *,
        unit_of_analysis: str = "thought-unit",
        simulation_name: str | None = None,
    ) -> "Transcript":
        """Build from pre-segmented ``(turn_key, speaker, text)`` rows.

        Consecutive rows sharing a turn key (and speaker) form one turn.
        No re-splitting happens, so any unit of analysis can be carried.
        """
        groups: list[tuple[object, str, list[str]]] = []
        for key, speaker, text in rows:
            norm = normalize_space(text)
            if not norm:
                raise TranscriptError(f"unit row {sum(len(g[2]) for g in groups)} has empty text")
            speaker = speaker.strip()
            if groups and groups[-1][0] == key and groups[-1][1] == speaker:
                groups[-1][2].append(norm)
            else:
                groups.append((key, speaker, [norm]))
        turns: list[SpeakingTurn] = []
        units: list[SentenceUnit] = []
        for t_idx, (_, speaker, texts) in enumerate(groups):
            turns.append(SpeakingTurn(t_idx, speaker, " ".join(texts)))
            for text in texts:
                units.append(SentenceUnit(len(units), t_idx, speaker, text))
        return cls(transcript_id, tuple(turns), tuple(units), simulation_name, unit_of_analysis)

    def turn_units(self, turn_index: int) -> list[SentenceUnit]:
        return [s for s in self.sentences if s.turn_index == turn_index]


@dataclass(frozen=True)
class Segment:
    segment_index: int
    sentences: tuple[SentenceUnit, ...]
    context_preamble: tuple[SpeakingTurn, ...] = field(default=())

    @property
    def start(self) -> int:
        return self.sentences[0].sentence_index if self.sentences else 0

    def __len__(self) -> int:
        return len(self.sentences)


_WS = re.compile(r"\s+")
# a run of terminators, optionally followed by closing quotes or brackets
_BOUNDARY = re.compile(r"[.?!]+[\"'”’)\]]*(?=\s|$)")
_ABBREVIATIONS = frozenset(
    {"mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "approx", "dept", "inc", "ltd", "co"}
)
_DOTTED = re.compile(r"^(?:[A-Za-z]\.)+[A-Za-z]$")


def normalize_space(text: str) -> str:
    return _WS.sub(" ", text).strip()


def _guarded(text: str, end: int) -> bool:
    """True if the lone period ending at ``end`` belongs to an abbreviation."""
    start = text.rfind(" ", 0, end) + 1
    token = text[start:end].lstrip("(\"'“‘")
    if not token.endswith(".") or token.endswith(".."):
        return False
    stem = token[:-1]
    return stem.lower() in _ABBREVIATIONS or bool(_DOTTED.match(stem))


def split_sentences(text: str) -> list[str]:
    """Split text into sentences at ``.``, ``?`` or ``!`` followed by whitespace.

    The terminator (and any closing quote or bracket) stays with its
    sentence. Periods inside numbers never qualify since they are not
    followed by whitespace; titles such as "Mr." and dotted abbreviations
    such as "e.g." are skipped. Whitespace is collapsed first, so joining
    the result with single spaces gives back the collapsed input.
    """
    norm = normalize_space(text)
    if not norm:
        return []
    out: list[str] = []
    start = 0
    for m in _BOUNDARY.finditer(norm):
        end = m.end()
        if m.group().rstrip("\"'”’)]") == "." and _guarded(norm, m.start() + 1):
            continue
        piece = norm[start:end].strip()
        if piece:
            out.append(piece)
        start = end
    tail = norm[start:].strip()
    if tail:
        out.append(tail)
    return out


def _decode(source: str | bytes | IO) -> str:
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TranscriptError(f"input is not valid UTF-8: {exc}") from None
    if source.startswith("﻿"):
        source = source[1:]
    return source.replace("\r\n", "\n").replace("\r", "\n")


def _split_label(line: str) -> tuple[str, str] | None:
    i = 0
    while True:
        i = line.find(":", i)
        if i < 0:
            return None
        if i > 0 and line[i - 1] == "\\":
            i += 1
            continue
        return line[:i].replace("\\:", ":"), line[i + 1 :]


def parse_transcript(
    source: str | bytes | IO,
    fmt: str = "labeled-lines",
    *,
    transcript_id: str = "transcript",
    unit_of_analysis: str = "sentence",
    simulation_name: str | None = None,
) -> Transcript:
    """Parse ``labeled-lines`` (``Speaker: text``) or ``turn-csv`` input.

    In thought-unit mode every line or row is one unit; rows are grouped
    into turns by ``turn_id`` (csv) or by consecutive speaker (lines).
    """
    if fmt not in FORMATS:
        raise TranscriptError(f"unknown transcript format {fmt!r}; expected one of {FORMATS}")
    if unit_of_analysis not in UNIT_MODES:
        raise TranscriptError(f"unknown unit of analysis {unit_of_analysis!r}")
    text = _decode(source)

    rows: list[tuple[object, str, str]] = []
    if fmt == "labeled-lines":
        for lineno, line in enumerate(text.split("\n"), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = _split_label(line)
            if parts is None or not parts[0].strip() or not parts[1].strip():
                raise TranscriptError(f"line {lineno}: expected 'Speaker: text', got {line!r}")
            speaker, body = parts
            key = speaker.strip() if unit_of_analysis == "thought-unit" else lineno
            rows.append((key, speaker, body))
    else:
        if not text.strip():
            raise TranscriptError("transcript is empty")
        reader = csv.DictReader(io.StringIO(text))
        missing = [c for c in CSV_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise TranscriptError(f"turn-csv is missing columns {missing}")
        for n, rec in enumerate(reader, 2):
            if rec["text"] is None or not rec["text"].strip():
                raise TranscriptError(f"row {n}: empty text")
            if not (rec["speaker"] or "").strip():
                raise TranscriptError(f"row {n}: empty speaker")
            key = rec["turn_id"] if unit_of_analysis == "thought-unit" else n
            rows.append((key, rec["speaker"], rec["text"]))

    if not rows:
        raise TranscriptError("transcript is empty")
    if unit_of_analysis == "thought-unit":
        return Transcript.from_units(
            transcript_id, rows, unit_of_analysis="thought-unit", simulation_name=simulation_name
        )
    return Transcript.from_turns(
        transcript_id,
        [(speaker, body) for _, speaker, body in rows],
        unit_of_analysis=unit_of_analysis,
        simulation_name=simulation_name,
    )


def read_transcript(path: str | Path, fmt: str | None = None, **kwargs) -> Transcript:
    """Read a transcript file; the id defaults to the file stem."""
    path = Path(path)
    if fmt is None:
        fmt = "turn-csv" if path.suffix.lower() == ".csv" else "labeled-lines"
    kwargs.setdefault("transcript_id", path.stem)
    return parse_transcript(path.read_bytes(), fmt, **kwargs)


def to_labeled_lines(t: Transcript) -> str:
    return "".join(f"{turn.speaker.replace(':', chr(92) + ':')}: {turn.text}\n" for turn in t.turns)


def to_turn_csv(t: Transcript) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for turn in t.turns:
        writer.writerow([turn.turn_index + 1, turn.speaker, turn.text])
    return buf.getvalue()


def _blocks(sentences: Sequence[SentenceUnit], max_sentences: int) -> list[list[SentenceUnit]]:
    """Group sentences by turn, cutting any oversized turn into even chunks."""
    by_turn: list[list[SentenceUnit]] = []
    for s in sentences:
        if by_turn and by_turn[-1][0].turn_index == s.turn_index:
            by_turn[-1].append(s)
        else:
            by_turn.append([s])
    blocks: list[list[SentenceUnit]] = []
    for group in by_turn:
        if len(group) <= max_sentences:
            blocks.append(group)
            continue
        n_chunks = math.ceil(len(group) / max_sentences)
        base, extra = divmod(len(group), n_chunks)
        pos = 0
        for c in range(n_chunks):
            size = base + (1 if c < extra else 0)
            blocks.append(group[pos : pos + size])
            pos += size
    return blocks


def _balanced_cuts(sizes: list[int], cap: int) -> list[int]:
    """Cut points into the fewest groups of total <= cap, minimizing the sum of squares."""
    n_groups = 1
    running = 0
    for size in sizes:
        if running + size > cap:
            n_groups += 1
            running = 0
        running += size
    prefix = [0]
    for size in sizes:
        prefix.append(prefix[-1] + size)
    m = len(sizes)
    inf = float("inf")
    # best[j][i]: cost of the first i blocks in j groups
    best = [[inf] * (m + 1) for _ in range(n_groups + 1)]
    back = [[0] * (m + 1) for _ in range(n_groups + 1)]
    best[0][0] = 0
    for j in range(1, n_groups + 1):
        for i in range(j, m + 1):
            for k in range(i - 1, j - 2, -1):
                total = prefix[i] - prefix[k]
                if total > cap:
                    break
                if best[j - 1][k] == inf:
                    continue
                cost = best[j - 1][k] + total * total
                if cost < best[j][i] or (cost == best[j][i] and k < back[j][i]):
                    best[j][i] = cost
                    back[j][i] = k
    cuts = []
    i = m
    for j in range(n_groups, 0, -1):
        cuts.append(i)
        i = back[j][i]
    return sorted(cuts)


def segment_transcript(
    t: Transcript,
    max_sentences: int = 100,
    *,
    context_turns: int = 2,
) -> list[Segment]:
    """Partition the transcript's units into segments of at most ``max_sentences``.

    Cuts fall on turn boundaries unless a single turn is longer than the
    cap. Segment sizes are balanced. Segments after the first carry up to
    ``context_turns`` preceding turns as non-codable context; those do not
    count towards the cap.
    """
    if max_sentences < 1:
        raise ValueError("max_sentences must be >= 1")
    if not t.sentences:
        return []
    blocks = _blocks(t.sentences, max_sentences)
    cuts = _balanced_cuts([len(b) for b in blocks], max_sentences)
    segments: list[Segment] = []
    lo = 0
    for idx, hi in enumerate(cuts):
        members = tuple(s for block in blocks[lo:hi] for s in block)
        preamble: tuple[SpeakingTurn, ...] = ()
        if idx > 0 and context_turns > 0:
            preamble = _context_before(t, members[0].sentence_index, context_turns)
        segments.append(Segment(idx, members, preamble))
        lo = hi
    return segments


def _context_before(t: Transcript, first_index: int, n_turns: int) -> tuple[SpeakingTurn, ...]:
    groups: list[list[SentenceUnit]] = []
    for s in reversed(t.sentences[:first_index]):
        if groups and groups[-1][0].turn_index == s.turn_index:
            groups[-1].append(s)
        else:
            if len(groups) == n_turns:
                break
            groups.append([s])
    out = []
    for group in reversed(groups):
        group.reverse()
        out.append(SpeakingTurn(group[0].turn_index, group[0].speaker, " ".join(s.text for s in group)))
    return tuple(out)
