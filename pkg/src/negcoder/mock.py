"""Deterministic scripted backend for offline runs and tests.

A script is a JSON document::

    {
      "labels": ["Accepting Offer", ...],
      "noise": {"skip_rate": 0.05, "rewrite_rate": 0.1, "recode_rate": 0.1},
      "entries": [
        {"segment": "t1#0", "text": "1 | Hello. | Other\\n..."},
        {"segment": "t1#0", "run": 3, "text": "..."},
        {"prompt_sha256": "ab12...", "text": "..."},
        {"segment": "t1#1", "run": 2, "error": "transport"}
      ]
    }

An entry matches a request when every key it sets agrees with the
request; the most specific match wins (prompt hash over segment over
run), earlier entries win ties. ``segment`` is ``"<transcript_id>#<n>"``
or a bare segment number. With ``noise`` present, responses are
perturbed per run: lines are dropped, their echoed sentence reworded or
their code swapped, all driven by a RNG seeded from (prompt hash, run
index, seed). Entries with ``"noise": false`` are returned verbatim.
When nothing matches the mock returns empty text.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backend import (
    ERRORS_BY_KIND,
    BackendConfig,
    CompletionRequest,
    CompletionResponse,
)
from .prompt import OUTPUT_DELIMITER
from .transcript import Transcript, segment_transcript


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _seed_from(*parts: object) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class NoiseSpec:
    skip_rate: float = 0.0
    rewrite_rate: float = 0.0
    recode_rate: float = 0.0

    @classmethod
    def from_dict(cls, doc: Mapping | None) -> "NoiseSpec | None":
        if not doc:
            return None
        return cls(
            float(doc.get("skip_rate", 0.0)),
            float(doc.get("rewrite_rate", 0.0)),
            float(doc.get("recode_rate", 0.0)),
        )


@dataclass(frozen=True)
class LineNoise:
    """What the noise step did to one line of the clean response."""

    line_no: int
    original: str
    skipped: bool = False
    rewritten: str | None = None
    recoded_to: str | None = None


_CONTRACTIONS = {
    "can't": "cannot",
    "won't": "will not",
    "don't": "do not",
    "doesn't": "does not",
    "isn't": "is not",
    "aren't": "are not",
    "wouldn't": "would not",
    "couldn't": "could not",
    "I'm": "I am",
    "we're": "we are",
    "you're": "you are",
    "they're": "they are",
    "it's": "it is",
    "that's": "that is",
    "there's": "there is",
    "let's": "let us",
    "we'll": "we will",
    "I'll": "I will",
    "I've": "I have",
    "we've": "we have",
}
_COLLOQUIAL = {"gonna": "going to", "wanna": "want to", "kinda": "kind of", "yeah": "yes", "ok": "okay"}


def _rules() -> list[tuple[re.Pattern, str]]:
    rules = []
    for short, full in _CONTRACTIONS.items():
        for variant in {short, short.replace("'", "’")}:
            rules.append((re.compile(rf"\b{re.escape(variant)}\b", re.IGNORECASE), full))
        rules.append((re.compile(rf"\b{re.escape(full)}\b", re.IGNORECASE), short))
    for informal, formal in _COLLOQUIAL.items():
        rules.append((re.compile(rf"\b{informal}\b", re.IGNORECASE), formal))
    rules.append((re.compile(r"\b(?:um|uh|you know|I mean),?\s+", re.IGNORECASE), ""))
    return rules


_REWRITE_RULES = _rules()


def rewrite_sentence(sentence: str, rng: random.Random) -> str:
    """A grammar-style edit of the kind models make when echoing input.

    Picks one applicable edit (contraction, colloquialism, filler
    removal); falls back to changing the final punctuation.
    """
    applicable = [(pat, rep) for pat, rep in _REWRITE_RULES if pat.search(sentence)]
    if applicable:
        pat, rep = rng.choice(applicable)
        out = pat.sub(rep, sentence, count=1)
        if out and out[0].islower() and sentence[:1].isupper():
            out = out[0].upper() + out[1:]
        return out
    if sentence.endswith("."):
        return sentence[:-1] + "!"
    if sentence.endswith(("?", "!")):
        return sentence[:-1] + "."
    return sentence + "."


def noisy_variant(
    text: str, noise: NoiseSpec, rng: random.Random, labels: Sequence[str]
) -> tuple[str, list[LineNoise]]:
    """Perturb a clean ``n | sentence | code`` response.

    Every record line consumes the same four draws (skip, rewrite and
    recode decisions plus a seed for its own choices), so what happens to
    a line does not depend on what happened to earlier lines.
    """
    out_lines: list[str] = []
    events: list[LineNoise] = []
    for line_no, line in enumerate(text.splitlines()):
        fields = line.split(OUTPUT_DELIMITER)
        if len(fields) < 3:
            out_lines.append(line)
            continue
        u_skip, u_rewrite, u_recode = rng.random(), rng.random(), rng.random()
        pick = random.Random(rng.getrandbits(64))
        if u_skip < noise.skip_rate:
            events.append(LineNoise(line_no, line, skipped=True))
            continue
        rewritten = recoded = None
        if u_rewrite < noise.rewrite_rate:
            rewritten = rewrite_sentence(fields[-2], pick)
            fields[-2] = rewritten
        if u_recode < noise.recode_rate:
            others = [lab for lab in labels if lab != fields[-1]]
            if others:
                recoded = pick.choice(others)
                fields[-1] = recoded
        events.append(LineNoise(line_no, line, rewritten=rewritten, recoded_to=recoded))
        out_lines.append(OUTPUT_DELIMITER.join(fields))
    return "\n".join(out_lines) + ("\n" if text.endswith("\n") else ""), events


class MockBackend:
    name = "mock"

    def __init__(self, script: Mapping, seed: int = 0, jitter_ms: int = 0):
        self.entries: list[dict] = list(script.get("entries", []))
        self.noise = NoiseSpec.from_dict(script.get("noise"))
        self.labels: list[str] = list(script.get("labels", []))
        self.seed = seed
        self.jitter_ms = jitter_ms

    @classmethod
    def from_config(cls, cfg: BackendConfig) -> "MockBackend":
        script: Mapping = {}
        if cfg.mock_script_path:
            script = json.loads(Path(cfg.mock_script_path).read_text("utf-8"))
        return cls(script, seed=cfg.mock_seed or 0, jitter_ms=cfg.mock_jitter_ms)

    def _match(self, req: CompletionRequest, digest: str) -> dict | None:
        tag = req.run_tag
        best, best_score = None, -1
        for entry in self.entries:
            score = 0
            if "prompt_sha256" in entry:
                if entry["prompt_sha256"] != digest:
                    continue
                score += 4
            if "segment" in entry:
                seg = entry["segment"]
                if isinstance(seg, int):
                    if seg != tag.segment_index:
                        continue
                elif seg != f"{tag.transcript_id}#{tag.segment_index}":
                    continue
                score += 2
            if entry.get("run") is not None:
                if entry["run"] != tag.run_index:
                    continue
                score += 1
            if score > best_score:
                best, best_score = entry, score
        return best

    def respond(self, req: CompletionRequest) -> tuple[str, list[LineNoise]]:
        """Scripted text for a request plus the noise applied to it."""
        digest = prompt_sha256(req.prompt)
        entry = self._match(req, digest)
        if entry is None:
            return "", []
        if "error" in entry:
            cls = ERRORS_BY_KIND.get(entry["error"], ERRORS_BY_KIND["backend"])
            raise cls(f"scripted {entry['error']} failure", req.run_tag)
        text = entry.get("text", "")
        if self.noise is None or entry.get("noise") is False:
            return text, []
        rng = random.Random(_seed_from(digest, req.run_tag.run_index, self.seed))
        return noisy_variant(text, self.noise, rng, self.labels)

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        started = time.monotonic()
        if self.jitter_ms:
            jitter = random.Random(_seed_from("jitter", prompt_sha256(req.prompt), req.run_tag.run_index))
            time.sleep(jitter.uniform(0, self.jitter_ms) / 1000)
        text, _ = self.respond(req)
        return CompletionResponse(text, int((time.monotonic() - started) * 1000), self.name)


def clean_response(transcript: Transcript, codes: Mapping[int, str], labels: Mapping[str, str],
                   sentence_indices: Iterable[int]) -> str:
    """The ideal model output for the given units, numbered from 1."""
    by_index = {s.sentence_index: s for s in transcript.sentences}
    lines = []
    for n, idx in enumerate(sentence_indices, 1):
        lines.append(OUTPUT_DELIMITER.join([str(n), by_index[idx].text, labels[codes[idx]]]))
    return "\n".join(lines) + "\n"


def build_script(
    coded: Iterable[tuple[Transcript, Mapping[int, str]]],
    labels: Mapping[str, str],
    *,
    max_sentences: int = 100,
    context_turns: int = 2,
    noise: NoiseSpec | None = None,
) -> dict:
    """Script that answers every segment with its ground-truth codes.

    ``labels`` maps code ids to display labels; ``coded`` pairs each
    transcript with its unit-index to code-id map.
    """
    entries = []
    for transcript, codes in coded:
        for seg in segment_transcript(transcript, max_sentences, context_turns=context_turns):
            entries.append(
                {
                    "segment": f"{transcript.transcript_id}#{seg.segment_index}",
                    "text": clean_response(transcript, codes, labels, [s.sentence_index for s in seg.sentences]),
                }
            )
    script: dict = {"labels": list(labels.values()), "entries": entries}
    if noise is not None:
        script["noise"] = {
            "skip_rate": noise.skip_rate,
            "rewrite_rate": noise.rewrite_rate,
            "recode_rate": noise.recode_rate,
        }
    return script
