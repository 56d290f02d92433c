"""Run configuration: a JSON/YAML file merged with command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backend import BackendConfig
from .prompt import PromptOptions, load_profiles
from .runner import RunOptions


@dataclass(frozen=True)
class RunConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    model_profile: str | None = "Claude 3"
    runs: int = 5
    vote_threshold: int = 3
    max_sentences_per_segment: int = 100
    context_turns: int = 2
    temperature: float = 0.2
    max_output_tokens: int = 4096
    seed: int | None = None
    unit_of_analysis: str | None = None
    similarity_threshold: float = 0.8
    reserve_fraction: float = 0.25
    max_in_flight: int = 5
    allow_sparse: bool = False
    example_floor: int = 15
    prompt: PromptOptions = field(default_factory=PromptOptions)
    profiles_file: str | None = None
    scheme: str | None = None
    exemplars: str | None = None
    transcripts: tuple[str, ...] = ()
    output_dir: str = "out"

    def __post_init__(self):
        if self.vote_threshold > self.runs:
            raise ValueError(f"vote_threshold ({self.vote_threshold}) exceeds runs ({self.runs})")

    def run_options(self) -> RunOptions:
        extra = tuple(load_profiles(self.profiles_file)) if self.profiles_file else ()
        return RunOptions(
            runs=self.runs,
            vote_threshold=self.vote_threshold,
            max_sentences_per_segment=self.max_sentences_per_segment,
            context_turns=self.context_turns,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            seed=self.seed,
            similarity_threshold=self.similarity_threshold,
            prompt=self.prompt,
            model_profile=self.model_profile,
            reserve_fraction=self.reserve_fraction,
            max_in_flight=self.max_in_flight,
            allow_sparse=self.allow_sparse,
            example_floor=self.example_floor,
            extra_profiles=extra,
        )


_PATH_KEYS = {"scheme", "exemplars", "transcripts", "output_dir"}


def _read(path: str | Path) -> dict:
    path = Path(path)
    text = path.read_text("utf-8")
    doc = yaml.safe_load(text) if path.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return doc


def build_config(file: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge a config file with overrides; override values of ``None`` are ignored.

    Backend and prompt settings may be given as nested mappings; the
    override keys ``backend.<field>`` and ``prompt.<field>`` reach into them.
    """
    doc = _read(file) if file else {}
    paths = doc.pop("paths", {}) or {}
    for key in _PATH_KEYS & set(paths):
        doc[key] = paths[key]
    backend = dict(doc.pop("backend", {}) or {})
    prompt = dict(doc.pop("prompt", {}) or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("backend."):
            backend[key.split(".", 1)[1]] = value
        elif key.startswith("prompt."):
            prompt[key.split(".", 1)[1]] = value
        else:
            doc[key] = value
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "transcripts" in doc:
        doc["transcripts"] = tuple(doc["transcripts"]) if not isinstance(doc["transcripts"], str) else (doc["transcripts"],)
    prompt_fields = {f.name for f in dataclasses.fields(PromptOptions)}
    bad = set(prompt) - prompt_fields
    if bad:
        raise ValueError(f"unknown prompt option keys: {sorted(bad)}")
    return RunConfig(backend=BackendConfig.from_dict(backend), prompt=PromptOptions(**prompt), **doc)
