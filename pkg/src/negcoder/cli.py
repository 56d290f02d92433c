"""Command-line entry point: ``negcoder <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import random
import sys
from pathlib import Path

from . import __version__
from .backend import BackendError
from .config import RunConfig, build_config
from .evaluation import (
    EvaluationError,
    MismatchKey,
    compare_many,
    ingest_adjudications,
    read_adjudications,
    sample_mismatches,
)
from .prompt import builtin_profiles, check_budget, find_profile, load_profiles
from .runner import (
    BudgetExceeded,
    DeficitError,
    check_exemplars,
    code_transcript,
    prepare_prompts,
    read_coded_csv,
    write_outputs,
)
from .scheme import (
    BUILTIN_SCHEMES,
    CodingScheme,
    SchemeError,
    dump_scheme,
    load_exemplars,
    load_scheme,
    read_coded_transcript,
)
from .selection import (
    SelectionError,
    TranscriptPool,
    combination_count,
    sample_covering_sets,
    select_best,
)
from .transcript import TranscriptError, read_transcript

log = logging.getLogger("negcoder")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class CliError(Exception):
    pass


def _scheme(cfg_or_name: RunConfig | str | None, unit: str | None = None) -> CodingScheme:
    name = cfg_or_name.scheme if isinstance(cfg_or_name, RunConfig) else cfg_or_name
    if not name:
        raise CliError("no coding scheme given (use --scheme)")
    scheme = load_scheme(name)
    if unit and unit != scheme.unit_of_analysis:
        scheme = dataclasses.replace(scheme, unit_of_analysis=unit)
    return scheme


def _config(args) -> RunConfig:
    overrides = {
        "scheme": args.scheme,
        "exemplars": getattr(args, "exemplars", None),
        "transcripts": tuple(args.transcript) if getattr(args, "transcript", None) else None,
        "output_dir": getattr(args, "out", None),
        "model_profile": args.profile,
        "runs": args.runs,
        "vote_threshold": args.threshold,
        "max_sentences_per_segment": args.max_sentences,
        "temperature": args.temperature,
        "seed": args.seed,
        "unit_of_analysis": args.unit,
        "similarity_threshold": args.similarity,
        "profiles_file": args.profiles,
        "allow_sparse": True if args.allow_sparse else None,
        "context_turns": 0 if args.no_context_preamble else None,
        "backend.kind": args.backend,
        "backend.mock_script_path": args.mock_script,
        "backend.mock_seed": args.mock_seed,
        "backend.endpoint_url": args.endpoint,
        "backend.model_id": args.model_id,
        "backend.auth_token_env_var_name": args.token_env,
        "prompt.use_xml_tags": True if args.xml_tags else None,
        "prompt.use_chain_of_thought": True if args.chain_of_thought else None,
        "prompt.include_speaker_context": False if args.no_speaker_context else None,
        "prompt.include_adjacent_context_instruction": False if args.no_adjacent_context else None,
    }
    if args.case_description:
        overrides["prompt.include_case_description"] = True
        overrides["prompt.case_description"] = Path(args.case_description).read_text("utf-8")
    cfg = build_config(args.config, overrides)
    if cfg.seed is None:
        cfg = dataclasses.replace(cfg, seed=random.SystemRandom().randrange(2**31))
        log.info("no seed given; using seed %d", cfg.seed)
    return cfg


def _transcript_paths(cfg: RunConfig) -> list[Path]:
    if not cfg.transcripts:
        raise CliError("no transcript given (use --transcript)")
    paths = []
    for p in map(Path, cfg.transcripts):
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".csv", ".txt")))
        else:
            paths.append(p)
    return paths


def _dump(path: Path, name: str, text: str, many: bool) -> None:
    target = path.with_name(f"{path.stem}.{name}{path.suffix}") if many else path
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")


def cmd_code(args) -> int:
    cfg = _config(args)
    scheme = _scheme(cfg, cfg.unit_of_analysis)
    exemplars = load_exemplars(cfg.exemplars, scheme)
    opts = cfg.run_options()
    check_exemplars(exemplars, scheme, opts)
    print(f"seed: {cfg.seed}", file=sys.stderr)
    transcripts = [read_transcript(p, args.format, unit_of_analysis=scheme.unit_of_analysis) for p in _transcript_paths(cfg)]
    status = EXIT_OK
    dumps: list[tuple[str, str]] = []
    for t in transcripts:
        result = code_transcript(t, scheme, exemplars, cfg.backend, opts)
        paths = write_outputs(result, scheme, cfg.output_dir)
        dumps.extend((f"{t.transcript_id}.seg{i}", text) for i, text in sorted(result.prompts.items()))
        counts = result.label_counts()
        print(f"{t.transcript_id}: {len(result.votes)} units -> {paths['csv']}")
        for label, n in counts.items():
            print(f"  {label:<10} {n}")
        if result.failed_segments:
            print(f"  failed segments: {result.failed_segments}", file=sys.stderr)
            status = EXIT_PARTIAL
    if args.dump_prompt:
        for name, text in dumps:
            _dump(Path(args.dump_prompt), name, text, len(dumps) > 1)
    return status


def _pair_files(model_files: list[str], human_files: list[str], scheme: CodingScheme):
    models = {}
    for f in model_files:
        r = read_coded_csv(f, scheme)
        models[r.transcript_id] = r
    humans = {}
    for f in human_files:
        h = read_coded_transcript(f, scheme)
        humans[h.transcript_id] = h
    if set(models) != set(humans):
        only_m = sorted(set(models) - set(humans))
        only_h = sorted(set(humans) - set(models))
        raise CliError(f"transcript ids do not pair up (model only: {only_m}; human only: {only_h})")
    return [(models[tid], humans[tid]) for tid in sorted(models)]


def cmd_validate(args) -> int:
    scheme = _scheme(args.scheme)
    pooled = compare_many(_pair_files(args.model, args.human, scheme), scheme)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "pooled": pooled.pooled.to_dict(),
        "per_transcript": {tid: r.to_dict() for tid, r in pooled.per_transcript.items()},
    }
    (out / "match_report.json").write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    text = pooled.pooled.to_text(scheme)
    (out / "match_report.txt").write_text(text, encoding="utf-8")
    labels = {c.code_id: c.label for c in scheme.codes}
    (out / "confusion.csv").write_text(pooled.pooled.confusion.to_csv(labels), encoding="utf-8")
    print(text, end="")
    for tid, r in pooled.per_transcript.items():
        print(f"{tid}: strict {r.strict_match_rate:.4f} lenient {r.lenient_match_rate:.4f}")
    return EXIT_OK


def cmd_mismatch_export(args) -> int:
    scheme = _scheme(args.scheme)
    pairs = _pair_files(args.model, args.human, scheme)
    human_units = [u for _, h in pairs for u in h.units]
    export = sample_mismatches([m for m, _ in pairs], human_units, scheme, k=args.k, seed=args.seed)
    for w in export.warnings:
        print(f"warning: {w}", file=sys.stderr)
    Path(args.out).write_text(export.to_csv(), encoding="utf-8")
    Path(args.key).write_text(export.key.to_json(), encoding="utf-8")
    print(f"{len(export.samples)} samples -> {args.out} (key: {args.key})")
    return EXIT_OK


def cmd_mismatch_ingest(args) -> int:
    key = MismatchKey.from_json(Path(args.key).read_text("utf-8"))
    summary = ingest_adjudications(read_adjudications(args.adjudications), key, args.match_rate)
    for w in summary.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"adjudications        : {summary.n}")
    print(f"agree with model     : {summary.agree_with_model_rate:.4f}")
    print(f"agree with human     : {summary.agree_with_human_rate:.4f}")
    print(f"neither              : {summary.neither_rate:.4f}")
    if summary.implied_accuracy is not None:
        print(f"implied accuracy     : {summary.implied_accuracy:.4f}")
    for adj, r in summary.per_adjudicator.items():
        print(f"  {adj or '(unnamed)'}: n={r.n} model {r.agree_with_model_rate:.4f} human {r.agree_with_human_rate:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(dataclasses.asdict(summary), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _coded_dir(path: str, scheme: CodingScheme):
    root = Path(path)
    files = sorted(root.glob("*.csv")) if root.is_dir() else [root]
    if not files:
        raise CliError(f"no coded transcripts found in {path}")
    return [read_coded_transcript(f, scheme) for f in files]


def cmd_select_training(args) -> int:
    cfg = _config(args)
    scheme = _scheme(cfg, cfg.unit_of_analysis)
    pool = TranscriptPool.build(_coded_dir(args.pool, scheme), scheme)
    total = combination_count(len(pool.transcripts), args.k)
    print(f"pool of {len(pool.transcripts)} transcripts: {total} possible sets of {args.k}")
    print(f"seed: {cfg.seed}", file=sys.stderr)
    candidates = sample_covering_sets(pool, scheme, args.k, args.candidates, cfg.seed, args.max_attempts)
    if args.sample_only:
        for c in candidates:
            print(";".join(c.members))
        return EXIT_OK
    if not args.validation:
        raise CliError("--validation is required unless --sample-only is given")
    validation = _coded_dir(args.validation, scheme)
    winner, board = select_best(candidates, validation, scheme, cfg.backend, pool, cfg.run_options())
    out = Path(args.leaderboard)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(board.to_csv(), encoding="utf-8")
    print(f"leaderboard -> {out}")
    print(f"winner: {';'.join(winner.members)} (lenient {winner.lenient:.4f}, strict {winner.strict:.4f})")
    return EXIT_OK


def cmd_budget(args) -> int:
    cfg = _config(args)
    scheme = _scheme(cfg, cfg.unit_of_analysis)
    profiles = builtin_profiles()
    if cfg.profiles_file:
        profiles = load_profiles(cfg.profiles_file) + profiles
    if args.profile:
        chosen = find_profile(args.profile, profiles)
        if chosen is None:
            raise CliError(f"unknown model profile {args.profile!r}; known: {', '.join(p.model_name for p in profiles)}")
        profiles = [chosen]
    exemplars = load_exemplars(cfg.exemplars, scheme)
    opts = dataclasses.replace(cfg.run_options(), model_profile=None)
    for path in _transcript_paths(cfg):
        t = read_transcript(path, args.format, unit_of_analysis=scheme.unit_of_analysis)
        _, prompts = prepare_prompts(t, scheme, exemplars, opts)
        for i, prompt in enumerate(prompts):
            print(f"{t.transcript_id} segment {i}: ~{prompt.estimated_tokens} tokens")
            for p in profiles:
                chk = check_budget(prompt, p, cfg.reserve_fraction)
                verdict = "fits" if chk.fits else f"exceeds by {chk.exceeds_by}"
                print(f"  {p.model_name:<10} capacity {p.context_length_tokens:>9,} tokens "
                      f"(usable {chk.limit_tokens:,}): {verdict}")
    return EXIT_OK


def cmd_schemes(args) -> int:
    if args.action == "list":
        for name in BUILTIN_SCHEMES:
            s = load_scheme(name)
            print(f"{name}\t{len(s.codes)} codes\t{s.name}")
        return EXIT_OK
    if not args.name:
        raise CliError("schemes show needs a scheme name or file")
    print(dump_scheme(load_scheme(args.name)), end="")
    return EXIT_OK


def _run_args(p: argparse.ArgumentParser, *, transcripts: bool = True) -> None:
    p.add_argument("--config", help="JSON or YAML run configuration; flags override it")
    p.add_argument("--scheme", help=f"built-in scheme ({', '.join(BUILTIN_SCHEMES)}) or scheme file")
    p.add_argument("--unit", choices=("sentence", "speaking-turn", "thought-unit"), help="unit of analysis")
    if transcripts:
        p.add_argument("--exemplars", help="directory of human-coded example transcripts")
        p.add_argument("--transcript", action="append", help="transcript file or directory (repeatable)")
        p.add_argument("--format", choices=("labeled-lines", "turn-csv"), help="default: by file suffix")
    p.add_argument("--profile", help="model profile for the token budget (default Claude 3)")
    p.add_argument("--profiles", help="extra model profiles file")
    p.add_argument("--runs", type=int)
    p.add_argument("--threshold", type=int, help="votes needed to assign a code")
    p.add_argument("--max-sentences", type=int, help="units per segment (default 100)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--similarity", type=float, help="alignment similarity threshold (default 0.8)")
    p.add_argument("--allow-sparse", action="store_true", help="warn instead of failing on rare-code deficits")
    p.add_argument("--no-context-preamble", action="store_true")
    p.add_argument("--xml-tags", action="store_true")
    p.add_argument("--chain-of-thought", action="store_true")
    p.add_argument("--no-speaker-context", action="store_true")
    p.add_argument("--no-adjacent-context", action="store_true")
    p.add_argument("--case-description", help="file with a case description to include in the prompt")
    p.add_argument("--backend", choices=("mock", "http"))
    p.add_argument("--mock-script", help="mock backend script (JSON)")
    p.add_argument("--mock-seed", type=int)
    p.add_argument("--endpoint", help="HTTP completion endpoint URL")
    p.add_argument("--model-id")
    p.add_argument("--token-env", help="name of the environment variable holding the API token")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="negcoder",
        description="Code conversation transcripts with an LLM and compare the result with human coding.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("code", help="code transcripts with the model")
    _run_args(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--dump-prompt", help="write the exact prompt(s) sent to this file")
    p.set_defaults(func=cmd_code)

    p = sub.add_parser("validate", help="compare model coding with human coding")
    p.add_argument("--scheme", required=True)
    p.add_argument("--model", nargs="+", required=True, help="coded-output CSVs")
    p.add_argument("--human", nargs="+", required=True, help="human-coded transcript CSVs")
    p.add_argument("--out", default="validation")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("mismatch", help="blinded mismatch review")
    msub = p.add_subparsers(dest="action", required=True)
    e = msub.add_parser("export")
    e.add_argument("--scheme", required=True)
    e.add_argument("--model", nargs="+", required=True)
    e.add_argument("--human", nargs="+", required=True)
    e.add_argument("--k", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="export CSV for reviewers")
    e.add_argument("--key", required=True, help="hidden key file (keep away from reviewers)")
    e.set_defaults(func=cmd_mismatch_export)
    i = msub.add_parser("ingest")
    i.add_argument("--adjudications", required=True)
    i.add_argument("--key", required=True)
    i.add_argument("--match-rate", type=float, help="override the lenient match rate stored in the key")
    i.add_argument("--out", help="write the summary as JSON")
    i.set_defaults(func=cmd_mismatch_ingest)

    p = sub.add_parser("select-training", help="pick the exemplar transcript set")
    _run_args(p, transcripts=False)
    p.add_argument("--pool", required=True, help="directory of human-coded candidate transcripts")
    p.add_argument("--validation", help="directory of human-coded validation transcripts")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--candidates", type=int, default=5)
    p.add_argument("--max-attempts", type=int, default=100_000)
    p.add_argument("--sample-only", action="store_true", help="only print the sampled covering sets")
    p.add_argument("--leaderboard", default="leaderboard.csv")
    p.set_defaults(func=cmd_select_training)

    p = sub.add_parser("budget", help="estimated prompt tokens against model profiles")
    _run_args(p)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("schemes", help="list or show coding schemes")
    p.add_argument("action", choices=("list", "show"))
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_schemes)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DeficitError as exc:
        print(f"error: {exc}. Add supplement sentences or pass --allow-sparse.", file=sys.stderr)
    except BudgetExceeded as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (CliError, SchemeError, TranscriptError, EvaluationError, SelectionError, BackendError,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
