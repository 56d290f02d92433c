import csv
import io

import pytest

import synth
from negcoder.backend import BackendConfig
from negcoder.mock import MockBackend, clean_response, prompt_sha256
from negcoder.runner import RunOptions, prepare_prompts
from negcoder.scheme import CodingScheme, Code, ExemplarSet
from negcoder.selection import (
    CandidateSet,
    SelectionError,
    TranscriptPool,
    combination_count,
    sample_covering_sets,
    select_best,
)
from oracles import comb_multiplicative


@pytest.mark.parametrize("n,k", [(75, 5), (70, 5), (10, 3), (5, 5), (6, 0)])
def test_combination_count_matches_product_formula(n, k):
    assert combination_count(n, k) == comb_multiplicative(n, k)


def test_combination_count_errors():
    with pytest.raises(SelectionError):
        combination_count(3, 5)
    with pytest.raises(SelectionError):
        combination_count(-1, 0)


@pytest.fixture
def tiny():
    return CodingScheme("tiny", "Tiny", "sentence", tuple(Code(c, c.upper(), f"{c} code.") for c in "abcd"))


def _pool(scheme, layout):
    """layout: transcript id -> codes used, in order."""
    cts = []
    for n, (tid, codes) in enumerate(layout.items()):
        t = synth.make_transcript(tid, len(codes), seed=n)
        cts.append(synth.coded(t, dict(enumerate(codes))))
    return TranscriptPool.build(cts, scheme)


LAYOUT = {f"t{i}": ["a", "b", "c"][: 1 + i % 3] for i in range(9)}
LAYOUT["rare"] = ["d", "a"]


def test_pool_coverage_masks(tiny):
    pool = _pool(tiny, LAYOUT)
    assert pool.coverage["t0"] == 0b0001
    assert pool.coverage["t2"] == 0b0111
    assert pool.coverage["rare"] == 0b1001
    assert pool.mask_codes(pool.coverage["rare"]) == ["a", "d"]


def test_covering_sets_always_include_unique_transcript(tiny):
    pool = _pool(tiny, LAYOUT)
    cands = sample_covering_sets(pool, tiny, k=3, n_candidates=20, seed=4)
    assert len(cands) == 20 and len({c.members for c in cands}) == 20
    assert all("rare" in c.members for c in cands)
    assert all(c.covered == ("a", "b", "c", "d") for c in cands)
    assert cands == sample_covering_sets(pool, tiny, k=3, n_candidates=20, seed=4)
    assert cands != sample_covering_sets(pool, tiny, k=3, n_candidates=20, seed=5)


def test_uncoverable_and_exhausted(tiny):
    pool = _pool(tiny, {k: v for k, v in LAYOUT.items() if k != "rare"})
    with pytest.raises(SelectionError, match="D"):
        sample_covering_sets(pool, tiny, k=3)
    pool = _pool(tiny, LAYOUT)
    with pytest.raises(SelectionError, match="found only"):
        sample_covering_sets(pool, tiny, k=3, n_candidates=10_000, max_attempts=500)


def test_duplicate_pool_ids(tiny):
    t = synth.make_transcript("dup", 2)
    ct = synth.coded(t, {0: "a", 1: "b"})
    with pytest.raises(SelectionError):
        TranscriptPool.build([ct, ct], tiny)


def test_select_best_ranks_by_lenient_rate(tiny):
    pool = _pool(tiny, LAYOUT)
    cands = [CandidateSet(("rare", "t0", "t1"), ()), CandidateSet(("rare", "t2", "t5"), ()),
             CandidateSet(("rare", "t3", "t4"), ())]
    val_t = synth.make_transcript("v1", 8, seed=50)
    truth = {i: "abcd"[i % 4] for i in range(8)}
    validation = [synth.coded(val_t, truth)]
    opts = RunOptions(seed=0, allow_sparse=True, model_profile=None)
    labels = {c.code_id: c.label for c in tiny.codes}
    # how many units each candidate gets wrong
    wrong = {cands[0].members: 2, cands[1].members: 0, cands[2].members: 5}
    entries = []
    for cand in cands:
        ex = ExemplarSet("coded-transcripts", tuple(pool.get(m) for m in cand.members))
        _, prompts = prepare_prompts(val_t, tiny, ex, opts)
        codes = dict(truth)
        for i in range(wrong[cand.members]):
            codes[i] = "abcd"[(i % 4 + 1) % 4]
        text = clean_response(val_t, codes, labels, range(8))
        entries.append({"prompt_sha256": prompt_sha256(prompts[0].text), "text": text})
    backend = MockBackend({"entries": entries})
    winner, board = select_best(cands, validation, tiny, BackendConfig(), pool, opts, backend=backend)
    assert winner.members == ("rare", "t2", "t5")
    assert winner.lenient == 1.0
    assert [c.lenient for c in board.entries] == [6 / 8, 1.0, 3 / 8]
    rows = list(csv.DictReader(io.StringIO(board.to_csv())))
    assert rows[0]["candidate_members"] == "rare;t0;t1" and rows[1]["lenient"] == "1.0000"


def test_select_best_disqualifies_failed_segments(tiny):
    pool = _pool(tiny, LAYOUT)
    cands = [CandidateSet(("rare", "t0", "t1"), ()), CandidateSet(("rare", "t2", "t5"), ())]
    val_t = synth.make_transcript("v1", 6, seed=51)
    truth = {i: "abcd"[i % 4] for i in range(6)}
    opts = RunOptions(seed=0, allow_sparse=True, model_profile=None)
    labels = {c.code_id: c.label for c in tiny.codes}
    ex = ExemplarSet("coded-transcripts", tuple(pool.get(m) for m in cands[1].members))
    _, prompts = prepare_prompts(val_t, tiny, ex, opts)
    good = {"prompt_sha256": prompt_sha256(prompts[0].text), "text": clean_response(val_t, truth, labels, range(6))}
    # every other prompt yields an empty response, which fails all runs
    backend = MockBackend({"entries": [good]})
    winner, board = select_best(cands, [synth.coded(val_t, truth)], tiny, BackendConfig(), pool, opts, backend=backend)
    assert winner is cands[1]
    assert board.entries[0].disqualified and "failed segments" in board.entries[0].reason
    with pytest.raises(SelectionError, match="disqualified"):
        select_best(cands[:1], [synth.coded(val_t, truth)], tiny, BackendConfig(), pool, opts, backend=backend)


def test_tie_break_prefers_smallest_members(tiny):
    pool = _pool(tiny, LAYOUT)
    cands = [CandidateSet(("rare", "t3", "t4"), ()), CandidateSet(("rare", "t0", "t1"), ())]
    val_t = synth.make_transcript("v1", 4, seed=52)
    truth = {i: "abcd"[i] for i in range(4)}
    labels = {c.code_id: c.label for c in tiny.codes}
    backend = MockBackend({"entries": [{"text": clean_response(val_t, truth, labels, range(4))}]})
    opts = RunOptions(seed=0, allow_sparse=True, model_profile=None)
    winner, _ = select_best(cands, [synth.coded(val_t, truth)], tiny, BackendConfig(), pool, opts, backend=backend)
    assert winner.members == ("rare", "t0", "t1")
