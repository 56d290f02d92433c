import csv
import io
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import cohen_kappa_score

import synth
from negcoder.evaluation import (
    Adjudication,
    EvaluationError,
    MismatchKey,
    cohens_kappa,
    compare,
    compare_many,
    estimate_true_accuracy,
    ingest_adjudications,
    kappa_stats,
    normalize_choice,
    read_adjudications,
    sample_mismatches,
)
from oracles import kappa_brute


def _expand(matrix, codes):
    return [(codes[i], codes[j]) for i, row in enumerate(matrix) for j, n in enumerate(row) for _ in range(n)]


def test_kappa_on_constructed_table():
    # 100 units, p_o = 73/100, marginals 40/30/20/10 on both sides so p_e = 0.30
    m = [
        [30, 5, 5, 0],
        [7, 23, 0, 0],
        [3, 1, 13, 3],
        [0, 1, 2, 7],
    ]
    assert [sum(r) for r in m] == [40, 30, 20, 10]
    assert [sum(r[j] for r in m) for j in range(4)] == [40, 30, 20, 10]
    pairs = _expand(m, "abcd")
    st_ = kappa_stats(pairs)
    assert st_.observed == pytest.approx(0.73, abs=1e-15)
    assert st_.expected == pytest.approx(0.30, abs=1e-15)
    assert st_.kappa == pytest.approx(0.43 / 0.70, abs=1e-12)
    assert st_.kappa == pytest.approx(cohen_kappa_score([h for h, _ in pairs], [m_ for _, m_ in pairs]), abs=1e-12)


def test_kappa_degenerate_cases():
    assert kappa_stats([("a", "a")] * 4).kappa == 1.0
    s = kappa_stats([("a", "a")] * 4)
    assert s.degenerate
    with pytest.raises(EvaluationError):
        cohens_kappa([])


@given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcd")), min_size=1, max_size=40))
def test_kappa_matches_sklearn_and_brute(pairs):
    brute = kappa_brute(pairs, "abcd")
    got = cohens_kappa(pairs)
    if brute is None:
        assert got == 1.0 or math.isnan(got)
        return
    assert got == pytest.approx(brute, abs=1e-12)
    ref = cohen_kappa_score([h for h, _ in pairs], [m for _, m in pairs], labels=list("abcd"))
    assert got == pytest.approx(ref, abs=1e-9)


def test_true_accuracy():
    assert round(estimate_true_accuracy(0.73, 0.68), 4) == 0.9136
    assert estimate_true_accuracy(1.0, 0.0) == 1.0
    assert estimate_true_accuracy(0.0, 0.5) == 0.5
    with pytest.raises(EvaluationError):
        estimate_true_accuracy(1.2, 0.5)


@pytest.fixture
def coded_pair(jackel):
    t = synth.make_transcript("e1", 12, seed=2)
    human = synth.code_cycle(t, jackel)
    assigned = [human[i] for i in range(12)]
    assigned[0] = None
    assigned[1] = None
    assigned[2] = "humor" if human[2] != "humor" else "other"
    assigned[3] = "humor" if human[3] != "humor" else "other"
    return t, human, synth.fake_result(t, assigned)


def test_strict_and_lenient_rates(jackel, coded_pair):
    t, human, result = coded_pair
    r = compare(result, synth.coded(t, human), jackel)
    assert (r.n_units, r.n_jointly_coded, r.n_model_unreported) == (12, 10, 2)
    assert r.strict_match_rate == 8 / 12
    assert r.lenient_match_rate == 8 / 10
    assert r.confusion.total == 10 and r.confusion.diagonal == 8
    assert sum(r.human_frequencies.values()) == 12
    doc = r.to_dict()
    assert doc["strict_match_rate"] == 0.6667 and doc["lenient_match_rate"] == 0.8


def test_partial_human_coverage(jackel, coded_pair):
    t, human, result = coded_pair
    units = [u for u in synth.coded(t, human).units if u.unit_index not in (5, 6)]
    r = compare(result, units, jackel)
    assert r.n_without_human == 2 and r.n_units == 10


def test_transcript_and_unit_mismatch_errors(jackel, coded_pair):
    t, human, result = coded_pair
    other = synth.make_transcript("e2", 12, seed=2)
    with pytest.raises(EvaluationError, match="transcript"):
        compare(result, synth.coded(other, synth.code_cycle(other, jackel)), jackel)
    changed = synth.make_transcript("e1", 12, seed=99)
    with pytest.raises(EvaluationError, match="differ"):
        compare(result, synth.coded(changed, synth.code_cycle(changed, jackel)), jackel)


def test_pooled_report(jackel, coded_pair):
    t, human, result = coded_pair
    t2 = synth.make_transcript("e2", 8, seed=4)
    h2 = synth.code_cycle(t2, jackel)
    r2 = synth.fake_result(t2, [h2[i] for i in range(8)])
    pooled = compare_many([(result, synth.coded(t, human)), (r2, synth.coded(t2, h2))], jackel)
    assert set(pooled.per_transcript) == {"e1", "e2"}
    assert pooled.pooled.n_units == 20
    assert pooled.pooled.lenient_match_rate == 16 / 18
    with pytest.raises(EvaluationError):
        compare_many([(result, synth.coded(t, human))] * 2, jackel)


def test_mismatch_export_and_key(jackel, coded_pair):
    t, human, result = coded_pair
    units = synth.coded(t, human).units
    export = sample_mismatches(result, units, jackel, k=5, seed=1)
    assert len(export.samples) == 2 and export.warnings
    rows = list(csv.DictReader(io.StringIO(export.to_csv())))
    assert list(rows[0]) == ["sample_id", "context_turn_1", "context_turn_2", "unit_text", "option_1", "option_2"]
    key = MismatchKey.from_json(export.key.to_json())
    assert key == export.key and key.lenient_match_rate == 0.8
    for row, entry in zip(rows, key.entries):
        model_label = jackel.label_of(entry.model_code)
        assert row[f"option_{entry.model_option}"] == model_label
        assert row[f"option_{3 - entry.model_option}"] == jackel.label_of(entry.human_code)


def test_mismatch_context_turns(jackel):
    t = synth.make_transcript("ctx", 30, seed=8)
    human = synth.code_cycle(t, jackel)
    assigned = [human[i] if i != 29 else ("humor" if human[i] != "humor" else "other") for i in range(30)]
    export = sample_mismatches(synth.fake_result(t, assigned), synth.coded(t, human).units, jackel)
    s = export.samples[0]
    unit = t.sentences[29]
    prior = [turn for turn in t.turns if turn.turn_index < unit.turn_index][-2:]
    assert (s.context_turn_1, s.context_turn_2) == tuple(f"{p.speaker}: {p.text}" for p in prior)
    assert s.unit_text == unit.text


def test_no_mismatches(jackel):
    t = synth.make_transcript("same", 5)
    human = synth.code_cycle(t, jackel)
    with pytest.raises(EvaluationError, match="no mismatches"):
        sample_mismatches(synth.fake_result(t, [human[i] for i in range(5)]), synth.coded(t, human).units, jackel)


def _key(jackel, coded_pair, k=2):
    t, human, result = coded_pair
    return sample_mismatches(result, synth.coded(t, human).units, jackel, k=k, seed=3).key


def test_ingest_unblinds_choices(jackel, coded_pair):
    key = _key(jackel, coded_pair)
    e1, e2 = key.entries
    adjs = [
        Adjudication(e1.sample_id, f"option_{e1.model_option}", "r1"),
        Adjudication(e2.sample_id, f"option_{3 - e2.model_option}", "r1"),
        Adjudication(e1.sample_id, "neither", "r2"),
    ]
    s = ingest_adjudications(adjs, key)
    assert s.n == 3
    assert s.agree_with_model_rate == pytest.approx(1 / 3)
    assert s.agree_with_human_rate == pytest.approx(1 / 3)
    assert s.implied_accuracy == pytest.approx(0.8 + 0.2 / 3)
    assert s.per_adjudicator["r1"].agree_with_model_rate == 0.5
    assert ingest_adjudications(adjs, key, match_rate=0.5).implied_accuracy == pytest.approx(0.5 + 0.5 / 3)


def test_ingest_duplicates_and_unknown(jackel, coded_pair):
    key = _key(jackel, coded_pair)
    e1 = key.entries[0]
    first = f"option_{3 - e1.model_option}"
    later = f"option_{e1.model_option}"
    s = ingest_adjudications([Adjudication(e1.sample_id, first, "r"), Adjudication(e1.sample_id, later, "r")], key)
    assert s.n == 1 and s.agree_with_model_rate == 1.0 and len(s.warnings) == 1
    with pytest.raises(EvaluationError, match="unknown sample_id"):
        ingest_adjudications([Adjudication("S9999", "option_1")], key)
    with pytest.raises(EvaluationError):
        ingest_adjudications([], key)


@pytest.mark.parametrize("raw,norm", [("Option 1", "option_1"), ("2", "option_2"), ("NEITHER", "neither")])
def test_normalize_choice(raw, norm):
    assert normalize_choice(raw) == norm


def test_bad_choice_and_csv(tmp_path):
    with pytest.raises(EvaluationError):
        normalize_choice("both")
    p = tmp_path / "a.csv"
    p.write_text("sample_id,chosen,adjudicator_id\nS0001,option_2,ann\n", encoding="utf-8")
    assert read_adjudications(p) == [Adjudication("S0001", "option_2", "ann")]
    p.write_text("id,choice\n", encoding="utf-8")
    with pytest.raises(EvaluationError):
        read_adjudications(p)


def test_mismatch_sampling_is_seeded(jackel):
    t = synth.make_transcript("seeded", 40, seed=1)
    human = synth.code_cycle(t, jackel)
    rng = random.Random(0)
    assigned = [rng.choice(jackel.code_ids) for _ in range(40)]
    result = synth.fake_result(t, assigned)
    a = sample_mismatches(result, synth.coded(t, human).units, jackel, k=10, seed=7)
    b = sample_mismatches(result, synth.coded(t, human).units, jackel, k=10, seed=7)
    assert a.to_csv() == b.to_csv() and a.key == b.key
