import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from peneo.corpus import SynthSpec, Vocab, generate_synthetic_corpus
from peneo.decoder import targets_as_scores
from peneo.evalkit import (
    PairF1Report,
    build_report,
    config_hash,
    gt_substitution_eval,
    pair_f1,
    run_report,
    subtask_f1,
    substitute_gold,
    sum_reports,
    write_report,
)
from peneo.model import ModelConfig, PEneoModel
from peneo.training import evaluate, prepare

GOLD = [("Name:", "Alice"), ("Address:", "12 Fox Road")]

pair_lists = st.lists(st.tuples(st.sampled_from("abc"), st.sampled_from("xyz")), max_size=8)


def test_identical_lists():
    r = pair_f1(GOLD, list(GOLD))
    assert (r.precision, r.recall, r.f1, r.true_positives) == (1.0, 1.0, 1.0, 2)


def test_half_credit_example():
    r = pair_f1([("Name:", "Alice"), ("Address:", "12 Fox")], GOLD)
    assert (r.true_positives, r.precision, r.recall, r.f1) == (1, 0.5, 0.5, 0.5)


def test_empty_prediction():
    r = pair_f1([], GOLD)
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)


def test_both_empty():
    r = pair_f1([], [])
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_empty_gold():
    r = pair_f1(GOLD, [])
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)


def test_duplicates_counted():
    r = pair_f1([("a", "b")], [("a", "b"), ("a", "b")])
    assert (r.true_positives, r.recall) == (1, 0.5)
    assert pair_f1([("a", "b")] * 3, [("a", "b")]).true_positives == 1


def test_no_string_normalisation():
    assert pair_f1([("Name:", "alice")], [("Name:", "Alice")]).f1 == 0
    assert pair_f1([("Name: ", "Alice")], [("Name:", "Alice")]).f1 == 0


@given(pair_lists, pair_lists, st.randoms())
def test_permutation_symmetry(pred, gold, rnd):
    a = pair_f1(pred, gold)
    p2, g2 = list(pred), list(gold)
    rnd.shuffle(p2)
    rnd.shuffle(g2)
    assert pair_f1(p2, g2) == a
    assert a.true_positives <= min(len(pred), len(gold))


@given(pair_lists)
def test_self_match(x):
    assert pair_f1(x, x).f1 == 1.0


@given(pair_lists, pair_lists)
def test_adding_non_match_lowers_precision(pred, gold):
    a = pair_f1(pred, gold)
    b = pair_f1(pred + [("nomatch", "nomatch")], gold)
    assert b.true_positives == a.true_positives
    if pred:
        assert b.precision < a.precision or a.precision == 0 == b.precision
    else:
        assert b.precision == 0


@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
def test_f1_formula(tp, extra_p, extra_g):
    r = PairF1Report.from_counts(tp, tp + extra_p, tp + extra_g)
    if r.precision + r.recall:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))


def test_sum_reports_is_micro_average():
    r = sum_reports([PairF1Report.from_counts(1, 2, 2), PairF1Report.from_counts(3, 3, 4)])
    assert (r.true_positives, r.num_predicted, r.num_gold) == (4, 5, 6)
    assert r == PairF1Report.from_counts(1, 2, 2) + PairF1Report.from_counts(3, 3, 4)


# ---------------------------------------------------------------------------
# sub-task F1


def test_subtask_identical(mini_targets):
    for head in ("le", "lg", "el"):
        assert subtask_f1(mini_targets, mini_targets, head).f1 == 1.0


def test_subtask_all_zero_prediction(mini_targets):
    zero = {k: np.zeros_like(v) for k, v in mini_targets.items()}
    assert subtask_f1(zero, mini_targets, "le").f1 == 0.0


def test_subtask_one_of_three():
    gold = {"le": np.zeros((4, 4), np.uint8)}
    gold["le"][0, 0] = gold["le"][1, 2] = gold["le"][3, 3] = 1
    pred = {"le": np.zeros((4, 4), np.uint8)}
    pred["le"][1, 2] = 1
    r = subtask_f1(pred, gold, "le")
    assert r.precision == 1.0
    assert r.recall == pytest.approx(1 / 3)
    assert r.f1 == pytest.approx(0.5)


def test_line_grouping_pools_heads(mini_targets):
    pred = dict(mini_targets)
    pred["lgt"] = np.zeros_like(mini_targets["lgt"])
    r = subtask_f1(pred, mini_targets, "lg")
    assert (r.true_positives, r.num_predicted, r.num_gold) == (1, 1, 2)


def test_subtask_shape_mismatch(mini_targets):
    with pytest.raises(ValueError):
        subtask_f1({"le": np.zeros((2, 2))}, mini_targets, "le")


# ---------------------------------------------------------------------------
# ground-truth substitution


def test_substitute_both_on_gold(mini_tokens, mini_targets, mini):
    zero = {k: np.zeros_like(v) for k, v in mini_targets.items()}
    scores = targets_as_scores(zero)
    # linking matrices are gold, extraction and grouping come from substitution
    for k in ("elh", "elt"):
        zero[k] = mini_targets[k]
        scores[k] = targets_as_scores(mini_targets)[k]
    assert gt_substitution_eval(mini_tokens, zero, scores, mini_targets, mini.gold_pairs()).f1 == 0.0
    assert gt_substitution_eval(mini_tokens, zero, scores, mini_targets, mini.gold_pairs(), ("le", "lg")).f1 == 1.0
    # line extraction alone recovers the single-line pair
    r = gt_substitution_eval(mini_tokens, zero, scores, mini_targets, mini.gold_pairs(), ("le",))
    assert r.true_positives == 1


def test_substitute_only_touches_selected(mini_targets):
    zero = {k: np.zeros_like(v) for k, v in mini_targets.items()}
    m, s = substitute_gold(zero, targets_as_scores(zero), mini_targets, ("lg",))
    assert m["lgh"] is mini_targets["lgh"] and m["lgt"] is mini_targets["lgt"]
    for k in ("le", "elh", "elt"):
        assert not m[k].any()


def test_substitute_none_matches_standard_eval(mini, mini_vocab):
    model = PEneoModel(mini_vocab, ModelConfig(c_e=16), seed=3)
    examples = prepare([mini], model)
    ex = examples[0]
    matrices, scores = model.predict(ex.inputs)
    r = gt_substitution_eval(ex.tokens, matrices, scores, ex.targets, ex.gold_pairs)
    assert r == evaluate(model, examples)["pair"]


# ---------------------------------------------------------------------------
# reports


def test_gold_mode_report_is_perfect():
    docs = generate_synthetic_corpus(SynthSpec(docs=40), seed=4)
    report = run_report({"a": 1}, 4, docs)
    assert report["aggregate"]["pair_f1"] == 1.0
    assert report["aggregate"]["documents"] == 40
    assert report["seed"] == 4 and report["config_hash"] == config_hash({"a": 1})


def test_report_totals_equal_per_doc_sums():
    docs = generate_synthetic_corpus(SynthSpec(docs=10), seed=1)
    model = PEneoModel(Vocab.build(docs), ModelConfig(c_e=16), seed=0)
    report = run_report({}, 0, docs, model=model)
    agg = report["aggregate"]
    for k in ("pair", "le", "lg"):
        for field in ("true_positives", "num_predicted", "num_gold"):
            assert agg[k][field] == sum(d[k][field] for d in report["per_doc"])
    assert [d["doc_id"] for d in report["per_doc"]] == [d.doc_id for d in docs]


def test_report_deterministic(tmp_path):
    docs = generate_synthetic_corpus(SynthSpec(docs=10), seed=1)
    model = PEneoModel(Vocab.build(docs), ModelConfig(c_e=16), seed=0)
    blobs = []
    for i, threads in enumerate((1, 3)):
        path = tmp_path / f"r{i}.json"
        write_report(path, run_report({"x": 1}, 0, docs, model=model, threads=threads))
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]
    assert set(json.loads(blobs[0])) == {"aggregate", "per_doc", "config_hash", "seed"}


def test_build_report_empty():
    report = build_report([], {}, 0)
    assert report["aggregate"]["pair_f1"] == 1.0 and report["aggregate"]["documents"] == 0


def test_config_hash_key_order():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
