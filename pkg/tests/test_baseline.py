import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from peneo.baseline import (
    BIO_LABELS,
    ERROR_TYPES,
    LABEL_ID,
    PredictedEntity,
    SerReModel,
    bio_to_entities,
    build_bio_tags,
    evaluate_serre,
    gold_entities,
    gold_links,
    inject_ser_errors,
    is_perturbation_eligible,
    perturbation_sweep,
    prepare_serre,
    read_ser_predictions,
    repair_bio,
    sorted_token_order,
    train_serre,
    write_ser_predictions,
    xycut_sort,
)
from peneo.corpus import BBox, Line, SynthSpec, Vocab, generate_synthetic_corpus, tokenize
from peneo.evalkit import pair_f1
from peneo.model import ModelConfig
from peneo.numerics import grad_check
from peneo.training import TrainConfig, TrainingError


def line(i, x0, y0, x1, y1):
    return Line(i, f"w{i}", BBox(x0, y0, x1, y1))


def small_model(vocab, seed=0, c_e=8):
    return SerReModel(vocab, ModelConfig(c_e=c_e, layers=1, heads=2, coord_buckets=16, layout_init="random"), seed=seed)


# ---------------------------------------------------------------------------
# XY cut


def test_xycut_single_line():
    assert xycut_sort([line(7, 0, 0, 10, 10)]) == [7]


def test_xycut_stacked_reversed():
    assert xycut_sort([line(0, 0, 50, 10, 60), line(1, 0, 0, 10, 10)]) == [1, 0]


def test_xycut_two_columns():
    # rows overlap across columns, so no horizontal gap spans the page
    left = [line(i, 0, y, 40, y + 15) for i, y in enumerate((0, 20, 40))]
    right = [line(3 + i, 60, y, 100, y + 15) for i, y in enumerate((10, 30, 50))]
    mixed = [right[1], left[2], right[0], left[0], right[2], left[1]]
    assert xycut_sort(mixed) == [0, 1, 2, 3, 4, 5]


def test_xycut_single_column_is_y_then_x():
    lines = [line(0, 50, 20, 90, 30), line(1, 0, 20, 40, 30), line(2, 0, 0, 40, 10)]
    assert xycut_sort(lines) == [2, 1, 0]


def test_xycut_empty():
    with pytest.raises(ValueError):
        xycut_sort([])


boxes = st.lists(
    st.tuples(st.integers(0, 300), st.integers(0, 300), st.integers(1, 80), st.integers(1, 20)),
    min_size=1, max_size=15,
)


@given(boxes, st.randoms())
def test_xycut_permutation_and_idempotent(spec, rnd):
    lines = [line(i, x, y, x + w, y + h) for i, (x, y, w, h) in enumerate(spec)]
    order = xycut_sort(lines)
    assert sorted(order) == list(range(len(lines)))
    by_id = {ln.line_id: ln for ln in lines}
    assert xycut_sort([by_id[i] for i in order]) == order
    shuffled = list(lines)
    rnd.shuffle(shuffled)
    assert xycut_sort(shuffled) == order


# ---------------------------------------------------------------------------
# BIO tagging


def test_bio_adjacent_entity(mini, mini_tokens):
    order = xycut_sort(mini.lines)
    assert order == [0, 1, 2, 3, 4]
    tags = build_bio_tags(mini_tokens, mini, order)
    assert tags == ["B-question", "B-answer", "B-question", "B-answer", "I-answer", "I-answer"]


def test_bio_separated_entity(mini, mini_tokens):
    order = [0, 1, 3, 2, 4]
    tags = build_bio_tags(mini_tokens, mini, order)
    assert tags == ["B-question", "B-answer", "B-answer", "I-answer", "B-question", "B-answer"]


def test_bio_all_other(mini, mini_tokens):
    mini.entities = [dataclasses.replace(e, category="other") for e in mini.entities]
    assert build_bio_tags(mini_tokens, mini, [0, 1, 2, 3, 4]) == ["O"] * 6


def test_bio_decode_reproduces_entities(mini, mini_tokens):
    order = xycut_sort(mini.lines)
    tags = build_bio_tags(mini_tokens, mini, order)
    ents = bio_to_entities(tags, sorted_token_order(mini_tokens, order), mini_tokens)
    assert ents == gold_entities(mini_tokens, mini)
    assert [e.text for e in ents] == ["Name:", "Alice", "Address:", "12 Fox Road"]


def test_bio_decode_on_single_column_corpus():
    docs = generate_synthetic_corpus(SynthSpec(docs=40, two_column_frac=0.0), seed=3)
    vocab = Vocab.build(docs)
    for d in docs:
        t = tokenize(d, vocab)
        order = xycut_sort(d.lines)
        pos = {lid: i for i, lid in enumerate(order)}
        gold = [e for e in gold_entities(t, d) if e.category != "other"]
        adjacent = all(
            pos[b] == pos[a] + 1 for e in d.entities for a, b in zip(e.line_ids, e.line_ids[1:])
        )
        if not adjacent:
            continue
        ents = bio_to_entities(build_bio_tags(t, d, order), sorted_token_order(t, order), t)
        assert sorted(ents, key=lambda e: e.tokens) == sorted(gold, key=lambda e: e.tokens)


def test_repair_bio():
    assert repair_bio(["O", "I-answer", "I-answer", "I-question", "B-header"]) == [
        "O", "B-answer", "I-answer", "B-question", "B-header"]


@given(st.lists(st.sampled_from(BIO_LABELS), max_size=30))
def test_repaired_tags_are_valid(tags):
    fixed = repair_bio(tags)
    assert len(fixed) == len(tags)
    prev = "O"
    for t in fixed:
        if t.startswith("I-"):
            assert prev != "O" and prev[2:] == t[2:]
        prev = t
    assert repair_bio(fixed) == fixed


# ---------------------------------------------------------------------------
# inference


def test_ser_perfect_logits(mini, mini_vocab, mini_tokens, monkeypatch):
    model = small_model(mini_vocab)
    order_lines = xycut_sort(mini.lines)
    order = sorted_token_order(mini_tokens, order_lines)
    tags = build_bio_tags(mini_tokens, mini, order_lines)
    logits = np.zeros((6, len(BIO_LABELS)))
    for tok, tag in zip(order, tags):
        logits[tok, LABEL_ID[tag]] = 10
    monkeypatch.setattr(model, "ser_logits", lambda f: (logits, None))
    ents = model.ser_infer(model.features(mini_tokens), mini_tokens, order)
    assert ents == bio_to_entities(tags, order, mini_tokens)


def test_ser_all_o(mini_vocab, mini_tokens, monkeypatch):
    model = small_model(mini_vocab)
    logits = np.zeros((6, len(BIO_LABELS)))
    logits[:, 0] = 1
    monkeypatch.setattr(model, "ser_logits", lambda f: (logits, None))
    assert model.ser_infer(model.features(mini_tokens), mini_tokens, list(range(6))) == []


@given(st.integers(0, 10_000))
def test_ser_random_logits_give_valid_spans(seed):
    from peneo.fixtures import mini_form

    doc = mini_form()
    vocab = Vocab.build([doc])
    t = tokenize(doc, vocab)
    model = small_model(vocab, seed=seed % 7)
    order = list(np.random.default_rng(seed).permutation(6))
    ents = model.ser_infer(model.features(t), t, order)
    pos = {tok: i for i, tok in enumerate(order)}
    seen = set()
    for e in ents:
        assert e.category in ("header", "question", "answer")
        p = [pos[tok] for tok in e.tokens]
        assert p == list(range(p[0], p[0] + len(p)))
        assert not seen & set(e.tokens)
        seen |= set(e.tokens)


def test_re_zero_entities(mini_vocab, mini_tokens):
    model = small_model(mini_vocab)
    assert model.re_infer(model.features(mini_tokens), []) == []


def test_re_candidates_are_question_to_answer():
    cats = ["question", "answer", "header", "question", "answer", "other"]
    ents = [PredictedEntity(c, (i,), c) for i, c in enumerate(cats)]
    cands = SerReModel.candidates(ents)
    assert cands == [(0, 1), (0, 4), (3, 1), (3, 4)]
    assert all(ents[i].category == "question" and ents[j].category == "answer" for i, j in cands)


def test_re_perfect_margin(mini, mini_vocab, mini_tokens, monkeypatch):
    model = small_model(mini_vocab)
    ents = gold_entities(mini_tokens, mini)
    links = gold_links(mini_tokens, mini, ents)
    assert links == {(0, 1), (2, 3)}

    def fake(f, entities, cands):
        return np.array([[-5.0, 5.0] if c in links else [5.0, -5.0] for c in cands]), None

    monkeypatch.setattr(model, "re_logits", fake)
    out = model.re_infer(model.features(mini_tokens), ents)
    assert [(k.text, v.text) for k, v in out] == mini.gold_pairs()


def test_serre_gradient(mini, mini_vocab):
    model = small_model(mini_vocab, seed=1)
    ex = prepare_serre([mini], model)[0]

    def fn():
        s, r = model.loss_backward(ex.inputs, ex.tags, ex.order, ex.entities, ex.links)
        return s + r

    assert grad_check(fn, list(model.store), max_coords_per_param=4) < 1e-4


# ---------------------------------------------------------------------------
# error injection


def test_injection_p0_identity(mini, mini_tokens):
    ents = gold_entities(mini_tokens, mini)
    for et in ERROR_TYPES:
        assert inject_ser_errors(ents, et, 0.0, seed=1) == ents


def test_fn_p1_zeroes_pair_f1(mini, mini_vocab, mini_tokens):
    ents = gold_entities(mini_tokens, mini)
    out = inject_ser_errors(ents, "FN", 1.0, seed=0)
    assert [e.category for e in out] == ["other"] * 4
    model = small_model(mini_vocab)
    pred = [(k.text, v.text) for k, v in model.re_infer(model.features(mini_tokens), out)]
    assert pair_f1(pred, mini.gold_pairs()).f1 == 0.0


@pytest.mark.parametrize("et", ERROR_TYPES)
def test_injection_rate(et):
    cat = "other" if et == "FP" else "question"
    ents = [PredictedEntity(cat, (2 * i, 2 * i + 1), "a b") for i in range(10_000)]
    out = inject_ser_errors(ents, et, 0.3, seed=9)
    changed = len(out) - len(ents) if et == "EF" else sum(a != b for a, b in zip(ents, out))
    assert abs(changed / len(ents) - 0.3) <= 0.02


def test_injection_semantics():
    ents = [PredictedEntity("question", (0, 1, 2), "a b c"), PredictedEntity("answer", (3,), "d"),
            PredictedEntity("other", (4,), "e"), PredictedEntity("header", (5, 6), "f g")]
    ce = inject_ser_errors(ents, "CE", 1.0, 0)
    assert [e.category for e in ce] == ["answer", "question", "other", "header"]
    fp = inject_ser_errors(ents, "FP", 1.0, 0)
    assert fp[2].category in ("question", "answer") and fp[:2] == ents[:2] and fp[3] == ents[3]
    ef = inject_ser_errors(ents, "EF", 1.0, 0)
    head, tail = ef[0], ef[1]
    assert head.category == "question" and tail.category != "question"
    assert head.tokens + tail.tokens == (0, 1, 2) and head.tokens and tail.tokens
    assert f"{head.text} {tail.text}" == "a b c"
    assert ef[2:] == ents[1:]
    assert [is_perturbation_eligible(e, "EF") for e in ents] == [True, False, False, False]


@given(st.sampled_from(ERROR_TYPES), st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
def test_injection_deterministic_and_nested(et, seed, p1, p2):
    docs = generate_synthetic_corpus(SynthSpec(docs=1), seed=seed)
    t = tokenize(docs[0], Vocab.build(docs))
    ents = gold_entities(t, docs[0])
    lo, hi = sorted((p1, p2))
    a = inject_ser_errors(ents, et, lo, seed)
    assert a == inject_ser_errors(ents, et, lo, seed)
    b = inject_ser_errors(ents, et, hi, seed)
    changed = lambda out: {e for e in out if e not in ents}
    assert changed(a) <= changed(b)


def test_injection_errors():
    with pytest.raises(ValueError):
        inject_ser_errors([], "XX", 0.1, 0)
    with pytest.raises(ValueError):
        inject_ser_errors([], "FN", 1.5, 0)


# ---------------------------------------------------------------------------
# I/O and training


def test_ser_predictions_round_trip(tmp_path, mini, mini_tokens):
    ents = gold_entities(mini_tokens, mini)
    path = tmp_path / "ser.json"
    write_ser_predictions(path, [("mini-form", ents), ("other-doc", [])])
    back = read_ser_predictions(path, {"mini-form": mini_tokens})
    assert back == {"mini-form": ents}


def test_train_and_save_load(tmp_path):
    docs = generate_synthetic_corpus(SynthSpec(docs=8), seed=0)
    vocab = Vocab.build(docs)
    cfg = TrainConfig(epochs=3, eval_every=1, lr_encoder=3e-3, lr_decoder=3e-3)
    logs = []
    for _ in range(2):
        model = small_model(vocab, c_e=16)
        logs.append(train_serre(model, docs[:6], docs[6:], cfg))
    assert logs[0] == logs[1]
    assert set(logs[0][-1]) == {"epoch", "ser_loss", "re_loss", "valid_pair_f1"}
    path = tmp_path / "m.pene"
    model.save(path)
    again = SerReModel.load(path)
    ex = prepare_serre(docs[6:], model)
    np.testing.assert_array_equal(model.features(ex[0].inputs), again.features(ex[0].inputs))
    assert evaluate_serre(model, ex) == evaluate_serre(again, ex)


def test_train_empty():
    with pytest.raises(TrainingError):
        train_serre(small_model(Vocab.build([])), [])


def test_gold_ser_override_and_sweep(mini, mini_vocab):
    model = small_model(mini_vocab)
    ex = prepare_serre([mini], model)
    gold = evaluate_serre(model, ex, entity_override={"mini-form": ex[0].entities})
    rows = perturbation_sweep(model, ex, ps=(0.0, 0.5))
    assert len(rows) == 8
    for r in rows:
        if r["p"] == 0.0:
            assert r["f1"] == gold["pair"].f1
