"""Serial SER+RE baseline.

Lines are put in reading order with a recursive XY cut, entities are tagged
with BIO labels over the sorted token sequence, a token classifier predicts
the tags and an entity-pair classifier links question entities to answer
entities. Both heads sit on one toy encoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import BBox, Document, Line, TokenizedDoc, Vocab, tokenize
from .encoder import Encoder, EncoderConfig
from .evalkit import PairF1Report, pair_f1, sum_reports
from .model import ModelConfig
from .numerics import (
    OptimizerConfig,
    ParamStore,
    adamw_step,
    clip_grad_norm,
    linear_backward,
    linear_forward,
    load_tensors,
    make_rng,
    relu,
    save_tensors,
    softmax_ce_weighted,
)
from .training import TrainConfig, TrainingError

SER_CATEGORIES = ("header", "question", "answer")
BIO_LABELS = ("O",) + tuple(f"{p}-{c}" for c in SER_CATEGORIES for p in ("B", "I"))
LABEL_ID = {t: i for i, t in enumerate(BIO_LABELS)}
ERROR_TYPES = ("FN", "FP", "CE", "EF")


# ---------------------------------------------------------------------------
# XY cut


def _split(items: list[tuple[int, BBox]], axis: str) -> list[list[tuple[int, BBox]]]:
    lo = (lambda b: b.y0) if axis == "y" else (lambda b: b.x0)
    hi = (lambda b: b.y1) if axis == "y" else (lambda b: b.x1)
    ordered = sorted(items, key=lambda it: (lo(it[1]), hi(it[1]), it[0]))
    groups = [[ordered[0]]]
    end = hi(ordered[0][1])
    for it in ordered[1:]:
        if lo(it[1]) >= end:
            groups.append([it])
        else:
            groups[-1].append(it)
        end = max(end, hi(it[1]))
    return groups


def _xycut(items: list[tuple[int, BBox]], prefer_y: bool) -> list[int]:
    if len(items) == 1:
        return [items[0][0]]
    for axis in ("y", "x") if prefer_y else ("x", "y"):
        groups = _split(items, axis)
        if len(groups) > 1:
            return [i for g in groups for i in _xycut(g, prefer_y=axis == "x")]
    return [i for i, _ in sorted(items, key=lambda it: (it[1].yc, it[1].x0, it[0]))]


def xycut_sort(lines: Sequence[Line]) -> list[int]:
    """Reading order of ``lines`` as a list of line ids.

    Plain recursive XY cut: any clean gap (zero threshold) splits, horizontal
    cuts are tried first and the preferred direction alternates with depth.
    Unsplittable groups are ordered by y-centre then left edge.
    """
    if not lines:
        raise ValueError("no lines to sort")
    return _xycut([(ln.line_id, ln.bbox) for ln in lines], prefer_y=True)


def sorted_token_order(doc: TokenizedDoc, line_order: Sequence[int]) -> list[int]:
    order = []
    for lid in line_order:
        if lid in doc.line_spans:
            a, b = doc.line_spans[lid]
            order.extend(range(a, b + 1))
    return order


# ---------------------------------------------------------------------------
# BIO tagging


def build_bio_tags(doc: TokenizedDoc, ann: Document, line_order: Sequence[int]) -> list[str]:
    """BIO tags over the sorted token sequence.

    Runs of an entity's lines that are consecutive in both the sort and the
    entity's own line order form one B/I unit; every other line opens a new
    unit. Lines of ``other`` entities (and unannotated lines) are ``O``.
    """
    pos = {lid: i for i, lid in enumerate(line_order)}
    line_tags: dict[int, list[str]] = {}
    for e in ann.entities:
        lids = [lid for lid in e.line_ids if lid in doc.line_spans]
        for k, lid in enumerate(lids):
            n = doc.line_spans[lid][1] - doc.line_spans[lid][0] + 1
            if e.category not in SER_CATEGORIES:
                line_tags[lid] = ["O"] * n
                continue
            continues = k > 0 and pos.get(lid) is not None and pos.get(lids[k - 1]) == pos[lid] - 1
            first = f"I-{e.category}" if continues else f"B-{e.category}"
            line_tags[lid] = [first] + [f"I-{e.category}"] * (n - 1)
    tags = []
    for lid in line_order:
        if lid not in doc.line_spans:
            continue
        a, b = doc.line_spans[lid]
        tags.extend(line_tags.get(lid, ["O"] * (b - a + 1)))
    return tags


def repair_bio(tags: Sequence[str]) -> list[str]:
    """Orphan ``I-x`` (after ``O`` or another category) becomes ``B-x``."""
    out = []
    prev_cat = None
    for t in tags:
        if t.startswith("I-") and t[2:] != prev_cat:
            t = "B-" + t[2:]
        out.append(t)
        prev_cat = None if t == "O" else t[2:]
    return out


@dataclass(frozen=True)
class PredictedEntity:
    category: str
    tokens: tuple[int, ...]
    text: str


def bio_to_entities(tags: Sequence[str], token_order: Sequence[int], doc: TokenizedDoc) -> list[PredictedEntity]:
    """Entities from (repaired) tags aligned with ``token_order``."""
    out = []
    cur_cat, cur = None, []

    def close():
        if cur:
            out.append(PredictedEntity(cur_cat, tuple(cur), " ".join(doc.tokens[t].surface for t in cur)))

    for tag, tok in zip(repair_bio(tags), token_order):
        if tag == "O":
            close()
            cur_cat, cur = None, []
        elif tag.startswith("B-"):
            close()
            cur_cat, cur = tag[2:], [tok]
        else:
            cur.append(tok)
    close()
    return out


def gold_entities(doc: TokenizedDoc, ann: Document) -> list[PredictedEntity]:
    """Entity-level ground truth (all categories), tokens in entity line order."""
    out = []
    for e in ann.entities:
        toks = []
        for lid in e.line_ids:
            if lid in doc.line_spans:
                a, b = doc.line_spans[lid]
                toks.extend(range(a, b + 1))
        if toks:
            out.append(PredictedEntity(e.category, tuple(toks), " ".join(doc.tokens[t].surface for t in toks)))
    return out


def gold_links(doc: TokenizedDoc, ann: Document, entities: Sequence[PredictedEntity]) -> set[tuple[int, int]]:
    """Links as index pairs into ``gold_entities`` output."""
    index = {}
    kept = 0
    for e in ann.entities:
        if any(lid in doc.line_spans for lid in e.line_ids):
            index[e.entity_id] = kept
            kept += 1
    return {(index[k], index[v]) for k, v in ann.links if k in index and v in index}


# ---------------------------------------------------------------------------
# error injection


def inject_ser_errors(entities: Sequence[PredictedEntity], error_type: str, p: float, seed: int) -> list[PredictedEntity]:
    """Perturb SER ground truth with one error type at rate ``p``.

    Each entity draws the same three uniforms whatever ``p`` is, so the
    perturbed set at a larger ``p`` contains the one at a smaller ``p``.
    """
    if error_type not in ERROR_TYPES:
        raise ValueError(f"unknown error type {error_type!r}")
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    rng = make_rng(seed)
    out = []
    for e in entities:
        u, c1, c2 = rng.random(3)
        hit = u < p
        kv = e.category in ("question", "answer")
        if error_type == "FN" and hit and kv:
            out.append(PredictedEntity("other", e.tokens, e.text))
        elif error_type == "FP" and hit and e.category == "other":
            out.append(PredictedEntity("question" if c1 < 0.5 else "answer", e.tokens, e.text))
        elif error_type == "CE" and hit and kv:
            out.append(PredictedEntity("answer" if e.category == "question" else "question", e.tokens, e.text))
        elif error_type == "EF" and hit and kv and len(e.tokens) >= 2:
            k = 1 + int(c1 * (len(e.tokens) - 1))
            words = e.text.split(" ")
            others = [c for c in ("header", "question", "answer", "other") if c != e.category]
            out.append(PredictedEntity(e.category, e.tokens[:k], " ".join(words[:k])))
            out.append(PredictedEntity(others[int(c2 * len(others))], e.tokens[k:], " ".join(words[k:])))
        else:
            out.append(e)
    return out


def is_perturbation_eligible(e: PredictedEntity, error_type: str) -> bool:
    kv = e.category in ("question", "answer")
    return {
        "FN": kv,
        "FP": e.category == "other",
        "CE": kv,
        "EF": kv and len(e.tokens) >= 2,
    }[error_type]


# ---------------------------------------------------------------------------
# model


class SerReModel:
    """Toy encoder with a 7-way token tagging head and a pair-link head."""

    def __init__(self, vocab: Vocab, cfg: ModelConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or ModelConfig()
        rng = make_rng(seed)
        self.store = ParamStore()
        c = self.cfg.c_e
        self.encoder = Encoder(
            EncoderConfig(len(vocab), c, self.cfg.layers, self.cfg.heads, self.cfg.coord_buckets,
                          self.cfg.ffn_mult, self.cfg.layout_init),
            self.store, rng,
        )
        n_lab = len(BIO_LABELS)
        self.store.add("ser/W1", rng.normal(0, math.sqrt(2 / c), (c, c)))
        self.store.add("ser/b1", np.zeros(c))
        self.store.add("ser/W2", rng.normal(0, 1 / math.sqrt(c), (n_lab, c)))
        self.store.add("ser/b2", np.zeros(n_lab))
        d_in = 2 * c + 2 * len(SER_CATEGORIES)
        self.store.add("re/W1", rng.normal(0, math.sqrt(2 / d_in), (c, d_in)))
        self.store.add("re/b1", np.zeros(c))
        self.store.add("re/W2", rng.normal(0, 1 / math.sqrt(c), (2, c)))
        self.store.add("re/b2", np.zeros(2))

    def _v(self, name):
        return self.store[name].value

    # -- SER -------------------------------------------------------------

    def ser_logits(self, f: np.ndarray):
        pre = linear_forward(f, self._v("ser/W1"), self._v("ser/b1"))
        hid = relu(pre)
        return linear_forward(hid, self._v("ser/W2"), self._v("ser/b2")), (f, pre, hid)

    def ser_backward(self, dlogits, cache) -> np.ndarray:
        f, pre, hid = cache
        dhid, dw2, db2 = linear_backward(dlogits, hid, self._v("ser/W2"))
        self.store["ser/W2"].grad[...] += dw2
        self.store["ser/b2"].grad[...] += db2
        dpre = dhid * (pre > 0)
        df, dw1, db1 = linear_backward(dpre, f, self._v("ser/W1"))
        self.store["ser/W1"].grad[...] += dw1
        self.store["ser/b1"].grad[...] += db1
        return df

    # -- RE --------------------------------------------------------------

    @staticmethod
    def candidates(entities: Sequence[PredictedEntity]) -> list[tuple[int, int]]:
        return [
            (i, j)
            for i, a in enumerate(entities) if a.category == "question"
            for j, b in enumerate(entities) if b.category == "answer"
        ]

    @staticmethod
    def _onehot(cat: str) -> np.ndarray:
        v = np.zeros(len(SER_CATEGORIES))
        if cat in SER_CATEGORIES:
            v[SER_CATEGORIES.index(cat)] = 1
        return v

    def re_logits(self, f: np.ndarray, entities: Sequence[PredictedEntity], cands: Sequence[tuple[int, int]]):
        c = f.shape[1]
        if not cands:
            return np.zeros((0, 2), dtype=f.dtype), None
        ki = np.array([entities[i].tokens[0] for i, _ in cands])
        vi = np.array([entities[j].tokens[0] for _, j in cands])
        cats = np.stack([np.concatenate([self._onehot(entities[i].category), self._onehot(entities[j].category)])
                         for i, j in cands]).astype(f.dtype)
        x = np.concatenate([f[ki], f[vi], cats], axis=1)
        pre = linear_forward(x, self._v("re/W1"), self._v("re/b1"))
        hid = relu(pre)
        return linear_forward(hid, self._v("re/W2"), self._v("re/b2")), (x, pre, hid, ki, vi, c)

    def re_backward(self, dlogits, cache, n_tokens: int) -> np.ndarray:
        x, pre, hid, ki, vi, c = cache
        dhid, dw2, db2 = linear_backward(dlogits, hid, self._v("re/W2"))
        self.store["re/W2"].grad[...] += dw2
        self.store["re/b2"].grad[...] += db2
        dpre = dhid * (pre > 0)
        dx, dw1, db1 = linear_backward(dpre, x, self._v("re/W1"))
        self.store["re/W1"].grad[...] += dw1
        self.store["re/b1"].grad[...] += db1
        df = np.zeros((n_tokens, c), dtype=dx.dtype)
        np.add.at(df, ki, dx[:, :c])
        np.add.at(df, vi, dx[:, c : 2 * c])
        return df

    # -- joint loss ------------------------------------------------------

    def loss_backward(self, inputs: dict, tags: Sequence[str], token_order: Sequence[int],
                      entities: Sequence[PredictedEntity], links: set[tuple[int, int]],
                      re_weights=(1.0, 10.0), scale: float = 1.0) -> tuple[float, float]:
        f, ecache = self.encoder.forward(inputs)
        n = f.shape[0]
        labels = np.zeros(n, dtype=np.int64)
        labels[list(token_order)] = [LABEL_ID[t] for t in tags]
        s_logits, s_cache = self.ser_logits(f)
        s_loss, ds = softmax_ce_weighted(s_logits, labels, np.ones(len(BIO_LABELS)))
        df = self.ser_backward(ds * scale, s_cache)
        cands = self.candidates(entities)
        r_loss = 0.0
        if cands:
            r_logits, r_cache = self.re_logits(f, entities, cands)
            target = np.array([1 if c in links else 0 for c in cands])
            r_loss, dr = softmax_ce_weighted(r_logits, target, re_weights)
            df = df + self.re_backward(dr * scale, r_cache, n)
        self.encoder.backward(df, ecache)
        return s_loss, r_loss

    # -- inference -------------------------------------------------------

    def features(self, doc: TokenizedDoc | dict) -> np.ndarray:
        return self.encoder.forward(doc)[0]

    def ser_infer(self, f: np.ndarray, doc: TokenizedDoc, token_order: Sequence[int]) -> list[PredictedEntity]:
        """Greedy per-token tagging along ``token_order`` then BIO assembly."""
        logits, _ = self.ser_logits(f)
        tags = [BIO_LABELS[int(i)] for i in logits[list(token_order)].argmax(axis=1)]
        return bio_to_entities(tags, token_order, doc)

    def re_infer(self, f: np.ndarray, entities: Sequence[PredictedEntity]) -> list[tuple[PredictedEntity, PredictedEntity]]:
        cands = self.candidates(entities)
        if not cands:
            return []
        logits, _ = self.re_logits(f, entities, cands)
        keep = logits[:, 1] > logits[:, 0]
        return [(entities[i], entities[j]) for (i, j), k in zip(cands, keep) if k]

    def extract(self, doc: TokenizedDoc, ann_lines: Sequence[Line], inputs: dict | None = None,
                entities: Sequence[PredictedEntity] | None = None) -> list[tuple[str, str]]:
        """Full SER -> RE pair extraction; ``entities`` overrides the SER step."""
        f = self.features(inputs if inputs is not None else doc)
        if entities is None:
            order = sorted_token_order(doc, xycut_sort([ln for ln in ann_lines if ln.line_id in doc.line_spans]))
            entities = self.ser_infer(f, doc, order)
        return [(k.text, v.text) for k, v in self.re_infer(f, entities)]

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_tensors(path, self.store.state_dict())
        meta = {"kind": "serre", "model": asdict(self.cfg), "vocab": self.vocab.words}
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SerReModel":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        model = cls(Vocab(meta["vocab"]), ModelConfig(**meta["model"]))
        model.store.load_state_dict(load_tensors(path))
        return model


def write_ser_predictions(path: str | Path, records: Sequence[tuple[str, Sequence[PredictedEntity]]]) -> None:
    data = [
        {"doc_id": doc_id, "entities": [{"category": e.category, "token_indices": list(e.tokens)} for e in ents]}
        for doc_id, ents in records
    ]
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


def read_ser_predictions(path: str | Path, docs: dict[str, TokenizedDoc]) -> dict[str, list[PredictedEntity]]:
    """Import externally produced SER output; texts are rebuilt from the tokens."""
    out = {}
    for rec in json.loads(Path(path).read_text(encoding="utf-8")):
        doc = docs.get(rec["doc_id"])
        if doc is None:
            continue
        out[rec["doc_id"]] = [
            PredictedEntity(e["category"], tuple(e["token_indices"]),
                            " ".join(doc.tokens[t].surface for t in e["token_indices"]))
            for e in rec["entities"] if e["token_indices"]
        ]
    return out


# ---------------------------------------------------------------------------
# training / evaluation


@dataclass
class SerReExample:
    doc: Document
    tokens: TokenizedDoc
    inputs: dict
    order: list[int]
    tags: list[str]
    entities: list[PredictedEntity]
    links: set[tuple[int, int]]

    @property
    def gold_pairs(self) -> list[tuple[str, str]]:
        return [(self.entities[k].text, self.entities[v].text) for k, v in sorted(self.links)]


def prepare_serre(docs: Sequence[Document], model: SerReModel, n_max: int = 512) -> list[SerReExample]:
    out = []
    for d in docs:
        t = tokenize(d, model.vocab, n_max)
        order_lines = xycut_sort([ln for ln in d.lines if ln.line_id in t.line_spans])
        order = sorted_token_order(t, order_lines)
        ents = gold_entities(t, d)
        out.append(SerReExample(d, t, model.encoder.inputs(t), order, build_bio_tags(t, d, order_lines),
                                ents, gold_links(t, d, ents)))
    return out


def train_serre(model: SerReModel, train_docs: Sequence[Document], valid_docs: Sequence[Document] = (),
                cfg=None, on_epoch=None) -> list[dict]:
    """Joint SER + RE training with the same optimiser setup as the PEneo loop."""
    cfg = cfg or TrainConfig()
    if not train_docs:
        raise TrainingError("empty training set")
    rng = make_rng(cfg.seed)
    train = prepare_serre(train_docs, model, cfg.n_max)
    valid = prepare_serre(valid_docs, model, cfg.n_max) if valid_docs else []
    steps = max(1, -(-len(train) // cfg.batch_size) * cfg.epochs)
    opt = {
        "enc/": OptimizerConfig(cfg.lr_encoder, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay, cfg.warmup_ratio, steps),
        "ser/": OptimizerConfig(cfg.lr_decoder, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay, cfg.warmup_ratio, steps),
        "re/": OptimizerConfig(cfg.lr_decoder, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay, cfg.warmup_ratio, steps),
    }
    groups = {p: model.store.select(p) for p in opt}
    model.store.zero_grad()
    log, best_f1, best_state = [], -1.0, None
    re_weights = cfg.loss.class_weights
    for epoch in range(1, cfg.epochs + 1):
        s_tot = r_tot = 0.0
        order = rng.permutation(len(train))
        for i in range(0, len(train), cfg.batch_size):
            batch = order[i : i + cfg.batch_size]
            for j in batch:
                ex = train[j]
                inputs = ex.inputs
                if cfg.augment_shift:
                    shift = tuple(rng.uniform(-cfg.augment_shift, cfg.augment_shift, 2))
                    inputs = model.encoder.inputs(ex.tokens, shift)
                s, r = model.loss_backward(inputs, ex.tags, ex.order, ex.entities, ex.links, re_weights,
                                           scale=1.0 / len(batch))
                s_tot += s
                r_tot += r
            if cfg.grad_clip:
                clip_grad_norm(model.store, cfg.grad_clip)
            for p, params in groups.items():
                adamw_step(params, opt[p])
        entry = {"epoch": epoch, "ser_loss": s_tot / len(train), "re_loss": r_tot / len(train)}
        if valid and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            f1 = evaluate_serre(model, valid)["pair"].f1
            entry["valid_pair_f1"] = f1
            if f1 > best_f1:
                best_f1, best_state = f1, model.store.copy_values()
        log.append(entry)
        if on_epoch:
            on_epoch(entry)
    if best_state is not None:
        model.store.load_state_dict(best_state)
    return log


def evaluate_serre(model: SerReModel, examples: Sequence[SerReExample], per_doc: list | None = None,
                   entity_override: dict | None = None) -> dict:
    """Pair F1 of the serial pipeline plus SER entity F1.

    ``entity_override`` maps doc ids to entity lists used in place of the
    SER prediction (gold or perturbed SER).
    """
    pair, ser = [], []
    for ex in examples:
        f = model.features(ex.inputs)
        if entity_override is not None:
            ents = entity_override[ex.doc.doc_id]
        else:
            ents = model.ser_infer(f, ex.tokens, ex.order)
        gold_units = bio_to_entities(ex.tags, ex.order, ex.tokens)
        key = lambda e: (e.category, e.tokens)
        pc, gc = {key(e) for e in ents}, {key(e) for e in gold_units}
        ser.append(PairF1Report.from_counts(len(pc & gc), len(pc), len(gc)))
        pred = [(k.text, v.text) for k, v in model.re_infer(f, ents)]
        rep = pair_f1(pred, ex.gold_pairs)
        pair.append(rep)
        if per_doc is not None:
            per_doc.append({"doc_id": ex.doc.doc_id, "pair": rep.to_dict(), "ser": ser[-1].to_dict()})
    return {"pair": sum_reports(pair), "ser": sum_reports(ser)}


PERTURB_PS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


def perturbation_sweep(model: SerReModel, examples: Sequence[SerReExample], error_types: Sequence[str] = ERROR_TYPES,
                       ps: Sequence[float] = PERTURB_PS, seed: int = 0) -> list[dict]:
    """Pair F1 of the fixed RE head fed with perturbed gold SER.

    Each document's perturbation seed depends only on ``seed`` and the
    document position, so the perturbed entities at larger ``p`` include
    those at smaller ``p``.
    """
    feats = [model.features(ex.inputs) for ex in examples]
    rows = []
    for et in error_types:
        for p in ps:
            reps = []
            for i, (ex, f) in enumerate(zip(examples, feats)):
                ents = inject_ser_errors(ex.entities, et, p, seed * 1_000_003 + i)
                pred = [(k.text, v.text) for k, v in model.re_infer(f, ents)]
                reps.append(pair_f1(pred, ex.gold_pairs))
            r = sum_reports(reps)
            rows.append({"error_type": et, "p": p, **r.to_dict()})
    return rows
