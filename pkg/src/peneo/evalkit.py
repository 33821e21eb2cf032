"""Pair-level F1, matrix sub-task F1, ground-truth substitution and reports."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import TokenizedDoc
from .decoder import targets_as_scores
from .parser import parse_document

SUBTASK_HEADS = {
    "le": ("le",),
    "lg": ("lgh", "lgt"),
    "lgh": ("lgh",),
    "lgt": ("lgt",),
    "elh": ("elh",),
    "elt": ("elt",),
    "el": ("elh", "elt"),
}


@dataclass
class PairF1Report:
    true_positives: int
    num_predicted: int
    num_gold: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, n_pred: int, n_gold: int) -> "PairF1Report":
        if n_pred == 0 and n_gold == 0:
            return cls(0, 0, 0, 1.0, 1.0, 1.0)
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_gold if n_gold else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(tp, n_pred, n_gold, p, r, f1)

    def __add__(self, other: "PairF1Report") -> "PairF1Report":
        return PairF1Report.from_counts(
            self.true_positives + other.true_positives,
            self.num_predicted + other.num_predicted,
            self.num_gold + other.num_gold,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def sum_reports(reports: Iterable[PairF1Report]) -> PairF1Report:
    tp = n_pred = n_gold = 0
    for r in reports:
        tp += r.true_positives
        n_pred += r.num_predicted
        n_gold += r.num_gold
    return PairF1Report.from_counts(tp, n_pred, n_gold)


def pair_f1(pred: Sequence[tuple[str, str]], gold: Sequence[tuple[str, str]]) -> PairF1Report:
    """Exact-match pair F1 with multiset counting; strings are not normalised."""
    pc = Counter(tuple(p) for p in pred)
    gc = Counter(tuple(g) for g in gold)
    tp = sum(min(c, gc[k]) for k, c in pc.items())
    return PairF1Report.from_counts(tp, len(pred), len(gold))


def _cells(matrices: dict[str, np.ndarray], heads: Sequence[str]) -> set:
    out = set()
    for h in heads:
        rows, cols = np.nonzero(matrices[h])
        out.update((h, int(i), int(j)) for i, j in zip(rows, cols))
    return out


def subtask_f1(pred_matrices: dict[str, np.ndarray], gold_targets: dict[str, np.ndarray], head: str) -> PairF1Report:
    """F1 over positive cells; ``"lg"`` pools the head and tail grouping cells."""
    heads = SUBTASK_HEADS[head]
    for h in heads:
        if pred_matrices[h].shape != gold_targets[h].shape:
            raise ValueError(f"{h}: shape mismatch")
    pred = _cells(pred_matrices, heads)
    gold = _cells(gold_targets, heads)
    return PairF1Report.from_counts(len(pred & gold), len(pred), len(gold))


def substitute_gold(pred_matrices, pred_scores, gold_targets, substitute: Iterable[str]):
    """Replace the chosen sub-task matrices (``le`` and/or ``lg``) by gold ones."""
    matrices = dict(pred_matrices)
    scores = dict(pred_scores)
    gold_scores = targets_as_scores(gold_targets)
    for name in substitute:
        for h in SUBTASK_HEADS[name]:
            matrices[h] = gold_targets[h]
            scores[h] = gold_scores[h]
    return matrices, scores


def gt_substitution_eval(doc: TokenizedDoc, pred_matrices, pred_scores, gold_targets,
                         gold_pairs: Sequence[tuple[str, str]], substitute: Iterable[str] = ()) -> PairF1Report:
    matrices, scores = substitute_gold(pred_matrices, pred_scores, gold_targets, substitute)
    pairs = parse_document(matrices, scores, doc)
    return pair_f1([p.as_strings() for p in pairs], gold_pairs)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def build_report(per_doc: list[dict], config: dict, seed: int) -> dict:
    """Aggregate per-document count records into the metrics report layout.

    Each per-document record carries ``pair`` (and optionally ``le``/``lg``)
    count dicts as produced by :meth:`PairF1Report.to_dict`.
    """
    agg = {}
    keys = sorted({k for d in per_doc for k, v in d.items() if isinstance(v, dict)})
    for k in keys:
        r = sum_reports(
            PairF1Report.from_counts(d[k]["true_positives"], d[k]["num_predicted"], d[k]["num_gold"])
            for d in per_doc if k in d
        )
        agg[k] = r.to_dict()
    aggregate = {"pair_f1": agg.get("pair", PairF1Report.from_counts(0, 0, 0).to_dict())["f1"], "documents": len(per_doc)}
    for k, v in agg.items():
        aggregate[k] = v
    return {"aggregate": aggregate, "per_doc": per_doc, "config_hash": config_hash(config), "seed": seed}


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def run_report(config: dict, seed: int, docs, model=None, substitute: Sequence[str] = (),
               threads: int = 1, n_max: int = 512) -> dict:
    """Score ``docs`` with a trained PEneo model, or with gold matrices when ``model`` is None."""
    from .corpus import Vocab, tokenize
    from .decoder import build_targets
    from .training import evaluate, prepare

    per_doc: list[dict] = []
    if model is None:
        vocab = Vocab.build(docs)
        for d in docs:
            t = tokenize(d, vocab, n_max)
            targets = build_targets(t, d)
            gold = targets_as_scores(targets)
            pairs = parse_document(targets, gold, t)
            kept = set(t.line_spans)
            ents = d.entity_by_id()
            gold_pairs = [
                (d.entity_text(ents[k]), d.entity_text(ents[v])) for k, v in d.links
                if all(lid in kept for lid in ents[k].line_ids + ents[v].line_ids)
            ]
            rep = pair_f1([p.as_strings() for p in pairs], gold_pairs)
            one = PairF1Report.from_counts(1, 1, 1).to_dict()
            per_doc.append({"doc_id": d.doc_id, "pair": rep.to_dict(), "le": one, "lg": one})
    else:
        evaluate(model, prepare(docs, model, n_max), substitute=substitute, per_doc=per_doc, threads=threads)
    return build_report(per_doc, config, seed)
