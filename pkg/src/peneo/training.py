"""Training and evaluation loops for the PEneo model."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Document, TokenizedDoc, tokenize
from .decoder import LossConfig, build_targets
from .evalkit import PairF1Report, pair_f1, subtask_f1, substitute_gold, sum_reports
from .model import PEneoModel
from .numerics import OptimizerConfig, adamw_step, clip_grad_norm, make_rng
from .parser import parse_document

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 5.0
    # max page translation (fraction of page size) applied per training step
    augment_shift: float = 0.0
    eval_every: int = 10
    seed: int = 0
    n_max: int = 512
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class Example:
    doc: Document
    tokens: TokenizedDoc
    inputs: dict
    targets: dict

    @property
    def gold_pairs(self) -> list[tuple[str, str]]:
        kept = set(self.tokens.line_spans)
        ents = self.doc.entity_by_id()
        pairs = []
        for k, v in self.doc.links:
            lines = ents[k].line_ids + ents[v].line_ids
            if all(lid in kept for lid in lines):
                pairs.append((self.doc.entity_text(ents[k]), self.doc.entity_text(ents[v])))
        return pairs


def prepare(docs: Sequence[Document], model: PEneoModel, n_max: int = 512) -> list[Example]:
    out = []
    for d in docs:
        t = tokenize(d, model.vocab, n_max)
        out.append(Example(d, t, model.encoder.inputs(t), build_targets(t, d)))
    return out


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, size):
        yield order[i : i + size]


def train_peneo(
    model: PEneoModel,
    train_docs: Sequence[Document],
    valid_docs: Sequence[Document] = (),
    cfg: TrainConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """AdamW training with a linear warmup/decay schedule.

    Keeps the parameters with the best validation pair F1 (checked every
    ``eval_every`` epochs and at the end) and restores them on return.
    Returns the per-epoch log.
    """
    cfg = cfg or TrainConfig()
    if not train_docs:
        raise TrainingError("empty training set")
    rng = make_rng(cfg.seed)
    train = prepare(train_docs, model, cfg.n_max)
    valid = prepare(valid_docs, model, cfg.n_max) if valid_docs else []
    steps_per_epoch = -(-len(train) // cfg.batch_size)
    total = max(1, steps_per_epoch * cfg.epochs)
    opt = {
        "enc/": OptimizerConfig(cfg.lr_encoder, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay, cfg.warmup_ratio, total),
        "dec/": OptimizerConfig(cfg.lr_decoder, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay, cfg.warmup_ratio, total),
    }
    groups = {prefix: model.store.select(prefix) for prefix in opt}
    model.store.zero_grad()
    log = []
    best_f1, best_state = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        total_loss = 0.0
        for batch in _batches(len(train), cfg.batch_size, rng):
            for i in batch:
                ex = train[i]
                inputs = ex.inputs
                if cfg.augment_shift:
                    shift = tuple(rng.uniform(-cfg.augment_shift, cfg.augment_shift, 2))
                    inputs = model.encoder.inputs(ex.tokens, shift)
                loss, _ = model.loss_backward(inputs, ex.targets, cfg.loss, scale=1.0 / len(batch))
                total_loss += loss
            if cfg.grad_clip:
                clip_grad_norm(model.store, cfg.grad_clip)
            for prefix, params in groups.items():
                adamw_step(params, opt[prefix])
        entry = {"epoch": epoch, "loss": total_loss / len(train)}
        if valid and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            f1 = evaluate(model, valid)["pair"].f1
            entry["valid_pair_f1"] = f1
            if f1 > best_f1:
                best_f1, best_state = f1, model.store.copy_values()
        log.append(entry)
        logger.info("epoch %d loss %.5f%s", epoch, entry["loss"],
                    f" valid F1 {entry['valid_pair_f1']:.4f}" if "valid_pair_f1" in entry else "")
        if on_epoch:
            on_epoch(entry)
    if best_state is not None:
        model.store.load_state_dict(best_state)
    return log


def _evaluate_one(model: PEneoModel, ex: Example, substitute: Sequence[str]) -> dict[str, PairF1Report]:
    matrices, scores = model.predict(ex.inputs)
    out = {"le": subtask_f1(matrices, ex.targets, "le"), "lg": subtask_f1(matrices, ex.targets, "lg")}
    if substitute:
        matrices, scores = substitute_gold(matrices, scores, ex.targets, substitute)
    pairs = parse_document(matrices, scores, ex.tokens)
    out["pair"] = pair_f1([p.as_strings() for p in pairs], ex.gold_pairs)
    return out


def evaluate(model: PEneoModel, examples: Sequence[Example], substitute: Sequence[str] = (),
             per_doc: list | None = None, threads: int = 1) -> dict[str, PairF1Report]:
    """Micro-averaged pair / line-extraction / line-grouping F1.

    ``substitute`` swaps in gold ``le`` and/or ``lg`` matrices before parsing.
    With ``threads > 1`` documents are scored concurrently; results are
    reduced in input order, so the output does not depend on scheduling.
    """
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda ex: _evaluate_one(model, ex, substitute), examples))
    else:
        results = [_evaluate_one(model, ex, substitute) for ex in examples]
    if per_doc is not None:
        for ex, r in zip(examples, results):
            per_doc.append({"doc_id": ex.doc.doc_id, **{k: r[k].to_dict() for k in ("pair", "le", "lg")}})
    return {k: sum_reports(r[k] for r in results) for k in ("pair", "le", "lg")}
