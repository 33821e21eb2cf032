"""Pair-encoding decoder producing the five token-relation matrices.

Heads:

* ``le``  line extraction: (first token, last token) of each key/value line
* ``lgh`` / ``lgt`` line grouping: head->head and tail->tail of consecutive
  lines inside one entity
* ``elh`` / ``elt`` entity linking: key first-line head -> value first-line
  head, key last-line tail -> value last-line tail
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .corpus import Document, TokenizedDoc
from .numerics import (
    ConfigurationError,
    ParamStore,
    linear_backward,
    linear_forward,
    relu,
    softmax,
    softmax_ce_weighted,
)

logger = logging.getLogger(__name__)

HEADS = ("le", "lgh", "lgt", "elh", "elt")
KV_CATEGORIES = ("question", "answer")


@dataclass
class LossConfig:
    lambdas: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    class_weights: tuple[float, float] = (1.0, 10.0)

    def __post_init__(self):
        self.lambdas = tuple(float(x) for x in self.lambdas)
        self.class_weights = tuple(float(x) for x in self.class_weights)
        if len(self.lambdas) != len(HEADS) or any(x < 0 for x in self.lambdas):
            raise ConfigurationError("lambdas must be 5 non-negative numbers")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ConfigurationError("class_weights must be 2 positive numbers")

    def weight(self, head: str) -> float:
        return self.lambdas[HEADS.index(head)]


class Decoder:
    """Projection, pair encoding and five two-layer MLP heads.

    The ``N x N x c_d`` pair tensor is only ever materialised ``block_rows``
    rows at a time; the backward pass recomputes each block.
    """

    def __init__(self, c_e: int, store: ParamStore, rng: np.random.Generator, c_d: int | None = None,
                 prefix: str = "dec", block_rows: int = 64):
        self.c_e = c_e
        self.c_d = c_d if c_d is not None else c_e // 2
        if self.c_d < 1:
            raise ConfigurationError("c_d must be positive")
        self.store = store
        self.prefix = prefix
        self.block_rows = block_rows
        c_d = self.c_d
        store.add(f"{prefix}/W_proj", rng.normal(0, 1 / math.sqrt(c_e), (c_d, c_e)))
        store.add(f"{prefix}/b_proj", np.zeros(c_d))
        store.add(f"{prefix}/W_pair", rng.normal(0, 1 / math.sqrt(2 * c_d), (c_d, 2 * c_d)))
        store.add(f"{prefix}/b_pair", np.zeros(c_d))
        for head in HEADS:
            p = f"{prefix}/head_{head}"
            store.add(f"{p}/W1", rng.normal(0, math.sqrt(2 / c_d), (c_d, c_d)))
            store.add(f"{p}/b1", np.zeros(c_d))
            store.add(f"{p}/W2", rng.normal(0, 1 / math.sqrt(c_d), (2, c_d)))
            store.add(f"{p}/b2", np.zeros(2))

    def _p(self, name: str) -> np.ndarray:
        return self.store[f"{self.prefix}/{name}"].value

    def _g(self, name: str) -> np.ndarray:
        return self.store[f"{self.prefix}/{name}"].grad

    # -- forward pieces --------------------------------------------------

    def project(self, f: np.ndarray) -> np.ndarray:
        if f.shape[-1] != self.c_e:
            raise ConfigurationError(f"features have width {f.shape[-1]}, decoder expects {self.c_e}")
        return linear_forward(f, self._p("W_proj"), self._p("b_proj"))

    def _halves(self, h: np.ndarray):
        w = self._p("W_pair")
        return h @ w[:, : self.c_d].T, h @ w[:, self.c_d :].T

    def pair_encode(self, h: np.ndarray, block_rows: int | None = None) -> np.ndarray:
        """Full ``M[i, j] = W_pair (h_i ++ h_j) + b_pair``, built in row blocks."""
        left, right = self._halves(h)
        n = h.shape[0]
        out = np.empty((n, n, self.c_d), dtype=np.result_type(h, left))
        step = block_rows or self.block_rows
        for r0 in range(0, n, step):
            out[r0 : r0 + step] = self._pair_block(left, right, r0, r0 + step)
        return out

    def _pair_block(self, left, right, r0, r1):
        return left[r0:r1, None, :] + right[None, :, :] + self._p("b_pair")

    def head_logits(self, m: np.ndarray, head: str) -> np.ndarray:
        if head not in HEADS:
            raise ConfigurationError(f"unknown head {head!r}")
        p = f"head_{head}"
        hid = relu(linear_forward(m, self._p(f"{p}/W1"), self._p(f"{p}/b1")))
        return linear_forward(hid, self._p(f"{p}/W2"), self._p(f"{p}/b2"))

    def head_scores(self, m: np.ndarray, head: str) -> np.ndarray:
        return softmax(self.head_logits(m, head))

    # -- fused forward / backward ------------------------------------------

    def forward(self, f: np.ndarray):
        """Logits ``{head: [N, N, 2]}`` plus the cache for :meth:`backward`."""
        h = self.project(f)
        left, right = self._halves(h)
        n = h.shape[0]
        logits = {k: np.empty((n, n, 2), dtype=left.dtype) for k in HEADS}
        for r0 in range(0, n, self.block_rows):
            m = self._pair_block(left, right, r0, r0 + self.block_rows)
            for k in HEADS:
                logits[k][r0 : r0 + self.block_rows] = self.head_logits(m, k)
        return logits, (f, h, left, right)

    def backward(self, dlogits: dict[str, np.ndarray], cache) -> np.ndarray:
        """Accumulate parameter grads; returns d loss / d features."""
        f, h, left, right = cache
        n = h.shape[0]
        dleft = np.zeros_like(left)
        dright = np.zeros_like(right)
        db_pair = np.zeros(self.c_d, dtype=left.dtype)
        active = [k for k in HEADS if k in dlogits]
        for r0 in range(0, n, self.block_rows):
            r1 = min(n, r0 + self.block_rows)
            m = self._pair_block(left, right, r0, r1)
            dm = np.zeros_like(m)
            for k in active:
                p = f"head_{k}"
                w1 = self._p(f"{p}/W1")
                pre = linear_forward(m, w1, self._p(f"{p}/b1"))
                hid = relu(pre)
                dl = dlogits[k][r0:r1]
                dhid, dw2, db2 = linear_backward(dl, hid, self._p(f"{p}/W2"))
                self._g(f"{p}/W2")[...] += dw2
                self._g(f"{p}/b2")[...] += db2
                dpre = dhid * (pre > 0)
                dmk, dw1, db1 = linear_backward(dpre, m, w1)
                self._g(f"{p}/W1")[...] += dw1
                self._g(f"{p}/b1")[...] += db1
                dm += dmk
            dleft[r0:r1] += dm.sum(axis=1)
            dright += dm.sum(axis=0)
            db_pair += dm.sum(axis=(0, 1))
        w = self._p("W_pair")
        self._g("W_pair")[:, : self.c_d] += dleft.T @ h
        self._g("W_pair")[:, self.c_d :] += dright.T @ h
        self._g("b_pair")[...] += db_pair
        dh = dleft @ w[:, : self.c_d] + dright @ w[:, self.c_d :]
        df, dwp, dbp = linear_backward(dh, f, self._p("W_proj"))
        self._g("W_proj")[...] += dwp
        self._g("b_proj")[...] += dbp
        return df


# ---------------------------------------------------------------------------
# targets, loss, decoding


def build_targets(doc: TokenizedDoc, ann: Document) -> dict[str, np.ndarray]:
    """Gold ``{head: [N, N] uint8}`` matrices from the document annotations.

    Lines dropped by truncation make the grouping / link entries that need
    them disappear (with a warning).
    """
    n = doc.N
    y = {k: np.zeros((n, n), dtype=np.uint8) for k in HEADS}
    spans = doc.line_spans
    ents = ann.entity_by_id()
    for e in ann.entities:
        if e.category not in KV_CATEGORIES:
            continue
        for lid in e.line_ids:
            if lid in spans:
                a, b = spans[lid]
                y["le"][a, b] = 1
        for prev, nxt in zip(e.line_ids, e.line_ids[1:]):
            if prev in spans and nxt in spans:
                (a, b), (c, d) = spans[prev], spans[nxt]
                y["lgh"][a, c] = 1
                y["lgt"][b, d] = 1
    for k, v in ann.links:
        ke, ve = ents[k], ents[v]
        needed = (ke.line_ids[0], ke.line_ids[-1], ve.line_ids[0], ve.line_ids[-1])
        if not all(lid in spans for lid in needed):
            logger.warning("%s: link (%d, %d) touches truncated lines, dropped", doc.doc_id, k, v)
            continue
        y["elh"][spans[ke.line_ids[0]][0], spans[ve.line_ids[0]][0]] = 1
        y["elt"][spans[ke.line_ids[-1]][1], spans[ve.line_ids[-1]][1]] = 1
    return y


def loss_and_grads(logits: dict[str, np.ndarray], targets: dict[str, np.ndarray], cfg: LossConfig):
    """Weighted sum of per-head weighted cross entropies.

    Returns ``(loss, {head: dloss/dlogits}, {head: per-head loss})``. Heads
    with zero weight contribute zero gradient.
    """
    total = 0.0
    grads = {}
    parts = {}
    for k in HEADS:
        lam = cfg.weight(k)
        lk, gk = softmax_ce_weighted(logits[k], targets[k], cfg.class_weights)
        parts[k] = lk
        total += lam * lk
        grads[k] = gk * lam
    return total, grads, parts


def scores_from_logits(logits: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: softmax(v) for k, v in logits.items()}


def decode(scores: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-cell argmax; an exact 0.5/0.5 tie goes to the negative class."""
    return {k: (p[..., 1] > p[..., 0]).astype(np.uint8) for k, p in scores.items()}


def targets_as_scores(targets: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Gold matrices as probability tensors with positive score 1.0."""
    out = {}
    for k, y in targets.items():
        p = np.zeros(y.shape + (2,), dtype=np.float32)
        p[..., 1] = y
        p[..., 0] = 1 - y
        out[k] = p
    return out
