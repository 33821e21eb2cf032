"""Toy multimodal token encoder and the external-feature interface.

Each token is embedded as the sum of a word embedding and bucketed layout
embeddings taken from its line box (centre x/y, width, height) plus the
token's start/end offset inside the line. There is no sequential position
embedding, so the encoder is permutation-equivariant over tokens.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenizedDoc
from .numerics import (
    ConfigurationError,
    ParamStore,
    attention_backward,
    attention_forward,
    embedding_backward,
    linear_backward,
    linear_forward,
    load_tensors,
    relu,
    relu_backward,
    save_tensors,
)

logger = logging.getLogger(__name__)

LAYOUT_TABLES = ("x", "y", "w", "h", "x0", "x1", "rs", "re")
# frequencies (turns over the unit interval) of the sinusoidal layout init
LAYOUT_FREQS = (0.25, 1.0, 4.0)


@dataclass
class EncoderConfig:
    vocab_size: int
    c_e: int = 64
    layers: int = 2
    heads: int = 2
    coord_buckets: int = 64
    ffn_mult: int = 2
    layout_init: str = "sinusoidal"

    def __post_init__(self):
        if self.c_e % self.heads:
            raise ConfigurationError(f"c_e={self.c_e} is not divisible by heads={self.heads}")
        if self.coord_buckets < 2:
            raise ConfigurationError("coord_buckets must be >= 2")
        if self.vocab_size < 1 or self.layers < 0:
            raise ConfigurationError("invalid encoder config")
        if self.layout_init not in ("sinusoidal", "random"):
            raise ConfigurationError(f"unknown layout_init {self.layout_init!r}")


def bucketize(values: np.ndarray, buckets: int) -> np.ndarray:
    return np.clip(np.floor(np.asarray(values) * buckets), 0, buckets - 1).astype(np.int64)


def layout_inputs(doc: TokenizedDoc, buckets: int, shift: tuple[float, float] = (0.0, 0.0)) -> dict[str, np.ndarray]:
    """Integer ids for every embedding table, one row per token.

    ``shift`` translates the page content by a fraction of the page size
    (training-time augmentation); coordinates are clipped to [0, 1].
    """
    pw, ph = doc.page_size
    sx, sy = shift
    ids = np.array([t.vocab_id for t in doc.tokens], dtype=np.int64)
    raw = {k: [] for k in LAYOUT_TABLES}
    for t in doc.tokens:
        box = doc.line_boxes[t.line_id]
        raw["x"].append(box.xc / pw + sx)
        raw["y"].append(box.yc / ph + sy)
        raw["w"].append(box.width / pw)
        raw["h"].append(box.height / ph)
        raw["x0"].append(box.x0 / pw + sx)
        raw["x1"].append(box.x1 / pw + sx)
        raw["rs"].append(t.rel_start)
        raw["re"].append(t.rel_end)
    out = {"tok": ids}
    for k, v in raw.items():
        out[k] = bucketize(np.array(v, dtype=np.float64), buckets)
    return out


def _initial_tables(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Embedding tables at initialisation.

    With ``layout_init="sinusoidal"`` every layout table writes sin/cos
    features of its bucket position into its own block of channels and the
    word table uses the remaining channels, so coordinate offsets start out
    as (near) linear relations. Falls back to Gaussian tables when ``c_e``
    is too narrow for the blocks.
    """
    c, b = cfg.c_e, cfg.coord_buckets
    per_table = 2 * len(LAYOUT_FREQS)
    geo = per_table * len(LAYOUT_TABLES)
    if cfg.layout_init == "random" or c - geo < 8:
        std = 0.5 / math.sqrt(1 + len(LAYOUT_TABLES))
        out = {"tok": rng.normal(0, std, (cfg.vocab_size, c))}
        for k in LAYOUT_TABLES:
            out[k] = rng.normal(0, std, (b, c))
        return out
    pos = (np.arange(b) + 0.5) / b
    out = {"tok": np.zeros((cfg.vocab_size, c))}
    out["tok"][:, geo:] = rng.normal(0, 1 / math.sqrt(c - geo), (cfg.vocab_size, c - geo))
    for t, k in enumerate(LAYOUT_TABLES):
        table = rng.normal(0, 0.01, (b, c))
        for f, freq in enumerate(LAYOUT_FREQS):
            col = t * per_table + 2 * f
            table[:, col] = np.sin(2 * np.pi * freq * pos)
            table[:, col + 1] = np.cos(2 * np.pi * freq * pos)
        out[k] = table
    return out


class Encoder:
    """Embedding sum followed by ``layers`` self-attention blocks.

    Block: ``a = x + Wo MHA(x)`` (keys carry no bias), ``out = a + W2 relu(W1 a + b1) + b2``.
    """

    def __init__(self, cfg: EncoderConfig, store: ParamStore, rng: np.random.Generator, prefix: str = "enc"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        c, b = cfg.c_e, cfg.coord_buckets
        for name, table in _initial_tables(cfg, rng).items():
            store.add(f"{prefix}/{name}", table)
        hidden = cfg.ffn_mult * c
        for layer in range(cfg.layers):
            p = f"{prefix}/l{layer}"
            for name in ("wq", "wk", "wv"):
                store.add(f"{p}/{name}", rng.normal(0, 1 / math.sqrt(c), (c, c)))
                # no key bias: it shifts every score in a row equally, so the
                # softmax ignores it and its gradient is identically zero
                if name != "wk":
                    store.add(f"{p}/b{name[1]}", np.zeros(c))
            store.add(f"{p}/wo", rng.normal(0, 0.5 / math.sqrt(c), (c, c)))
            store.add(f"{p}/bo", np.zeros(c))
            store.add(f"{p}/w1", rng.normal(0, math.sqrt(2 / c), (hidden, c)))
            store.add(f"{p}/b1", np.zeros(hidden))
            store.add(f"{p}/w2", rng.normal(0, 0.5 / math.sqrt(hidden), (c, hidden)))
            store.add(f"{p}/b2", np.zeros(c))

    def _p(self, name: str) -> np.ndarray:
        return self.store[f"{self.prefix}/{name}"].value

    def _g(self, name: str) -> np.ndarray:
        return self.store[f"{self.prefix}/{name}"].grad

    def inputs(self, doc: TokenizedDoc, shift: tuple[float, float] = (0.0, 0.0)) -> dict[str, np.ndarray]:
        ids = layout_inputs(doc, self.cfg.coord_buckets, shift)
        if ids["tok"].size and ids["tok"].max() >= self.cfg.vocab_size:
            raise ConfigurationError("vocab id out of range for encoder")
        return ids

    def forward(self, doc: TokenizedDoc | dict):
        """Returns ``(features [N, c_e], cache)``."""
        ids = doc if isinstance(doc, dict) else self.inputs(doc)
        x = self._p("tok")[ids["tok"]]
        for k in LAYOUT_TABLES:
            x = x + self._p(k)[ids[k]]
        caches = []
        for layer in range(self.cfg.layers):
            x, cache = self._block_forward(layer, x)
            caches.append(cache)
        return x, (ids, caches)

    def backward(self, dout: np.ndarray, cache) -> None:
        ids, caches = cache
        dx = dout
        for layer in reversed(range(self.cfg.layers)):
            dx = self._block_backward(layer, dx, caches[layer])
        for k in ("tok",) + LAYOUT_TABLES:
            table = self._p(k)
            self._g(k)[...] += embedding_backward(dx, ids[k], table.shape)

    def _split(self, t: np.ndarray) -> np.ndarray:
        n = t.shape[0]
        h = self.cfg.heads
        return t.reshape(n, h, -1).transpose(1, 0, 2)

    def _merge(self, t: np.ndarray) -> np.ndarray:
        return t.transpose(1, 0, 2).reshape(t.shape[1], -1)

    def _block_forward(self, layer: int, x: np.ndarray):
        p = f"l{layer}"
        q = linear_forward(x, self._p(f"{p}/wq"), self._p(f"{p}/bq"))
        k = linear_forward(x, self._p(f"{p}/wk"), None)
        v = linear_forward(x, self._p(f"{p}/wv"), self._p(f"{p}/bv"))
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        oh, probs = attention_forward(qh, kh, vh)
        o = self._merge(oh)
        a = x + linear_forward(o, self._p(f"{p}/wo"), self._p(f"{p}/bo"))
        pre = linear_forward(a, self._p(f"{p}/w1"), self._p(f"{p}/b1"))
        z = relu(pre)
        out = a + linear_forward(z, self._p(f"{p}/w2"), self._p(f"{p}/b2"))
        return out, (x, qh, kh, vh, probs, o, a, pre, z)

    def _block_backward(self, layer: int, dout: np.ndarray, cache) -> np.ndarray:
        p = f"l{layer}"
        x, qh, kh, vh, probs, o, a, pre, z = cache
        dz, dw2, db2 = linear_backward(dout, z, self._p(f"{p}/w2"))
        self._g(f"{p}/w2")[...] += dw2
        self._g(f"{p}/b2")[...] += db2
        dpre = relu_backward(dz, pre)
        da_ffn, dw1, db1 = linear_backward(dpre, a, self._p(f"{p}/w1"))
        self._g(f"{p}/w1")[...] += dw1
        self._g(f"{p}/b1")[...] += db1
        da = dout + da_ffn
        do, dwo, dbo = linear_backward(da, o, self._p(f"{p}/wo"))
        self._g(f"{p}/wo")[...] += dwo
        self._g(f"{p}/bo")[...] += dbo
        dqh, dkh, dvh = attention_backward(self._split(do), qh, kh, vh, probs)
        dx = da.copy()
        for name, dh in (("q", dqh), ("k", dkh), ("v", dvh)):
            dproj = self._merge(dh)
            dxi, dw, db = linear_backward(dproj, x, self._p(f"{p}/w{name}"))
            self._g(f"{p}/w{name}")[...] += dw
            if name != "k":
                self._g(f"{p}/b{name}")[...] += db
            dx += dxi
        return dx


def encode(doc: TokenizedDoc, encoder: Encoder) -> np.ndarray:
    return encoder.forward(doc)[0]


# ---------------------------------------------------------------------------
# external features

FEATURE_PREFIX = "feat/"


class FeatureError(ValueError):
    """Per-document feature import failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


def export_features(path: str | Path, features: dict[str, np.ndarray]) -> None:
    save_tensors(path, {FEATURE_PREFIX + doc_id: np.asarray(f) for doc_id, f in features.items()})


def load_external_features(path: str | Path, doc_id: str, expected_n: int | None = None, _cache: dict | None = None) -> np.ndarray:
    """Read the ``[N, c_e]`` feature matrix stored for ``doc_id``.

    Raises :class:`FeatureError` with code ``missing_doc`` or ``n_mismatch``;
    callers skip the document and continue.
    """
    tensors = _cache if _cache is not None else load_tensors(path)
    key = FEATURE_PREFIX + doc_id
    if key not in tensors:
        raise FeatureError("missing_doc", f"no features for document {doc_id!r} in {path}")
    feat = tensors[key]
    if feat.ndim != 2:
        raise FeatureError("bad_rank", f"features for {doc_id!r} must be 2-D, got {feat.shape}")
    if expected_n is not None and feat.shape[0] != expected_n:
        raise FeatureError(
            "n_mismatch", f"features for {doc_id!r} have {feat.shape[0]} rows, tokenization has {expected_n}"
        )
    return feat
