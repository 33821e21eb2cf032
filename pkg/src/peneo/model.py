"""PEneo model: toy encoder + pair decoder sharing one parameter store."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenizedDoc, Vocab
from .decoder import Decoder, LossConfig, decode, loss_and_grads, scores_from_logits
from .encoder import Encoder, EncoderConfig
from .numerics import ParamStore, load_tensors, make_rng, save_tensors
from .parser import ParsedPair, parse_document


@dataclass
class ModelConfig:
    c_e: int = 64
    layers: int = 2
    heads: int = 2
    coord_buckets: int = 64
    ffn_mult: int = 2
    c_d: int | None = None  # defaults to c_e // 2
    block_rows: int = 64
    layout_init: str = "sinusoidal"

    @property
    def decoder_width(self) -> int:
        return self.c_d if self.c_d is not None else self.c_e // 2


class PEneoModel:
    def __init__(self, vocab: Vocab, cfg: ModelConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or ModelConfig()
        rng = make_rng(seed)
        self.store = ParamStore()
        self.encoder = Encoder(
            EncoderConfig(len(vocab), self.cfg.c_e, self.cfg.layers, self.cfg.heads,
                          self.cfg.coord_buckets, self.cfg.ffn_mult, self.cfg.layout_init),
            self.store, rng,
        )
        self.decoder = Decoder(self.cfg.c_e, self.store, rng, c_d=self.cfg.decoder_width,
                               block_rows=self.cfg.block_rows)

    def forward(self, doc: TokenizedDoc | dict, features: np.ndarray | None = None):
        """Logits per head. ``features`` bypasses the encoder (imported backbone)."""
        if features is not None:
            logits, dcache = self.decoder.forward(features)
            return logits, (None, dcache)
        f, ecache = self.encoder.forward(doc)
        logits, dcache = self.decoder.forward(f)
        return logits, (ecache, dcache)

    def loss_backward(self, doc, targets, loss_cfg: LossConfig, scale: float = 1.0):
        """Forward, loss, and backward (grads accumulate into the store)."""
        logits, (ecache, dcache) = self.forward(doc)
        loss, dlogits, parts = loss_and_grads(logits, targets, loss_cfg)
        if scale != 1.0:
            dlogits = {k: v * scale for k, v in dlogits.items()}
        df = self.decoder.backward(dlogits, dcache)
        if ecache is not None:
            self.encoder.backward(df, ecache)
        return loss, parts

    def predict(self, doc, features: np.ndarray | None = None):
        logits, _ = self.forward(doc, features)
        scores = scores_from_logits(logits)
        return decode(scores), scores

    def parse(self, doc: TokenizedDoc, features: np.ndarray | None = None) -> list[ParsedPair]:
        matrices, scores = self.predict(doc, features)
        return parse_document(matrices, scores, doc)

    # -- persistence -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write ``path`` (tensor container) and ``path`` + ``.json`` (config, vocab)."""
        path = Path(path)
        save_tensors(path, self.store.state_dict())
        meta = {"kind": "peneo", "model": asdict(self.cfg), "vocab": self.vocab.words}
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PEneoModel":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
        model = cls(Vocab(meta["vocab"]), ModelConfig(**meta["model"]))
        model.store.load_state_dict(load_tensors(path))
        return model
