"""Small hand-built documents and checks shared by the CLI and the tests."""

from __future__ import annotations

import numpy as np

from .corpus import BBox, Document, Entity, Line, Vocab, tokenize
from .decoder import LossConfig, build_targets
from .model import ModelConfig, PEneoModel
from .numerics import grad_check


def mini_form(doc_id: str = "mini-form") -> Document:
    """Five lines, four entities, two links; the last value spans two lines.

    Tokens: 0 "Name:" 1 "Alice" 2 "Address:" 3 "12" 4 "Fox" 5 "Road".
    """
    lines = [
        Line(0, "Name:", BBox(50, 50, 95, 68)),
        Line(1, "Alice", BBox(150, 50, 195, 68)),
        Line(2, "Address:", BBox(50, 100, 122, 118)),
        Line(3, "12 Fox", BBox(150, 100, 204, 118)),
        Line(4, "Road", BBox(150, 122, 186, 140)),
    ]
    entities = [
        Entity(0, "question", (0,)),
        Entity(1, "answer", (1,)),
        Entity(2, "question", (2,)),
        Entity(3, "answer", (3, 4)),
    ]
    return Document(doc_id, 400.0, 300.0, lines, entities, [(0, 1), (2, 3)])


def entity_level_record() -> dict:
    """Raw entity-level record whose value box covers two visual rows."""
    return {
        "id": "ent-doc",
        "width": 400,
        "height": 300,
        "lines": [
            {"id": 0, "text": "Address:", "bbox": [0, 5, 80, 15],
             "words": [{"text": "Address:", "bbox": [0, 5, 80, 15]}]},
            {"id": 1, "text": "12 Fox Road", "bbox": [100, 5, 160, 45],
             "words": [{"text": "12", "bbox": [100, 5, 120, 15]},
                       {"text": "Fox", "bbox": [125, 5, 155, 15]},
                       {"text": "Road", "bbox": [100, 35, 140, 45]}]},
        ],
        "entities": [{"id": 0, "category": "question", "line_ids": [0]},
                     {"id": 1, "category": "answer", "line_ids": [1]}],
        "links": [[0, 1]],
    }


def whole_pipeline_grad_check(c_e: int = 8, seed: int = 0, doc: Document | None = None,
                              max_coords_per_param: int = 6, n_max: int = 512,
                              dtype=np.longdouble) -> float:
    """Max relative error of the full loss gradient (encoder included).

    Runs in extended precision by default: some coordinates carry gradients
    around 1e-7 against a loss of order one, below what float64 central
    differences resolve to 1e-4 relative accuracy. On platforms where
    ``longdouble`` is plain float64 this degrades gracefully.
    """
    doc = doc or mini_form()
    vocab = Vocab.build([doc])
    cfg = ModelConfig(c_e=c_e, layers=1, heads=2, coord_buckets=16, layout_init="random")
    model = PEneoModel(vocab, cfg, seed=seed)
    tdoc = tokenize(doc, vocab, n_max)
    inputs = model.encoder.inputs(tdoc)
    targets = build_targets(tdoc, doc)
    loss_cfg = LossConfig()

    def fn():
        # no float() here: the difference up - down needs the full precision
        loss, _ = model.loss_backward(inputs, targets, loss_cfg)
        return loss

    return grad_check(fn, model.store, max_coords_per_param=max_coords_per_param, seed=seed, dtype=dtype)
