"""Linking parsing: assemble key-value pairs from the five relation matrices.

For every entity-head link the key and value are rebuilt line by line: the
first line comes from the line-extraction map, later lines by following the
head and tail grouping maps in lockstep. A pair survives only if its two
last tokens are linked in the entity-tail map. Whenever the maps disagree the
candidate is dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TokenizedDoc
from .decoder import HEADS

BestLinkMap = dict[int, tuple[int, float]]


@dataclass(frozen=True)
class ParsedPair:
    key_tokens: tuple[int, ...]
    value_tokens: tuple[int, ...]
    key_string: str
    value_string: str

    def as_strings(self) -> tuple[str, str]:
        return self.key_string, self.value_string


def best_map(matrix: np.ndarray, scores: np.ndarray) -> BestLinkMap:
    """Row -> (column, positive score) with the highest score among positive cells.

    Ties keep the smallest column.
    """
    out: BestLinkMap = {}
    rows, cols = np.nonzero(matrix)
    pos = scores[..., 1]
    for i, j in zip(rows.tolist(), cols.tolist()):
        s = float(pos[i, j])
        cur = out.get(i)
        if cur is None or s > cur[1]:
            out[i] = (j, s)
    return out


def build_best_maps(matrices: dict[str, np.ndarray], scores: dict[str, np.ndarray]) -> dict[str, BestLinkMap]:
    for k in HEADS:
        if matrices[k].shape != scores[k].shape[:-1]:
            raise ValueError(f"{k}: matrix {matrices[k].shape} and scores {scores[k].shape} disagree")
    return {k: best_map(matrices[k], scores[k]) for k in HEADS}


class _Contradiction(Exception):
    pass


def _collect_entity(head: int, le: dict[int, int], lgh: dict[int, int], lgt: dict[int, int]) -> list[list[int]] | None:
    """Line segments (token index lists) of the entity starting at ``head``."""
    if head not in le:
        return None
    tail = le[head]
    if tail < head:
        return None
    segments = [list(range(head, tail + 1))]
    used = set(segments[0])
    visited = {head}
    # cyclic grouping predictions are cut by the visited set; the hard bound
    # keeps termination independent of it
    for _ in range(len(le)):
        if head not in lgh:
            break
        next_head = lgh[head]
        if tail not in lgt:
            break
        next_tail = lgt[tail]
        if le.get(next_head) != next_tail or next_tail < next_head:
            break
        if next_head in visited:
            raise _Contradiction
        seg = list(range(next_head, next_tail + 1))
        if used.intersection(seg):
            raise _Contradiction
        segments.append(seg)
        used.update(seg)
        visited.add(next_head)
        head, tail = next_head, next_tail
    return segments


def _join(doc: TokenizedDoc, segments: list[list[int]]) -> str:
    return " ".join(doc.span_text(seg[0], seg[-1]) for seg in segments)


def parse_links(maps: dict[str, BestLinkMap], doc: TokenizedDoc) -> list[ParsedPair]:
    le = {i: j for i, (j, _) in maps["le"].items()}
    lgh = {i: j for i, (j, _) in maps["lgh"].items()}
    lgt = {i: j for i, (j, _) in maps["lgt"].items()}
    elt = {i: j for i, (j, _) in maps["elt"].items()}
    pairs = []
    for key_head in sorted(maps["elh"]):
        value_head = maps["elh"][key_head][0]
        try:
            key = _collect_entity(key_head, le, lgh, lgt)
            if key is None:
                continue
            value = _collect_entity(value_head, le, lgh, lgt)
            if value is None:
                continue
        except _Contradiction:
            continue
        key_tail = key[-1][-1]
        value_tail = value[-1][-1]
        if elt.get(key_tail) != value_tail:
            continue
        pairs.append(
            ParsedPair(
                tuple(t for seg in key for t in seg),
                tuple(t for seg in value for t in seg),
                _join(doc, key),
                _join(doc, value),
            )
        )
    return pairs


def parse_document(matrices, scores, doc: TokenizedDoc) -> list[ParsedPair]:
    return parse_links(build_best_maps(matrices, scores), doc)


def parse_output_record(doc_id: str, pairs: list[ParsedPair]) -> dict:
    return {
        "doc_id": doc_id,
        "pairs": [
            {
                "key": p.key_string,
                "value": p.value_string,
                "key_token_indices": list(p.key_tokens),
                "value_token_indices": list(p.value_tokens),
            }
            for p in pairs
        ],
    }


def write_parse_output(path: str | Path, records: list[dict]) -> None:
    Path(path).write_text(json.dumps(records, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def read_parse_output(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text(encoding="utf-8"))
