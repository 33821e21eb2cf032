"""Document schema, dataset I/O, entity-to-line relabeling, the synthetic form
generator and the whitespace tokenizer."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import make_rng

logger = logging.getLogger(__name__)

CATEGORIES = ("header", "question", "answer", "other")
PAD, UNK = "<pad>", "<unk>"
DEFAULT_N_MAX = 512


class DatasetError(Exception):
    """Fatal dataset problem (missing file, unreadable JSON)."""


class SchemaError(ValueError):
    """A single record violates the dataset schema."""


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise SchemaError(f"degenerate bbox {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def xc(self) -> float:
        return (self.x0 + self.x1) / 2

    @property
    def yc(self) -> float:
        return (self.y0 + self.y1) / 2

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def union(cls, boxes: Iterable["BBox"]) -> "BBox":
        boxes = list(boxes)
        return cls(
            min(b.x0 for b in boxes),
            min(b.y0 for b in boxes),
            max(b.x1 for b in boxes),
            max(b.y1 for b in boxes),
        )


@dataclass(frozen=True)
class Word:
    text: str
    bbox: BBox

    def __post_init__(self):
        if not self.text:
            raise SchemaError("empty word text")


@dataclass(frozen=True)
class Line:
    line_id: int
    text: str
    bbox: BBox
    words: tuple[Word, ...] | None = None

    def __post_init__(self):
        if self.words is not None and " ".join(w.text for w in self.words) != self.text:
            raise SchemaError(f"line {self.line_id}: words do not join to text {self.text!r}")


@dataclass(frozen=True)
class Entity:
    entity_id: int
    category: str
    line_ids: tuple[int, ...]


@dataclass
class Document:
    doc_id: str
    width: float
    height: float
    lines: list[Line]
    entities: list[Entity] = field(default_factory=list)
    links: list[tuple[int, int]] = field(default_factory=list)

    def line_by_id(self) -> dict[int, Line]:
        return {ln.line_id: ln for ln in self.lines}

    def entity_by_id(self) -> dict[int, Entity]:
        return {e.entity_id: e for e in self.entities}

    def entity_text(self, entity: Entity) -> str:
        by_id = self.line_by_id()
        return " ".join(by_id[i].text for i in entity.line_ids)

    def gold_pairs(self) -> list[tuple[str, str]]:
        ents = self.entity_by_id()
        return [(self.entity_text(ents[k]), self.entity_text(ents[v])) for k, v in self.links]

    def validate(self) -> None:
        line_ids = [ln.line_id for ln in self.lines]
        if len(set(line_ids)) != len(line_ids):
            raise SchemaError(f"{self.doc_id}: duplicate line ids")
        known = set(line_ids)
        seen: set[int] = set()
        ent_ids = set()
        for e in self.entities:
            if e.entity_id in ent_ids:
                raise SchemaError(f"{self.doc_id}: duplicate entity id {e.entity_id}")
            ent_ids.add(e.entity_id)
            if e.category not in CATEGORIES:
                raise SchemaError(f"{self.doc_id}: unknown category {e.category!r}")
            if not e.line_ids:
                raise SchemaError(f"{self.doc_id}: entity {e.entity_id} has no lines")
            for lid in e.line_ids:
                if lid not in known:
                    raise SchemaError(f"{self.doc_id}: entity {e.entity_id} references missing line {lid}")
                if lid in seen:
                    raise SchemaError(f"{self.doc_id}: line {lid} belongs to two entities")
                seen.add(lid)
        cats = {e.entity_id: e.category for e in self.entities}
        for k, v in self.links:
            if k not in cats or v not in cats:
                raise SchemaError(f"{self.doc_id}: link ({k}, {v}) references a missing entity")
            if cats[k] != "question" or cats[v] != "answer":
                raise SchemaError(f"{self.doc_id}: link ({k}, {v}) is not question->answer")


# ---------------------------------------------------------------------------
# JSON schema


def _bbox(raw) -> BBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise SchemaError(f"bbox must be a 4-list, got {raw!r}")
    return BBox(*(float(v) for v in raw))


def document_from_json(rec: dict) -> Document:
    try:
        lines = []
        for ln in rec["lines"]:
            words = None
            if ln.get("words") is not None:
                words = tuple(Word(str(w["text"]), _bbox(w["bbox"])) for w in ln["words"])
            lines.append(Line(int(ln["id"]), str(ln["text"]), _bbox(ln["bbox"]), words))
        entities = [
            Entity(int(e["id"]), str(e["category"]), tuple(int(i) for i in e["line_ids"]))
            for e in rec.get("entities", [])
        ]
        raw_links = [(int(k), int(v)) for k, v in rec.get("links", [])]
        doc = Document(str(rec["id"]), float(rec["width"]), float(rec["height"]), lines, entities)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed record: {exc!r}") from exc
    links = []
    for link in raw_links:
        if link in links:
            logger.warning("%s: duplicate link %s collapsed", doc.doc_id, link)
            continue
        links.append(link)
    doc.links = links
    doc.validate()
    return doc


def document_to_json(doc: Document) -> dict:
    lines = []
    for ln in doc.lines:
        rec = {"id": ln.line_id, "text": ln.text, "bbox": ln.bbox.as_list()}
        if ln.words is not None:
            rec["words"] = [{"text": w.text, "bbox": w.bbox.as_list()} for w in ln.words]
        lines.append(rec)
    return {
        "id": doc.doc_id,
        "width": doc.width,
        "height": doc.height,
        "lines": lines,
        "entities": [
            {"id": e.entity_id, "category": e.category, "line_ids": list(e.line_ids)}
            for e in doc.entities
        ],
        "links": [[k, v] for k, v in doc.links],
    }


def read_dataset(path: str | Path) -> tuple[list[Document], int]:
    """Load documents and return them with the number of rejected records.

    ``path`` is a split file or a directory of split files (read in sorted
    name order).
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset path not found: {path}")
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    docs: list[Document] = []
    skipped = 0
    for f in files:
        text = f.read_text(encoding="utf-8")
        if not text.strip():
            continue
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{f}: invalid JSON ({exc})") from exc
        records = raw.get("documents", []) if isinstance(raw, dict) else None
        if records is None:
            raise DatasetError(f"{f}: top level must be an object with 'documents'")
        for i, rec in enumerate(records):
            try:
                docs.append(document_from_json(rec))
            except SchemaError as exc:
                skipped += 1
                logger.warning("%s: record %d skipped: %s", f, i, exc)
    return docs, skipped


def load_dataset(path: str | Path) -> list[Document]:
    return read_dataset(path)[0]


def dumps_dataset(docs: Sequence[Document]) -> str:
    return json.dumps({"documents": [document_to_json(d) for d in docs]}, ensure_ascii=False, indent=1)


def save_dataset(docs: Sequence[Document], path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(docs) + "\n", encoding="utf-8")


def dataset_stats(docs: Iterable[Document]) -> dict[str, int]:
    """Entity, multi-line entity and pair counts of a split."""
    n_ent = n_multi = n_pairs = 0
    for d in docs:
        n_ent += len(d.entities)
        n_multi += sum(1 for e in d.entities if len(e.line_ids) > 1)
        n_pairs += len(d.links)
    return {"entities": n_ent, "multi_line_entities": n_multi, "pairs": n_pairs}


# ---------------------------------------------------------------------------
# entity -> line relabeling


def _vertical_gaps(words: Sequence[Word]) -> tuple[list[float], float]:
    threshold = float(np.mean([w.bbox.height for w in words]))
    gaps = [abs(b.bbox.yc - a.bbox.yc) for a, b in zip(words, words[1:])]
    return gaps, threshold


def _make_line(line_id: int, words: Sequence[Word]) -> Line:
    return Line(
        line_id,
        " ".join(w.text for w in words),
        BBox.union(w.bbox for w in words),
        tuple(words),
    )


def relabel_entities_to_lines(entity_words: Sequence[Word], first_line_id: int = 0) -> list[Line]:
    """Split one entity's reading-ordered words into lines.

    A new line starts whenever the y-centre distance between adjacent words
    exceeds the mean height of all the entity's words.
    """
    if not entity_words:
        raise ValueError("entity has no words")
    gaps, threshold = _vertical_gaps(entity_words)
    groups: list[list[Word]] = [[entity_words[0]]]
    for gap, w in zip(gaps, entity_words[1:]):
        if gap > threshold:
            groups.append([w])
        else:
            groups[-1].append(w)
    return [_make_line(first_line_id + i, g) for i, g in enumerate(groups)]


def review_margins(entity_words: Sequence[Word], tolerance: float = 0.2) -> list[dict]:
    """Adjacent-word gaps lying within ``tolerance`` of the split threshold."""
    if len(entity_words) < 2:
        return []
    gaps, threshold = _vertical_gaps(entity_words)
    out = []
    for i, gap in enumerate(gaps):
        if threshold > 0 and abs(gap - threshold) <= tolerance * threshold:
            out.append(
                {
                    "after_word": i,
                    "gap": gap,
                    "threshold": threshold,
                    "split": gap > threshold,
                    "words": [entity_words[i].text, entity_words[i + 1].text],
                }
            )
    return out


def relabel_document(rec: dict) -> tuple[Document, list[dict]]:
    """Turn an entity-level record into a line-level :class:`Document`.

    ``rec`` follows the dataset schema but each of its ``lines`` is an
    entity-level box whose ``words`` are in reading order. Returns the
    line-level document and the review entries for borderline splits.
    """
    new_lines: list[Line] = []
    remap: dict[int, list[int]] = {}
    review = []
    for src in rec["lines"]:
        words = [Word(str(w["text"]), _bbox(w["bbox"])) for w in src.get("words") or []]
        src_id = int(src["id"])
        if not words:
            words = [Word(t, _bbox(src["bbox"])) for t in str(src["text"]).split()]
        lines = relabel_entities_to_lines(words, first_line_id=len(new_lines))
        remap[src_id] = [ln.line_id for ln in lines]
        new_lines.extend(lines)
        for m in review_margins(words):
            review.append({"doc_id": str(rec["id"]), "source_line": src_id, **m})
    entities = [
        Entity(
            int(e["id"]),
            str(e["category"]),
            tuple(lid for old in e["line_ids"] for lid in remap[int(old)]),
        )
        for e in rec.get("entities", [])
    ]
    links = []
    for k, v in rec.get("links", []):
        if (int(k), int(v)) not in links:
            links.append((int(k), int(v)))
    doc = Document(str(rec["id"]), float(rec["width"]), float(rec["height"]), new_lines, entities, links)
    doc.validate()
    return doc, review


def relabel_file(src: str | Path, dst: str | Path) -> tuple[list[Document], Path]:
    """Relabel a whole entity-level split; writes ``dst`` and ``dst.review.json``."""
    raw = json.loads(Path(src).read_text(encoding="utf-8"))
    docs, review = [], []
    for rec in raw.get("documents", []):
        d, r = relabel_document(rec)
        docs.append(d)
        review.extend(r)
    dst = Path(dst)
    save_dataset(docs, dst)
    sidecar = dst.with_name(dst.stem + ".review.json")
    sidecar.write_text(json.dumps({"review": review}, indent=1) + "\n", encoding="utf-8")
    return docs, sidecar


# ---------------------------------------------------------------------------
# synthetic forms

KEY_PHRASES = [
    "Name:", "Date:", "Address:", "Phone:", "Fax:", "Company:", "Title:", "Amount:",
    "Total:", "Signature:", "Dept:", "Ref No:", "Email:", "City:", "State:", "Zip Code:",
    "Account:", "Contact:", "Subject:", "From:", "To:", "Brand:", "Product:", "Region:",
    "Budget:", "Start Date:", "End Date:", "Notes:", "Approved By:", "Cost Center:",
]
VALUE_WORDS = [
    "alpha", "bravo", "cedar", "delta", "ember", "falcon", "garnet", "harbor", "indigo", "juniper",
    "kepler", "lumen", "maple", "nectar", "onyx", "pepper", "quartz", "raven", "sierra", "tundra",
    "umber", "violet", "willow", "xenon", "yarrow", "zephyr", "acme", "boston", "carter", "dallas",
    "eagle", "fox", "grant", "hill", "iris", "jones", "king", "lake", "miller", "north",
    "oak", "park", "queen", "road", "smith", "tower", "union", "vale", "west", "york",
    "12", "27", "34", "45", "58", "61", "73", "86", "90", "104",
    "2021", "1998", "$120", "$45.00", "#7", "A-1", "B-22", "C3", "D/4", "E5",
    "inc.", "ltd.", "co.", "st.", "ave.", "blvd.", "suite", "floor", "unit", "room",
]
HEADER_PHRASES = ["REQUEST FORM", "CONFIDENTIAL", "PURCHASE ORDER", "REPORT", "INVOICE", "MEMO"]
OTHER_PHRASES = ["Page 1", "see reverse", "for office use only", "continued", "draft", "copy", "rev 2"]
# filling instructions printed on a field's row, right of the value
HINT_PHRASES = ["(optional)", "required", "if any", "print clearly", "mm/dd/yy", "see note"]

CHAR_W = 9.0
LINE_H = 18.0


@dataclass
class SynthSpec:
    """Parameters for :func:`generate_synthetic_corpus`."""

    docs: int = 200
    multi_line_frac: float = 0.3
    max_value_lines: int = 3
    min_pairs: int = 3
    max_pairs: int = 6
    max_tokens: int = 40
    other_lines: tuple[int, int] = (0, 2)
    # chance that an "other" line is a hint on a field row (single-column pages)
    hint_prob: float = 0.5
    header_prob: float = 0.7
    unlinked_key_prob: float = 0.05
    two_column_frac: float = 0.5
    shuffle_lines: bool = True
    width: float = 1000.0
    height: float = 1000.0
    row_pitch: float = 36.0
    doc_prefix: str = "synth"

    def __post_init__(self):
        if self.docs < 0 or not 0 <= self.multi_line_frac <= 1 or self.max_value_lines < 1:
            raise ValueError("invalid synthetic corpus spec")
        if self.min_pairs < 1 or self.max_pairs < self.min_pairs:
            raise ValueError("invalid pair count range")


def _words_box(x0: float, y0: float, text: str) -> BBox:
    return BBox(x0, y0, x0 + CHAR_W * len(text), y0 + LINE_H)


class _Builder:
    def __init__(self, doc_id: str, spec: SynthSpec):
        self.doc_id = doc_id
        self.spec = spec
        self.lines: list[Line] = []
        self.entities: list[Entity] = []
        self.links: list[tuple[int, int]] = []
        self.tokens = 0

    def add_entity(self, category: str, placed: list[tuple[float, float, str]]) -> int:
        ids = []
        for x0, y0, text in placed:
            lid = len(self.lines)
            self.lines.append(Line(lid, text, _words_box(x0, y0, text)))
            ids.append(lid)
            self.tokens += len(text.split())
        eid = len(self.entities)
        self.entities.append(Entity(eid, category, tuple(ids)))
        return eid


def _value_lines(rng: np.random.Generator, spec: SynthSpec) -> list[str]:
    n = 1
    if spec.max_value_lines > 1 and rng.random() < spec.multi_line_frac:
        n = int(rng.integers(2, spec.max_value_lines + 1))
    return [
        " ".join(VALUE_WORDS[int(i)] for i in rng.integers(0, len(VALUE_WORDS), int(rng.integers(1, 4))))
        for _ in range(n)
    ]


def _synth_document(doc_id: str, spec: SynthSpec, rng: np.random.Generator) -> Document:
    b = _Builder(doc_id, spec)
    pitch = spec.row_pitch
    top = 40.0 + float(rng.integers(0, 4)) * 10
    if rng.random() < spec.header_prob:
        text = HEADER_PHRASES[int(rng.integers(len(HEADER_PHRASES)))]
        b.add_entity("header", [(spec.width / 2 - CHAR_W * len(text) / 2, top, text)])
        top += pitch * 1.5
    two_col = rng.random() < spec.two_column_frac
    n_cols = 2 if two_col else 1
    col_x = [40.0 + float(rng.integers(0, 5)) * 8]
    if two_col:
        col_x.append(spec.width / 2 + 20.0 + float(rng.integers(0, 5)) * 8)
    val_off = float(rng.integers(0, 4)) * 10 + (170.0 if two_col else 220.0)
    col_y = [top] * n_cols
    n_pairs = int(rng.integers(spec.min_pairs, spec.max_pairs + 1))
    n_other = int(rng.integers(spec.other_lines[0], spec.other_lines[1] + 1))
    budget = spec.max_tokens
    keys = rng.permutation(len(KEY_PHRASES))
    rows: list[tuple[float, float]] = []  # (y, right edge) of each field row
    for p in range(n_pairs):
        col = p % n_cols
        key = KEY_PHRASES[int(keys[p % len(keys)])]
        vals = _value_lines(rng, spec)
        linked = rng.random() >= spec.unlinked_key_prob
        if not linked:
            vals = []
        need = len(key.split()) + sum(len(v.split()) for v in vals)
        if b.tokens + need > budget - 2 * n_other:
            break
        y = col_y[col]
        kx = col_x[col]
        keid = b.add_entity("question", [(kx, y, key)])
        right = kx + CHAR_W * len(key)
        if vals:
            vx = kx + val_off
            veid = b.add_entity("answer", [(vx, y + i * pitch, v) for i, v in enumerate(vals)])
            b.links.append((keid, veid))
            right = vx + CHAR_W * len(vals[0])
        rows.append((y, right))
        col_y[col] = y + pitch * max(1, len(vals))
    bottom = max(col_y) + pitch * 0.5
    free_rows = [] if two_col else [int(i) for i in rng.permutation(len(rows))]
    for i in range(n_other):
        if free_rows and rng.random() < spec.hint_prob:
            y, right = rows[free_rows.pop()]
            text = HINT_PHRASES[int(rng.integers(len(HINT_PHRASES)))]
            place = (right + 40.0 + float(rng.integers(0, 6)) * 10, y, text)
        else:
            text = OTHER_PHRASES[int(rng.integers(len(OTHER_PHRASES)))]
            place = (col_x[0] + float(rng.integers(0, 30)) * 10, bottom + i * pitch, text)
        if b.tokens + len(text.split()) > budget:
            break
        b.add_entity("other", [place])
    lines = list(b.lines)
    if spec.shuffle_lines:
        lines = [lines[int(i)] for i in rng.permutation(len(lines))]
    return Document(doc_id, spec.width, spec.height, lines, b.entities, b.links)


def generate_synthetic_corpus(spec: SynthSpec, seed: int) -> list[Document]:
    """Template-driven key-value forms with gold line, entity and link labels."""
    rng = make_rng(seed)
    docs = []
    for i in range(spec.docs):
        doc = _synth_document(f"{spec.doc_prefix}-{seed}-{i:05d}", spec, rng)
        doc.validate()
        docs.append(doc)
    return docs


# ---------------------------------------------------------------------------
# vocabulary and tokenization


@dataclass
class Vocab:
    words: list[str]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index.get(word, self.index[UNK])

    @classmethod
    def build(cls, docs: Iterable[Document]) -> "Vocab":
        counts: Counter[str] = Counter()
        for d in docs:
            for ln in d.lines:
                counts.update(ln.text.split())
        return cls([PAD, UNK] + sorted(counts))

    def to_json(self) -> str:
        return json.dumps({"words": self.words}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls(list(json.loads(text)["words"]))


@dataclass(frozen=True)
class Token:
    index: int
    vocab_id: int
    surface: str
    line_id: int
    # character offsets of the token inside its line text, as fractions of
    # the line length
    rel_start: float
    rel_end: float


@dataclass
class TokenizedDoc:
    doc_id: str
    tokens: list[Token]
    line_spans: dict[int, tuple[int, int]]
    line_boxes: dict[int, BBox]
    page_size: tuple[float, float]
    dropped_lines: tuple[int, ...] = ()

    @property
    def N(self) -> int:
        return len(self.tokens)

    def span_text(self, first: int, last: int) -> str:
        return " ".join(t.surface for t in self.tokens[first : last + 1])

    def token_line_ids(self) -> list[int]:
        return [t.line_id for t in self.tokens]


def tokenize(doc: Document, vocab: Vocab, n_max: int = DEFAULT_N_MAX) -> TokenizedDoc:
    """Whitespace tokenization in input line order.

    Documents longer than ``n_max`` tokens are cut at the last line boundary
    that fits; the dropped line ids are recorded.
    """
    tokens: list[Token] = []
    spans: dict[int, tuple[int, int]] = {}
    boxes: dict[int, BBox] = {}
    dropped: list[int] = []
    for ln in doc.lines:
        parts = ln.text.split()
        if not parts:
            continue
        if dropped or len(tokens) + len(parts) > n_max:
            dropped.append(ln.line_id)
            continue
        length = len(ln.text)
        first = len(tokens)
        pos = 0
        for w in parts:
            start = ln.text.index(w, pos)
            end = start + len(w)
            pos = end
            tokens.append(Token(len(tokens), vocab.id(w), w, ln.line_id, start / length, (length - end) / length))
        spans[ln.line_id] = (first, len(tokens) - 1)
        boxes[ln.line_id] = ln.bbox
    if dropped:
        logger.warning("%s: truncated to %d tokens, dropped %d lines", doc.doc_id, len(tokens), len(dropped))
    return TokenizedDoc(doc.doc_id, tokens, spans, boxes, (doc.width, doc.height), tuple(dropped))
