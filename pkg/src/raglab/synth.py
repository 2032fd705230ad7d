"""Seeded synthetic product-QA benchmark.

Generates a small, fully memorizable corpus: each document is a templated
product article whose contents are attribute-value fact sentences, each
question asks for one fact and names both the product and its category, and
the answer is the fact value verbatim. Every fact sentence
restates the product name, so a left-to-right model has to keep the product
identity in its hidden state at every sentence boundary rather than only near
the title; the category word shared between question and title gives graded
relevance (same-category distractors) a learnable signal too. The vocabulary is length-budgeted so a
single-document generation prompt always fits the default 256-token context
window.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import (
    DocumentRecord,
    write_documents,
    write_jsonl,
    write_qrels,
    write_queries,
)

_ADJECTIVES = (
    "Aurora", "Zephyr", "Nimbus", "Vortex", "Quasar", "Falcon", "Orion",
    "Pulsar", "Ember", "Cobalt", "Mistral", "Onyx", "Kestrel", "Juniper",
    "Saffron", "Indigo", "Marlin", "Tundra", "Cinder", "Halcyon", "Borealis",
    "Veltro", "Lyric", "Sable",
)
_MODELS = (
    "X3", "S9", "M2", "P7", "L4", "N2", "G3", "V8",
    "U6", "K5", "A5", "R9", "T6", "D4", "F1", "W7",
)
_CATEGORIES = (
    "phone", "laptop", "tablet", "camera", "smartwatch", "headphones",
    "speaker", "charger", "router", "drone", "scooter", "projector",
)

# attribute name -> (low, high, suffix); value = str(int) + suffix
# ranges are sized so unique draws cannot exhaust at the default corpus size
_ATTRIBUTES = {
    "battery capacity": (1000, 9999, "mAh"),
    "screen size": (40, 139, "mm"),
    "weight": (100, 999, "g"),
    "storage space": (100, 999, "GB"),
    "charge time": (30, 199, "min"),
    "warranty term": (12, 199, " months"),
    "price tag": (100, 999, " euro"),
    "release year": (1970, 2025, ""),
    "zoom range": (2, 90, "x"),
    "refresh rate": (60, 240, "Hz"),
    "memory size": (4, 64, "GB"),
    "drive range": (100, 900, "km"),
    "motor power": (250, 999, "W"),
    "beam distance": (50, 300, "m"),
    "run time": (2, 99, " hours"),
    "sensor count": (1, 99, ""),
    "port count": (1, 99, ""),
    "signal reach": (10, 99, "m"),
    "top speed": (20, 45, "kmh"),
}

_CATEGORY_ATTRS = {
    "phone": ("battery capacity", "screen size", "weight", "storage space", "charge time", "warranty term"),
    "laptop": ("battery capacity", "screen size", "weight", "memory size", "price tag", "release year"),
    "tablet": ("battery capacity", "screen size", "weight", "storage space", "refresh rate", "warranty term"),
    "camera": ("zoom range", "sensor count", "weight", "battery capacity", "price tag", "release year"),
    "smartwatch": ("battery capacity", "screen size", "weight", "charge time", "run time", "warranty term"),
    "headphones": ("battery capacity", "weight", "charge time", "run time", "price tag", "warranty term"),
    "speaker": ("battery capacity", "weight", "motor power", "run time", "price tag", "signal reach"),
    "charger": ("motor power", "weight", "port count", "charge time", "price tag", "warranty term"),
    "router": ("port count", "signal reach", "weight", "price tag", "release year", "warranty term"),
    "drone": ("battery capacity", "weight", "zoom range", "drive range", "run time", "price tag"),
    "scooter": ("battery capacity", "weight", "motor power", "drive range", "top speed", "warranty term"),
    "projector": ("beam distance", "weight", "refresh rate", "price tag", "release year", "warranty term"),
}

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class SynthSpec:
    n_docs: int = 200
    n_facts_per_doc: int = 3
    heldout_per_doc: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_docs < 1:
            raise ValueError("n_docs must be >= 1")
        if not 1 <= self.n_facts_per_doc <= 6:
            raise ValueError("n_facts_per_doc must be in 1..6 (attributes per category)")
        if not 0 <= self.heldout_per_doc < self.n_facts_per_doc:
            raise ValueError("heldout_per_doc must leave at least one training question")


@dataclass(frozen=True)
class SynthData:
    docs: list[DocumentRecord]
    queries: list[tuple[str, str, str]]  # (qid, split, text), all splits
    qda_rows: list[dict]  # training split only
    qrels: dict[str, dict[str, int]]
    gold: dict[str, str]  # qid -> gold doc id
    answers: dict[str, str]  # qid -> answer, all splits
    categories: dict[str, str]  # doc id -> category


def _fact_sentence(entity: str, attribute: str, value: str) -> str:
    return f"{entity} {attribute}: {value}."


def _question_text(attribute: str, entity: str, category: str) -> str:
    # category then entity: the name sits next to the end of the question,
    # where an end-position embedding sees it most directly
    return f"What is the {attribute} of the {category} {entity}?"


def generate(spec: SynthSpec, out_dir: str | None = None) -> SynthData:
    """Build the benchmark; optionally write the four dataset files."""
    rng = np.random.default_rng(spec.seed)

    combos = [(a, m) for a in _ADJECTIVES for m in _MODELS]
    if spec.n_docs > len(combos):
        raise ValueError("vocabulary too small for unique entity names")
    entity_order = rng.permutation(len(combos))
    cat_order = [str(c) for c in rng.permutation(np.asarray(_CATEGORIES))]

    used_values: dict[str, set[str]] = {name: set() for name in _ATTRIBUTES}

    def _draw_value(attribute: str) -> str:
        low, high, suffix = _ATTRIBUTES[attribute]
        for _ in range(1000):
            value = f"{int(rng.integers(low, high + 1))}{suffix}"
            if value not in used_values[attribute]:
                used_values[attribute].add(value)
                return value
        raise ValueError(f"vocabulary too small for unique {attribute!r} values")

    docs: list[DocumentRecord] = []
    queries: list[tuple[str, str, str]] = []
    qda_rows: list[dict] = []
    qrels: dict[str, dict[str, int]] = {}
    gold: dict[str, str] = {}
    answers: dict[str, str] = {}
    categories: dict[str, str] = {}
    doc_questions: list[list[tuple[str, str, str]]] = []  # per doc: (qid, text, answer)

    for d in range(spec.n_docs):
        adj, model = combos[entity_order[d]]
        entity = f"{adj} {model}"
        category = cat_order[d % len(cat_order)]
        attrs = _CATEGORY_ATTRS[category]
        picked = [attrs[j] for j in rng.choice(len(attrs), size=spec.n_facts_per_doc, replace=False)]
        facts = [(attribute, _draw_value(attribute)) for attribute in picked]
        contents = " ".join(_fact_sentence(entity, a, v) for a, v in facts)
        doc_id = f"doc-{d:04d}"
        docs.append(
            DocumentRecord(
                id=doc_id,
                title=f"{entity} {category}",
                contents=contents,
                type_one=category,
                cnt_details={"quality_score": 3},
            )
        )
        categories[doc_id] = category
        rows = []
        for f, (attribute, value) in enumerate(facts):
            qid = f"q-{d:04d}-{f}"
            rows.append((qid, _question_text(attribute, entity, category), value))
        doc_questions.append(rows)

    by_category: dict[str, list[str]] = {}
    for doc in docs:
        by_category.setdefault(categories[doc.id], []).append(doc.id)

    for d, rows in enumerate(doc_questions):
        doc_id = docs[d].id
        heldout_idx = set(
            int(j) for j in rng.choice(len(rows), size=spec.heldout_per_doc, replace=False)
        )
        for f, (qid, text, answer) in enumerate(rows):
            split = "heldout" if f in heldout_idx else "train"
            queries.append((qid, split, text))
            gold[qid] = doc_id
            answers[qid] = answer
            grades = {other: 1 for other in by_category[categories[doc_id]] if other != doc_id}
            grades[doc_id] = 2
            qrels[qid] = grades
            if split == "train":
                qda_rows.append({"question": text, "doc_id": doc_id, "answer": answer})

    data = SynthData(
        docs=docs,
        queries=queries,
        qda_rows=qda_rows,
        qrels=qrels,
        gold=gold,
        answers=answers,
        categories=categories,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_documents(str(out / "documents.jsonl"), data.docs)
        write_jsonl(str(out / "qda.jsonl"), data.qda_rows)
        write_qrels(str(out / "qrels.txt"), data.qrels)
        write_queries(str(out / "queries.txt"), data.queries)
    return data


def _words(text: str) -> set[str]:
    return set(_WORD_RE.findall(text.lower()))


def lexical_rank(data: SynthData, question: str) -> list[str]:
    """Rank doc ids by word-overlap with the question, ties by ascending id.

    A sanity upper bound: on generated data the gold doc always wins because
    only it shares both entity words with its questions.
    """
    q_words = _words(question)
    scored = []
    for doc in data.docs:
        overlap = len(q_words & _words(f"{doc.title} {doc.contents}"))
        scored.append((-overlap, doc.id))
    return [doc_id for _, doc_id in sorted(scored)]


def lexical_hit_at_1(data: SynthData) -> float:
    """Fraction of all questions whose gold doc tops the lexical ranking."""
    hits = 0
    for qid, _, text in data.queries:
        if lexical_rank(data, text)[0] == data.gold[qid]:
            hits += 1
    return hits / len(data.queries)
