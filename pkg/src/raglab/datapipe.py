"""Corpus construction: cleaning, MinHash dedup, quality filtering, mixing,
and training-set emission.

File formats are line-oriented: documents.jsonl / qda.jsonl / triples.jsonl
hold one JSON object per line, qrels.txt holds query_id<TAB>doc_id<TAB>grade
lines, queries.txt holds query_id<TAB>split<TAB>text lines.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .retriever import RetrievalTriple

_TAG_RE = re.compile(r"<[^>]*>")
_WS_RE = re.compile(r"\s+")

DEFAULT_MIN_LENGTH = 200
DEFAULT_BLOCKLIST = ("fuck", "shit", "porn", "viagra", "casino bonus")
DEFAULT_DEDUP_THRESHOLD = 0.85
DEFAULT_QUALITY_WEIGHTS = {
    "share_count": 1.0,
    "like_count": 0.5,
    "collect_count": 1.0,
    "comment_count": 0.5,
}
DEFAULT_QUALITY_THRESHOLD = 2
MINHASH_P = 128
SHINGLE_W = 5


@dataclass
class DocumentRecord:
    """One corpus document with engagement counters."""

    id: str
    title: str
    contents: str
    type_one: str = ""
    type_two: str = ""
    cnt_details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("document id must be non-empty")
        for key, value in self.cnt_details.items():
            if isinstance(value, (int, float)) and value < 0:
                raise ValueError(f"count {key!r} must be >= 0")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "contents": self.contents,
            "type_one": self.type_one,
            "type_two": self.type_two,
            "cnt_details": dict(self.cnt_details),
        }

    @classmethod
    def from_json(cls, row: Mapping) -> "DocumentRecord":
        return cls(
            id=row["id"],
            title=row.get("title", ""),
            contents=row["contents"],
            type_one=row.get("type_one", ""),
            type_two=row.get("type_two", ""),
            cnt_details=dict(row.get("cnt_details", {})),
        )


# ------------------------------------------------------------------- file io


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_jsonl(path: str, rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_documents(path: str) -> list[DocumentRecord]:
    docs = [DocumentRecord.from_json(row) for row in read_jsonl(path)]
    seen: set[str] = set()
    for doc in docs:
        if doc.id in seen:
            raise ValueError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)
    return docs


def write_documents(path: str, docs: Iterable[DocumentRecord]) -> None:
    write_jsonl(path, (d.to_json() for d in docs))


def read_triples(path: str) -> list[RetrievalTriple]:
    return [
        RetrievalTriple(
            query=row["query"],
            positive=row["positive"],
            negatives=tuple(row.get("negatives", ())),
        )
        for row in read_jsonl(path)
    ]


def write_triples(path: str, triples: Iterable[RetrievalTriple]) -> None:
    write_jsonl(
        path,
        (
            {"query": t.query, "positive": t.positive, "negatives": list(t.negatives)}
            for t in triples
        ),
    )


def read_qrels(path: str) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"qrels line {line_no}: expected qid<TAB>doc<TAB>grade")
            qid, doc_id, grade = parts
            g = int(grade)
            if g not in (0, 1, 2):
                raise ValueError(f"qrels line {line_no}: grade must be 0, 1 or 2")
            out.setdefault(qid, {})[doc_id] = g
    return out


def write_qrels(path: str, qrels: Mapping[str, Mapping[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid}\t{doc_id}\t{qrels[qid][doc_id]}\n")


def read_queries(path: str) -> list[tuple[str, str, str]]:
    """(query_id, split, text) rows; split is e.g. "train" or "heldout"."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"queries line {line_no}: expected qid<TAB>split<TAB>text")
            out.append((parts[0], parts[1], parts[2]))
    return out


def write_queries(path: str, rows: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, split, text in rows:
            fh.write(f"{qid}\t{split}\t{text}\n")


# ------------------------------------------------------------------- cleaning


@dataclass(frozen=True)
class CleanResult:
    text: str | None
    reason: str | None

    @property
    def kept(self) -> bool:
        return self.text is not None


def clean(
    raw: str,
    blocklist: Sequence[str] = DEFAULT_BLOCKLIST,
    min_length: int = DEFAULT_MIN_LENGTH,
) -> CleanResult:
    """Strip markup, apply the blocklist, reject short leftovers.

    Rejection is a result, not an error; reason is "blocked_term" or
    "too_short".
    """
    text = _TAG_RE.sub(" ", raw)
    text = _WS_RE.sub(" ", text).strip()
    lowered = text.lower()
    for term in blocklist:
        if term.lower() in lowered:
            return CleanResult(text=None, reason="blocked_term")
    if len(text) < min_length:
        return CleanResult(text=None, reason="too_short")
    return CleanResult(text=text, reason=None)


# -------------------------------------------------------------------- minhash


def _shingle_hash(shingle: str) -> int:
    digest = hashlib.blake2b(shingle.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _permutation_params(p: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    # odd multipliers keep the multiply-shift map a bijection on 64-bit words
    a = rng.integers(0, 2**63, size=p, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
    b = rng.integers(0, 2**64, size=p, dtype=np.uint64)
    return a, b


def minhash(
    tokens: Sequence[str],
    p: int = MINHASH_P,
    w: int = SHINGLE_W,
    seed: int = 0,
) -> np.ndarray:
    """Per-permutation minima over w-shingle hashes; shape (p,), dtype uint64."""
    if p < 1 or w < 1:
        raise ValueError("p and w must be >= 1")
    if len(tokens) < w:
        raise ValueError(f"need at least {w} tokens to form one shingle")
    shingles = {" ".join(tokens[i : i + w]) for i in range(len(tokens) - w + 1)}
    base = np.array(sorted(_shingle_hash(s) for s in shingles), dtype=np.uint64)
    a, b = _permutation_params(p, seed)
    with np.errstate(over="ignore"):
        permuted = a[:, None] * base[None, :] + b[:, None]
    return permuted.min(axis=1)


def est_jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
    """Fraction of matching signature components."""
    if sig_a.shape != sig_b.shape:
        raise ValueError("signatures must have equal length")
    return float(np.mean(sig_a == sig_b))


def _doc_tokens(doc: DocumentRecord) -> list[str]:
    return f"{doc.title} {doc.contents}".split()


@dataclass(frozen=True)
class DedupResult:
    kept: list[DocumentRecord]
    clusters: dict[str, list[str]]  # keeper id -> all member ids, keeper first
    dropped: dict[str, str]  # dropped id -> keeper id


def dedup(
    docs: Sequence[DocumentRecord],
    threshold: float = DEFAULT_DEDUP_THRESHOLD,
    p: int = MINHASH_P,
    w: int = SHINGLE_W,
    seed: int = 0,
) -> DedupResult:
    """Greedy first-wins near-duplicate removal in input order.

    A doc is dropped when its estimated Jaccard against any already-kept doc
    reaches the threshold. Kept docs are therefore pairwise below threshold,
    which makes the pass idempotent.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    kept: list[DocumentRecord] = []
    kept_sigs: list[np.ndarray] = []
    clusters: dict[str, list[str]] = {}
    dropped: dict[str, str] = {}
    for doc in docs:
        sig = minhash(_doc_tokens(doc), p=p, w=w, seed=seed)
        keeper = None
        for other, other_sig in zip(kept, kept_sigs):
            if est_jaccard(sig, other_sig) >= threshold:
                keeper = other.id
                break
        if keeper is None:
            kept.append(doc)
            kept_sigs.append(sig)
            clusters[doc.id] = [doc.id]
        else:
            clusters[keeper].append(doc.id)
            dropped[doc.id] = keeper
    return DedupResult(kept=kept, clusters=clusters, dropped=dropped)


# ------------------------------------------------------------- quality filter


def quality_score(
    cnt_details: Mapping[str, float],
    weights: Mapping[str, float] = DEFAULT_QUALITY_WEIGHTS,
) -> int:
    """Fallback score: floor of the log1p-weighted engagement sum."""
    total = 0.0
    for key, weight in weights.items():
        count = cnt_details.get(key, 0)
        if count < 0:
            raise ValueError(f"count {key!r} must be >= 0")
        total += weight * math.log1p(count)
    return int(math.floor(total))


def effective_quality(
    doc: DocumentRecord,
    weights: Mapping[str, float] = DEFAULT_QUALITY_WEIGHTS,
) -> int:
    """The stored quality_score when present, else the fallback formula."""
    stored = doc.cnt_details.get("quality_score")
    if stored is not None:
        if stored < 0:
            raise ValueError("quality_score must be >= 0")
        return int(stored)
    return quality_score(doc.cnt_details, weights)


def quality_filter(
    docs: Sequence[DocumentRecord],
    threshold: int = DEFAULT_QUALITY_THRESHOLD,
    weights: Mapping[str, float] = DEFAULT_QUALITY_WEIGHTS,
) -> list[DocumentRecord]:
    """Keep docs whose (stored or recomputed) quality score reaches threshold."""
    return [doc for doc in docs if effective_quality(doc, weights) >= threshold]


# ----------------------------------------------------------------------- mix


def _apportion(weights: Mapping[str, float], n_total: int) -> dict[str, int]:
    """Largest-remainder apportionment; deterministic name-order tie-break."""
    total_w = sum(weights.values())
    quotas = {name: n_total * w / total_w for name, w in weights.items()}
    counts = {name: int(math.floor(q)) for name, q in quotas.items()}
    remaining = n_total - sum(counts.values())
    by_frac = sorted(weights, key=lambda name: (-(quotas[name] - counts[name]), name))
    for name in by_frac[:remaining]:
        counts[name] += 1
    return counts


def mix(
    sources: Mapping[str, Sequence[DocumentRecord]],
    weights: Mapping[str, float],
    n_total: int,
    seed: int,
) -> tuple[list[DocumentRecord], dict]:
    """Seeded proportional interleave of named document streams.

    Realized per-source counts are within 1 of the exact proportional target;
    the same seed reproduces the output order exactly.
    """
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    missing = set(sources) - set(weights)
    if missing:
        raise ValueError(f"weights missing for sources: {sorted(missing)}")
    for name, w in weights.items():
        if name not in sources:
            raise ValueError(f"weight given for unknown source {name!r}")
        if w <= 0:
            raise ValueError(f"weight for {name!r} must be positive")
        if not sources[name]:
            raise ValueError(f"source {name!r} is empty but has positive weight")
    counts = _apportion(weights, n_total)
    for name, count in counts.items():
        if count > len(sources[name]):
            raise ValueError(
                f"source {name!r} has {len(sources[name])} docs, needs {count}"
            )
    combined: list[DocumentRecord] = []
    for name in sorted(sources):
        combined.extend(sources[name][: counts[name]])
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(combined))
    mixed = [combined[i] for i in order]
    manifest = {
        "seed": seed,
        "n_total": n_total,
        "weights": {name: float(w) for name, w in sorted(weights.items())},
        "per_source": {name: counts[name] for name in sorted(counts)},
    }
    return mixed, manifest


# ------------------------------------------------------------ triple emission


def emit_triples(
    qda_rows: Sequence[Mapping],
    corpus_ids: Iterable[str],
    mined_negatives: Mapping[str, Sequence[str]] | None = None,
    general_triples: Sequence[RetrievalTriple] = (),
    general_per_domain: float = 0.0,
    seed: int = 0,
) -> tuple[list[RetrievalTriple], dict]:
    """Turn supervision rows into retrieval triples, appending general-domain
    triples at the configured ratio.

    Rows whose doc_id is missing from the corpus are reported and skipped; the
    run continues. Negative lists come from mined_negatives keyed by query
    text and may be empty (random-negative warmup handles that case).
    """
    if general_per_domain < 0:
        raise ValueError("general_per_domain must be >= 0")
    ids = set(corpus_ids)
    mined = mined_negatives or {}
    triples: list[RetrievalTriple] = []
    errors: list[dict] = []
    for i, row in enumerate(qda_rows):
        question = row["question"]
        doc_id = row["doc_id"]
        if doc_id not in ids:
            errors.append({"row": i, "doc_id": doc_id, "reason": "dangling doc_id"})
            continue
        negs = tuple(n for n in mined.get(question, ()) if n in ids and n != doc_id)
        triples.append(RetrievalTriple(query=question, positive=doc_id, negatives=negs))
    n_domain = len(triples)
    n_general = int(round(general_per_domain * n_domain))
    if n_general > len(general_triples):
        raise ValueError(
            f"need {n_general} general triples, only {len(general_triples)} available"
        )
    rng = np.random.default_rng(seed)
    if n_general:
        chosen = sorted(rng.choice(len(general_triples), size=n_general, replace=False))
        triples.extend(general_triples[i] for i in chosen)
    manifest = {
        "seed": seed,
        "n_domain": n_domain,
        "n_general": n_general,
        "general_per_domain": general_per_domain,
        "errors": errors,
    }
    return triples, manifest


# -------------------------------------------------- general-domain stand-in


_GEN_TOPICS = (
    ("the harbor museum", "a restored lighthouse exhibit"),
    ("the city library", "a new reading room"),
    ("the botanical garden", "a seasonal orchid display"),
    ("the river trail", "a resurfaced cycling path"),
    ("the old observatory", "a public telescope night"),
    ("the market square", "a weekend craft fair"),
    ("the concert hall", "a chamber music series"),
    ("the science center", "a hands-on weather lab"),
)

_GEN_VERBS = ("announced", "opened", "described", "documented", "reviewed", "extended")


def synth_general(n: int, seed: int) -> list[DocumentRecord]:
    """Seeded templated general-domain documents for corpus mixing.

    Stands in for external general corpora; content is generic prose with no
    product facts, long enough to pass the default cleaning threshold.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        place, thing = _GEN_TOPICS[rng.integers(len(_GEN_TOPICS))]
        verb = _GEN_VERBS[rng.integers(len(_GEN_VERBS))]
        year = 2010 + int(rng.integers(15))
        visitors = 100 + int(rng.integers(900))
        text = (
            f"In {year} {place} {verb} {thing}. Staff noted that about {visitors} "
            f"visitors attended during the first week, and volunteers kept notes on "
            f"what worked. A short report summarized the schedule, the layout of the "
            f"rooms, and the questions people asked most often."
        )
        docs.append(
            DocumentRecord(
                id=f"gen-{i:05d}",
                title=f"Notes from {place}",
                contents=text,
                type_one="general",
                cnt_details={"quality_score": 2 + int(rng.integers(3))},
            )
        )
    return docs
