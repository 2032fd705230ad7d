"""Retrieval, generation, and agreement metrics.

All metrics are plain functions over python sequences; nothing here touches
the model. Graded relevance uses integer grades {0, 1, 2}.
"""

from __future__ import annotations

import json
import math
import time
from collections import Counter
from typing import Callable, Mapping, Sequence

import numpy as np

_BLEU_EPS = 1e-9


def _ranked_ids(ranked: Sequence) -> list[str]:
    """Accept either bare doc ids or (doc_id, score) pairs."""
    out = []
    for item in ranked:
        if isinstance(item, str):
            out.append(item)
        else:
            out.append(item[0])
    if len(set(out)) != len(out):
        raise ValueError("ranking contains duplicate doc ids")
    return out


def _check_grades(grades: Mapping[str, int]) -> None:
    for doc_id, g in grades.items():
        if g not in (0, 1, 2):
            raise ValueError(f"grade for {doc_id!r} must be 0, 1 or 2, got {g!r}")


def ndcg_at(ranked: Sequence, grades: Mapping[str, int], n: int) -> float:
    """DCG@n / IDCG@n with gain 2^grade - 1 and discount log2(rank + 1).

    The ideal ranking orders all judged docs by grade; a query with no
    relevant doc at all has an undefined score and is an error.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_grades(grades)
    ideal = sorted(grades.values(), reverse=True)
    if not ideal or ideal[0] == 0:
        raise ValueError("query has no relevant documents; nDCG is undefined")
    ids = _ranked_ids(ranked)
    dcg = 0.0
    for i, doc_id in enumerate(ids[:n]):
        gain = (1 << grades.get(doc_id, 0)) - 1
        dcg += gain / math.log2(i + 2)
    idcg = 0.0
    for i, g in enumerate(ideal[:n]):
        idcg += ((1 << g) - 1) / math.log2(i + 2)
    return dcg / idcg


def hit_at(ranked: Sequence, grades: Mapping[str, int], n: int) -> float:
    """1.0 if any of the first n docs has grade >= 1, else 0.0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_grades(grades)
    for doc_id in _ranked_ids(ranked)[:n]:
        if grades.get(doc_id, 0) >= 1:
            return 1.0
    return 0.0


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu3(candidate: str, reference: str, eps: float = _BLEU_EPS) -> float:
    """Whitespace-token BLEU with n up to 3, additive-epsilon smoothing,
    and the standard brevity penalty exp(1 - r/c) for c < r."""
    cand = candidate.split()
    ref = reference.split()
    if not cand or not ref:
        return 0.0
    log_p = 0.0
    for n in range(1, 4):
        cand_counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        total = max(len(cand) - n + 1, 0)
        log_p += math.log((clipped + eps) / (total + eps))
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_p / 3.0)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F1 over whitespace tokens (beta = 1)."""
    cand = candidate.split()
    ref = reference.split()
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2.0 * p * r / (p + r)


def kendall_tau(order_a: Sequence, order_b: Sequence) -> float:
    """Tau-a rank agreement between two orderings of the same item set:
    (concordant - discordant) / (n choose 2)."""
    if len(order_a) != len(order_b) or set(order_a) != set(order_b):
        raise ValueError("orderings must cover the same item set")
    if len(set(order_a)) != len(order_a):
        raise ValueError("orderings must not repeat items")
    n = len(order_a)
    if n < 2:
        raise ValueError("need at least two items to compare orderings")
    pos_b = {item: i for i, item in enumerate(order_b)}
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            d = pos_b[order_a[i]] - pos_b[order_a[j]]
            if d < 0:
                concordant += 1
            else:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of two equal-length score lists."""
    if len(xs) != len(ys):
        raise ValueError("score lists must have equal length")
    if len(xs) < 2:
        raise ValueError("need at least two pairs")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation is undefined for a constant list")
    return float(((x - x.mean()) * (y - y.mean())).mean() / (sx * sy))


def gap_score(scores: Mapping[str, float], gold_id: str) -> float:
    """sim(query, gold doc) minus the best non-gold similarity; in [-2, 2]."""
    if gold_id not in scores:
        raise KeyError(f"gold doc {gold_id!r} is not among the scored docs")
    others = [s for doc_id, s in scores.items() if doc_id != gold_id]
    if not others:
        raise ValueError("gap needs at least one non-gold doc")
    return float(scores[gold_id] - max(others))


def gap_histogram(gaps: Sequence[float], bins: int = 20) -> dict:
    """Fixed-range [-2, 2] histogram plus summary stats."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    arr = np.asarray(gaps, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no gap values")
    if arr.min() < -2.0 or arr.max() > 2.0:
        raise ValueError("gap values must lie in [-2, 2]")
    counts, edges = np.histogram(arr, bins=bins, range=(-2.0, 2.0))
    return {
        "bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
        "mean": float(arr.mean()),
        "mean_abs": float(np.abs(arr).mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "n": int(arr.size),
    }


def read_judge_scores(path: str) -> dict[str, float]:
    """Scores from an external judge, one JSON object {"qid", "score"} per line.

    Judges (human or model-based) run out of process; this only ingests their
    output file.
    """
    out: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "qid" not in row or "score" not in row:
                raise ValueError(f"judge line {line_no} lacks qid/score")
            if row["qid"] in out:
                raise ValueError(f"duplicate judge score for {row['qid']!r}")
            out[row["qid"]] = float(row["score"])
    return out


def exact_match(candidate: str, reference: str) -> float:
    """1.0 when the strings match after whitespace normalization."""
    return 1.0 if " ".join(candidate.split()) == " ".join(reference.split()) else 0.0


def time_queries(run_query: Callable[[str], object], queries: Sequence[str]) -> dict:
    """Wall-clock per-query latency summary in milliseconds."""
    times = []
    for q in queries:
        start = time.perf_counter()
        run_query(q)
        times.append((time.perf_counter() - start) * 1e3)
    arr = np.asarray(times, dtype=np.float64)
    return {
        "n_queries": int(arr.size),
        "mean_ms": float(arr.mean()),
        "p50_ms": float(np.percentile(arr, 50)),
        "max_ms": float(arr.max()),
    }


def space_time_report(rows: Sequence[Mapping]) -> dict:
    """Assemble the per-regime space/time comparison table.

    Each row carries regime, parameter and byte counts, and optionally a
    timing summary; timing keys are omitted from the output row when the row
    timed zero queries.
    """
    if not rows:
        raise ValueError("no regimes to report")
    out_rows = []
    for row in rows:
        entry = {
            "regime": row["regime"],
            "total_parameters": int(row["total_parameters"]),
            "checkpoint_bytes": int(row["checkpoint_bytes"]),
            "index_bytes": int(row.get("index_bytes", 0)),
        }
        timing = row.get("timing")
        if timing and timing.get("n_queries", 0) > 0:
            entry["timing"] = dict(timing)
        out_rows.append(entry)
    base = min(r["total_parameters"] for r in out_rows)
    for entry in out_rows:
        entry["parameter_ratio"] = entry["total_parameters"] / base
    return {"rows": out_rows}
