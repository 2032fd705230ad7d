"""EOS-token sentence embeddings, InfoNCE training structure, hard-negative mining.

Queries and documents are encoded by the shared backbone (plus the retrieval
adapter); the sentence embedding is the final-layer hidden state at the
appended EOS token, L2-normalized. Documents are encoded as
[BOS] title [SEP] contents [EOS] with the contents tail-truncated to fit the
context window; queries as [BOS] text [EOS].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import index as vindex
from .autograd import Tensor
from .backbone import BackboneParams, hidden_states, pad_batch
from .tokenizer import BOS, EOS, SEP, tokenize

MAX_STORED_NEGATIVES = 30
_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class RetrievalTriple:
    """A query, its positive doc id, and up to 30 distinct hard-negative doc ids."""

    query: str
    positive: str
    negatives: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.query:
            raise ValueError("query must be non-empty")
        if not self.positive:
            raise ValueError("positive doc id must be non-empty")
        if self.positive in self.negatives:
            raise ValueError("positive doc id must not appear among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("negative doc ids must be distinct")
        if len(self.negatives) > MAX_STORED_NEGATIVES:
            raise ValueError(f"at most {MAX_STORED_NEGATIVES} negatives may be stored")


@dataclass(frozen=True)
class InBatchSample:
    """One query's contrastive instance: positive id plus its negative pool."""

    query: str
    positive: str
    pool: tuple[str, ...]


# ------------------------------------------------------------- input encoding


def query_token_ids(text: str, max_seq_len: int) -> list[int]:
    """[BOS] text [EOS]; the text is tail-truncated to fit."""
    if not text:
        raise ValueError("text must be non-empty")
    body = tokenize(text, max_len=max_seq_len - 2).ids
    return [BOS, *body, EOS]


def doc_token_ids(title: str, contents: str, max_seq_len: int) -> list[int]:
    """[BOS] title [SEP] contents [EOS]; contents tail-truncated first, then title."""
    if not title and not contents:
        raise ValueError("document must have a title or contents")
    title_ids = list(tokenize(title).ids)
    budget = max_seq_len - 4  # BOS, SEP, EOS and at least one content byte
    if len(title_ids) > budget:
        title_ids = title_ids[:budget]
    room = max_seq_len - 3 - len(title_ids)
    contents_ids = list(tokenize(contents, max_len=room).ids)
    return [BOS, *title_ids, SEP, *contents_ids, EOS]


# ----------------------------------------------------------------- embeddings


def embed_training_batch(params: BackboneParams, adapter, seqs: list[list[int]]) -> Tensor:
    """Embeddings (N, d) with the graph attached, rows L2-normalized.

    The EOS position of each sequence is its last real token; right padding
    cannot reach it under causal attention.
    """
    ids, lengths = pad_batch(seqs)
    h = hidden_states(params, ids, adapter)
    e = ag.take_positions(h, lengths - 1)
    norm = ag.sqrt(ag.tsum(ag.mul(e, e), axis=-1, keepdims=True))
    return ag.div(e, norm)


def embed_ids_batch(params: BackboneParams, adapter, seqs: list[list[int]], chunk: int = 64) -> np.ndarray:
    """Inference-only batched embeddings (N, d), order-stable in input order."""
    out = np.empty((len(seqs), params.config.d_model))
    with ag.no_grad():
        for start in range(0, len(seqs), chunk):
            part = seqs[start : start + chunk]
            out[start : start + len(part)] = embed_training_batch(params, adapter, part).data
    return out


def embed_query(params: BackboneParams, adapter, text: str) -> np.ndarray:
    """Unit-norm query embedding (d,)."""
    ids = query_token_ids(text, params.config.max_seq_len)
    return embed_ids_batch(params, adapter, [ids])[0]


def embed_document(params: BackboneParams, adapter, title: str, contents: str) -> np.ndarray:
    """Unit-norm document embedding (d,)."""
    ids = doc_token_ids(title, contents, params.config.max_seq_len)
    return embed_ids_batch(params, adapter, [ids])[0]


def sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two unit vectors, i.e. their dot product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("embeddings must be 1-D and of equal dimension")
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
            raise ValueError("sim requires unit-norm inputs")
    return float(a @ b)


# -------------------------------------------------------------------- InfoNCE


def infonce_loss(sim_pos: float, sim_negs: Sequence[float], temperature: float = 0.05) -> float:
    """-log softmax([pos; negs] / temperature) at the positive index.

    Computed with a stable log-sum-exp; always > 0 for a non-empty negative
    list.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    negs = np.asarray(sim_negs, dtype=np.float64)
    if negs.size == 0:
        raise ValueError("at least one negative score is required")
    scores = np.concatenate(([float(sim_pos)], negs)) / temperature
    m = scores.max()
    lse = m + np.log(np.exp(scores - m).sum())
    return float(lse - scores[0])


def contrastive_batch_loss(
    params: BackboneParams,
    adapter,
    query_seqs: list[list[int]],
    doc_seqs: list[list[int]],
    pos_cols: Sequence[int],
    pool_cols: Sequence[Sequence[int]],
    temperature: float,
) -> Tensor:
    """Mean InfoNCE over the batch, with the graph attached.

    doc_seqs holds each unique document of the batch once; pos_cols[i] and
    pool_cols[i] index into it for query i's positive and negative pool.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n_q = len(query_seqs)
    if n_q == 0:
        raise ValueError("empty batch")
    emb = embed_training_batch(params, adapter, list(query_seqs) + list(doc_seqs))
    inv_t = ag.constant(1.0 / temperature)
    total = None
    for i in range(n_q):
        cols = [pos_cols[i], *pool_cols[i]]
        if len(cols) < 2:
            raise ValueError("every query needs at least one negative")
        q_i = ag.take(emb, np.asarray([i]))
        d_i = ag.take(emb, np.asarray(cols) + n_q)
        scores = ag.mul(ag.matmul(q_i, ag.transpose(d_i, (1, 0))), inv_t)
        logp = ag.log_softmax(ag.reshape(scores, (len(cols),)))
        loss_i = ag.neg(ag.select_last(logp, np.asarray(0)))
        total = loss_i if total is None else ag.add(total, loss_i)
    return ag.mul(total, ag.constant(1.0 / n_q))


# -------------------------------------------------------- batch pool assembly


def build_inbatch(
    batch: Sequence[RetrievalTriple],
    m: int,
    rng: np.random.Generator,
) -> list[InBatchSample]:
    """Per-query contrastive pools from a batch of triples.

    Each triple contributes m sampled (without replacement) negatives from its
    stored list; a query's pool is its own sampled negatives plus every other
    sample's positive and sampled negatives. The query's own positive is
    excluded; a pool entry colliding with it is dropped with a warning.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    if len(batch) < 2 and m < 1:
        raise ValueError("need batch size >= 2 or m >= 1 to form a pool")
    sampled: list[list[str]] = []
    for t in batch:
        stored = list(t.negatives)
        if len(stored) > m:
            picked = [stored[j] for j in rng.choice(len(stored), size=m, replace=False)]
        else:
            picked = stored
        sampled.append(picked)

    out: list[InBatchSample] = []
    for i, t in enumerate(batch):
        pool: list[str] = []
        seen: set[str] = set()

        def _offer(doc_id: str, own: bool) -> None:
            if doc_id == t.positive:
                if not own:
                    warnings.warn(
                        f"pool entry {doc_id!r} collides with the positive of query {t.query!r}; dropped",
                        RuntimeWarning,
                        stacklevel=3,
                    )
                return
            if doc_id not in seen:
                seen.add(doc_id)
                pool.append(doc_id)

        for doc_id in sampled[i]:
            _offer(doc_id, own=True)
        for j, other in enumerate(batch):
            if j == i:
                continue
            _offer(other.positive, own=False)
            for doc_id in sampled[j]:
                _offer(doc_id, own=False)
        out.append(InBatchSample(query=t.query, positive=t.positive, pool=tuple(pool)))
    return out


# --------------------------------------------------------------------- mining


def mine_hard_negatives(
    embed_query_fn: Callable[[str], np.ndarray],
    corpus_index: "vindex.VectorIndex",
    triples: Sequence[RetrievalTriple],
    limit: int = 30,
) -> list[RetrievalTriple]:
    """Top-ranked incorrect docs per query: full ranking minus the positive,
    truncated at `limit`, in rank order."""
    if limit < 0:
        raise ValueError("limit must be >= 0")
    mined: list[RetrievalTriple] = []
    for t in triples:
        if t.positive not in corpus_index:
            raise KeyError(f"positive doc {t.positive!r} missing from the corpus index")
        ranked = vindex.top_k(corpus_index, embed_query_fn(t.query), k=min(len(corpus_index), limit + 1))
        negs = tuple(doc_id for doc_id, _ in ranked if doc_id != t.positive)[:limit]
        mined.append(RetrievalTriple(query=t.query, positive=t.positive, negatives=negs))
    return mined
