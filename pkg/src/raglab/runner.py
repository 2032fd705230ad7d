"""Stage runners: CPT, retrieval training, instruction tuning, the
fully-shared baseline, index building, inference, and evaluation.

Each run owns its output directory through a lock file and leaves a
manifest.json recording config hash, input hashes, loss curves, checkpoint
hashes, and wall clock. Randomness comes from purpose-keyed streams, so a
stage's draws are independent of which other stages ran before it, and the
fully-shared baseline consumes the retrieval stream exactly as a single-phase
retrieval run does (that makes its lam=0 case reproduce retrieval-only
training bit for bit).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
import warnings
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from . import datapipe, generator, index as vindex, lora, metrics, retriever
from .backbone import BackboneConfig, BackboneParams, init_backbone, next_token_loss, params_from_arrays
from .checkpoint import file_sha256, load_checkpoint, payload_sha256, save_checkpoint
from .config import RunConfig
from .generator import QDATuple, build_prompt, rag_it_loss
from .lora import LoraAdapter, adapter_from_arrays, init_adapter
from .retriever import RetrievalTriple, build_inbatch, contrastive_batch_loss
from .training import Adam, sample_batch, stream_rng, stream_seed

CPT_MARKER = "cpt_complete"


class RunLockError(RuntimeError):
    pass


class RunLock:
    """Exclusive ownership of a run directory for the duration of a stage."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"
        self._fd = None

    def __enter__(self) -> "RunLock":
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockError(f"another run owns {self.path.parent} (lock file present)")
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        return self

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            os.unlink(self.path)
        return False


def _run_dir(config: RunConfig) -> Path:
    path = Path(config["run", "out_dir"]) / config["run", "run_id"]
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _config_sha256(config: RunConfig) -> str:
    return hashlib.sha256(config.canonical_json().encode("utf-8")).hexdigest()


def _update_manifest(run_dir: Path, config: RunConfig, stage: str, entry: dict) -> None:
    manifest_path = run_dir / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest["run_id"] = config["run", "run_id"]
    manifest["seed"] = config.seed
    manifest["config_sha256"] = _config_sha256(config)
    manifest["config"] = config.to_dict()
    manifest.setdefault("stages", {})[stage] = entry
    _atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True))


def _checkpoint_entry(path: Path) -> dict:
    return {
        "sha256": file_sha256(str(path)),
        "payload_sha256": payload_sha256(str(path)),
        "bytes": path.stat().st_size,
    }


def _input_hashes(paths: Sequence[str]) -> dict[str, str]:
    return {p: file_sha256(p) for p in paths}


def _doc_text(doc: datapipe.DocumentRecord) -> str:
    return f"{doc.title} {doc.contents}".strip()


def _training_docs(config: RunConfig) -> list[datapipe.DocumentRecord]:
    """Corpus docs plus the optional general file: everything a retrieval
    training triple may name as positive or negative. The inference index
    stays restricted to the corpus proper."""
    docs = datapipe.read_documents(config["paths", "corpus"])
    general_path = config["paths", "general_corpus"]
    if Path(general_path).exists():
        seen = {d.id for d in docs}
        for doc in datapipe.read_documents(general_path):
            if doc.id not in seen:
                docs.append(doc)
    return docs


# ---------------------------------------------------------------- checkpoints


def save_backbone(path: Path, params: BackboneParams, meta_extra: dict) -> None:
    meta = {"kind": "backbone", "backbone_config": params.config.to_dict()}
    meta.update(meta_extra)
    save_checkpoint(str(path), params.arrays(), meta)


def load_backbone(path: str, allow_raw: bool = False) -> tuple[BackboneParams, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone checkpoint")
    config = BackboneConfig(**meta["backbone_config"])
    params = params_from_arrays(config, arrays)
    if not meta.get(CPT_MARKER) and not allow_raw:
        raise ValueError(
            f"{path} lacks the CPT-complete marker; pass allow_raw_backbone to use it anyway"
        )
    return params, meta


def save_adapter(path: Path, adapter: LoraAdapter, meta_extra: dict) -> None:
    meta = {
        "kind": "adapter",
        "role": adapter.role,
        "lora": adapter.config.to_dict(),
        "backbone_config": adapter.backbone_config.to_dict(),
    }
    meta.update(meta_extra)
    save_checkpoint(str(path), adapter.arrays(), meta)


def load_adapter(path: str, expected_roles: Sequence[str] | None = None) -> tuple[LoraAdapter, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "adapter":
        raise ValueError(f"{path} is not an adapter checkpoint")
    if expected_roles and meta["role"] not in expected_roles:
        raise ValueError(f"{path} has role {meta['role']!r}, expected one of {expected_roles}")
    adapter = adapter_from_arrays(
        BackboneConfig(**meta["backbone_config"]),
        lora.LoraConfig(**meta["lora"]),
        meta["role"],
        arrays,
    )
    return adapter, meta


# ------------------------------------------------------------------ stage one


def run_cpt(config: RunConfig) -> Path:
    """Continual pre-training of the full backbone.

    Trains on the pre-training mix when that file exists, otherwise on the
    plain corpus; the manifest's input hashes record which file was used.
    """
    run_dir = _run_dir(config)
    corpus_path = config["paths", "cpt_corpus"]
    if not Path(corpus_path).exists():
        corpus_path = config["paths", "corpus"]
    docs = datapipe.read_documents(corpus_path)
    if not docs:
        raise ValueError("corpus is empty")
    bcfg = config.backbone_config()
    seqs = [retriever.doc_token_ids(d.title, d.contents, bcfg.max_seq_len) for d in docs]

    with RunLock(run_dir):
        start = time.perf_counter()
        params = init_backbone(bcfg, stream_seed(config.seed, "init:backbone"))
        steps = config["cpt", "steps"]
        curve: list[float] = []
        if steps > 0:
            opt = Adam(
                params.trainable(),
                lr=config["cpt", "lr"],
                warmup_steps=config["cpt", "lr_warmup_steps"],
            )
            rng = stream_rng(config.seed, "cpt")
            batch_size = config["cpt", "batch_size"]
            for _ in range(steps):
                idx = sample_batch(rng, len(seqs), batch_size)
                opt.zero_grad()
                loss = next_token_loss(params, [seqs[i] for i in idx])
                ag.backward(loss)
                opt.step()
                curve.append(float(loss.data))
        params.freeze()
        out_path = run_dir / "backbone.bsrk"
        save_backbone(
            out_path,
            params,
            {CPT_MARKER: True, "seed": config.seed, "steps": steps, "stage": "cpt"},
        )
        _update_manifest(
            run_dir,
            config,
            "cpt",
            {
                "inputs": _input_hashes([corpus_path]),
                "loss_curve": curve,
                "checkpoints": {out_path.name: _checkpoint_entry(out_path)},
                "wall_clock_s": time.perf_counter() - start,
                "n_docs": len(docs),
            },
        )
    return out_path


# ------------------------------------------------------- contrastive training


def _resolve_doc_seqs(
    docs: Sequence[datapipe.DocumentRecord], max_seq_len: int
) -> dict[str, list[int]]:
    return {d.id: retriever.doc_token_ids(d.title, d.contents, max_seq_len) for d in docs}


def _fill_random_negatives(
    batch: Sequence[RetrievalTriple],
    corpus_ids: Sequence[str],
    m: int,
    rng: np.random.Generator,
) -> list[RetrievalTriple]:
    """Triples without stored negatives get m random corpus docs instead."""
    m_eff = min(m, len(corpus_ids) - 1)
    if m_eff < 1:
        raise ValueError("corpus too small to sample a negative")
    filled = []
    for t in batch:
        if t.negatives:
            filled.append(t)
            continue
        negs: list[str] = []
        while len(negs) < m_eff:
            cand = corpus_ids[int(rng.integers(len(corpus_ids)))]
            if cand != t.positive and cand not in negs:
                negs.append(cand)
        filled.append(RetrievalTriple(query=t.query, positive=t.positive, negatives=tuple(negs)))
    return filled


def _contrastive_step_loss(
    params: BackboneParams,
    adapter: LoraAdapter,
    triples: Sequence[RetrievalTriple],
    doc_seqs: Mapping[str, list[int]],
    corpus_ids: Sequence[str],
    rng: np.random.Generator,
    batch_size: int,
    m: int,
    temperature: float,
    query_seq_cache: dict[str, list[int]],
):
    """One step's InfoNCE loss tensor; consumes rng for batch and pools."""
    idx = sample_batch(rng, len(triples), batch_size)
    batch = _fill_random_negatives([triples[i] for i in idx], corpus_ids, m, rng)
    with warnings.catch_warnings():
        # positive collisions are routine on small corpora; the drop is silent here
        warnings.filterwarnings("ignore", message="pool entry .* collides")
        samples = build_inbatch(batch, m, rng)
    col_of: dict[str, int] = {}
    doc_batch: list[list[int]] = []

    def _col(doc_id: str) -> int:
        if doc_id not in col_of:
            if doc_id not in doc_seqs:
                raise KeyError(f"triple references unknown doc {doc_id!r}")
            col_of[doc_id] = len(doc_batch)
            doc_batch.append(doc_seqs[doc_id])
        return col_of[doc_id]

    max_seq_len = params.config.max_seq_len
    query_seqs = []
    pos_cols = []
    pool_cols = []
    for s in samples:
        if s.query not in query_seq_cache:
            query_seq_cache[s.query] = retriever.query_token_ids(s.query, max_seq_len)
        query_seqs.append(query_seq_cache[s.query])
        pos_cols.append(_col(s.positive))
        pool_cols.append([_col(d) for d in s.pool])
    return contrastive_batch_loss(
        params, adapter, query_seqs, doc_batch, pos_cols, pool_cols, temperature
    )


def _embed_corpus(
    params: BackboneParams,
    adapter: LoraAdapter,
    docs: Sequence[datapipe.DocumentRecord],
    doc_seqs: Mapping[str, list[int]],
) -> vindex.VectorIndex:
    ids = [d.id for d in docs]
    matrix = retriever.embed_ids_batch(params, adapter, [doc_seqs[i] for i in ids])
    return vindex.VectorIndex(ids, matrix)


def run_stage2(config: RunConfig, backbone_path: str, single_phase: bool = False) -> Path:
    """Contrastive retriever training against the frozen backbone.

    Two phases by default: random-negative warmup, hard-negative mining with
    the warmed model, then training on the mined negatives. single_phase keeps
    the warmup sampler for the whole budget (no mining); that is the schedule
    the fully-shared baseline mirrors.
    """
    run_dir = _run_dir(config)
    params, _ = load_backbone(backbone_path, config["run", "allow_raw_backbone"])
    params.freeze()
    docs = _training_docs(config)
    triples = datapipe.read_triples(config["paths", "triples"])
    if not triples:
        raise ValueError("no training triples")
    bcfg = params.config
    doc_seqs = _resolve_doc_seqs(docs, bcfg.max_seq_len)
    corpus_ids = [d.id for d in docs]

    with RunLock(run_dir):
        start = time.perf_counter()
        adapter = init_adapter(
            bcfg,
            config.lora_config(),
            role="retrieval",
            seed=stream_seed(config.seed, "init:retrieval-adapter"),
        )
        opt = Adam(
            adapter.trainable(),
            lr=config["retrieval", "lr"],
            warmup_steps=config["retrieval", "lr_warmup_steps"],
        )
        rng = stream_rng(config.seed, "retrieval")
        batch_size = config["retrieval", "batch_size"]
        m = config["retrieval", "m"]
        temperature = config["retrieval", "temperature"]
        query_cache: dict[str, list[int]] = {}
        curve: list[float] = []

        def _steps(n: int, active: Sequence[RetrievalTriple]) -> None:
            for _ in range(n):
                opt.zero_grad()
                loss = _contrastive_step_loss(
                    params, adapter, active, doc_seqs, corpus_ids, rng,
                    batch_size, m, temperature, query_cache,
                )
                ag.backward(loss)
                opt.step()
                curve.append(float(loss.data))

        random_steps = config["retrieval", "random_steps"]
        hard_steps = config["retrieval", "hard_steps"]
        mined_path: Path | None = None
        if single_phase:
            _steps(random_steps + hard_steps, triples)
        else:
            _steps(random_steps, triples)
            warmed = _embed_corpus(params, adapter, docs, doc_seqs)
            mined = retriever.mine_hard_negatives(
                lambda q: retriever.embed_query(params, adapter, q),
                warmed,
                triples,
                limit=config["retrieval", "mine_top"],
            )
            mined_path = run_dir / "mined_triples.jsonl"
            datapipe.write_triples(str(mined_path), mined)
            _steps(hard_steps, mined)

        adapter.freeze()
        out_path = run_dir / "retriever_adapter.bsrk"
        save_adapter(
            out_path,
            adapter,
            {
                "seed": config.seed,
                "stage": "retrieval",
                "single_phase": single_phase,
                "backbone_sha256": file_sha256(backbone_path),
            },
        )
        entry = {
            "inputs": _input_hashes([backbone_path, config["paths", "corpus"], config["paths", "triples"]]),
            "loss_curve": curve,
            "checkpoints": {out_path.name: _checkpoint_entry(out_path)},
            "wall_clock_s": time.perf_counter() - start,
            "single_phase": single_phase,
        }
        if mined_path is not None:
            entry["mined_triples"] = str(mined_path)
        _update_manifest(run_dir, config, "retrieval", entry)
    return out_path


# ---------------------------------------------------------------- stage three


def _stage3_layouts(
    config: RunConfig,
    params: BackboneParams,
    qda_rows: Sequence[Mapping],
    docs_by_id: Mapping[str, datapipe.DocumentRecord],
    retriever_adapter: LoraAdapter | None,
    corpus_index: vindex.VectorIndex | None,
) -> list[generator.PromptLayout]:
    """Training prompts; context is the gold doc unless retrieval substitution
    is configured."""
    missing = sorted({r["doc_id"] for r in qda_rows} - set(docs_by_id))
    if missing:
        raise ValueError(f"qda rows reference missing docs: {missing[:5]}")
    layouts = []
    for row in qda_rows:
        tup = QDATuple(question=row["question"], doc_id=row["doc_id"], answer=row["answer"])
        if retriever_adapter is not None and corpus_index is not None:
            q_emb = retriever.embed_query(params, retriever_adapter, tup.question)
            top_id = vindex.top_k(corpus_index, q_emb, k=1)[0][0]
            context_doc = docs_by_id[top_id]
        else:
            context_doc = docs_by_id[tup.doc_id]
        layouts.append(
            build_prompt(tup.question, [_doc_text(context_doc)], tup.answer, params.config.max_seq_len)
        )
    return layouts


def run_stage3(config: RunConfig, backbone_path: str, retriever_path: str | None = None) -> Path:
    """Instruction tuning of the generation adapter on (question, doc, answer)."""
    run_dir = _run_dir(config)
    params, _ = load_backbone(backbone_path, config["run", "allow_raw_backbone"])
    params.freeze()
    qda_rows = datapipe.read_jsonl(config["paths", "qda"])
    if not qda_rows:
        raise ValueError("no qda tuples")
    docs = datapipe.read_documents(config["paths", "corpus"])
    docs_by_id = {d.id: d for d in docs}

    retr_adapter = None
    corpus_index = None
    if config["generation", "use_retrieved_docs"]:
        if retriever_path is None:
            raise ValueError("use_retrieved_docs requires a retriever adapter checkpoint")
        retr_adapter, _ = load_adapter(retriever_path, expected_roles=("retrieval", "shared"))
        retr_adapter.freeze()
        doc_seqs = _resolve_doc_seqs(docs, params.config.max_seq_len)
        corpus_index = _embed_corpus(params, retr_adapter, docs, doc_seqs)

    layouts = _stage3_layouts(config, params, qda_rows, docs_by_id, retr_adapter, corpus_index)

    with RunLock(run_dir):
        start = time.perf_counter()
        adapter = init_adapter(
            params.config,
            config.lora_config(),
            role="generation",
            seed=stream_seed(config.seed, "init:generation-adapter"),
        )
        steps = config["generation", "steps"]
        curve: list[float] = []
        if steps > 0:
            opt = Adam(
                adapter.trainable(),
                lr=config["generation", "lr"],
                warmup_steps=config["generation", "lr_warmup_steps"],
            )
            rng = stream_rng(config.seed, "generation")
            batch_size = config["generation", "batch_size"]
            for _ in range(steps):
                idx = sample_batch(rng, len(layouts), batch_size)
                opt.zero_grad()
                loss = rag_it_loss(params, adapter, [layouts[i] for i in idx])
                ag.backward(loss)
                opt.step()
                curve.append(float(loss.data))
        adapter.freeze()
        out_path = run_dir / "generator_adapter.bsrk"
        save_adapter(
            out_path,
            adapter,
            {
                "seed": config.seed,
                "stage": "generation",
                "use_retrieved_docs": bool(config["generation", "use_retrieved_docs"]),
                "backbone_sha256": file_sha256(backbone_path),
            },
        )
        inputs = [backbone_path, config["paths", "corpus"], config["paths", "qda"]]
        if retriever_path is not None:
            inputs.append(retriever_path)
        _update_manifest(
            run_dir,
            config,
            "generation",
            {
                "inputs": _input_hashes(inputs),
                "loss_curve": curve,
                "checkpoints": {out_path.name: _checkpoint_entry(out_path)},
                "wall_clock_s": time.perf_counter() - start,
            },
        )
    return out_path


# ------------------------------------------------------- fully-shared regime


def run_fully_shared(config: RunConfig, backbone_path: str) -> Path:
    """Single-adapter baseline: every step minimizes L_retrieval + lam * L_generation.

    Batch draws come from the same purpose streams the dedicated stages use,
    so lam=0 consumes the retrieval stream exactly like a single-phase
    retrieval run and reproduces its adapter payload bit for bit.
    """
    lam = config["run", "lam"]
    if lam < 0:
        raise ValueError("lam must be >= 0")
    run_dir = _run_dir(config)
    params, _ = load_backbone(backbone_path, config["run", "allow_raw_backbone"])
    params.freeze()
    docs = _training_docs(config)
    triples = datapipe.read_triples(config["paths", "triples"])
    qda_rows = datapipe.read_jsonl(config["paths", "qda"])
    if not triples or not qda_rows:
        raise ValueError("fully_shared needs both triples and qda tuples")
    bcfg = params.config
    doc_seqs = _resolve_doc_seqs(docs, bcfg.max_seq_len)
    docs_by_id = {d.id: d for d in docs}
    corpus_ids = [d.id for d in docs]
    layouts = _stage3_layouts(config, params, qda_rows, docs_by_id, None, None)

    with RunLock(run_dir):
        start = time.perf_counter()
        adapter = init_adapter(
            bcfg,
            config.lora_config(),
            role="shared",
            seed=stream_seed(config.seed, "init:retrieval-adapter"),
        )
        opt = Adam(
            adapter.trainable(),
            lr=config["fully_shared", "lr"],
            warmup_steps=config["fully_shared", "lr_warmup_steps"],
        )
        rng_r = stream_rng(config.seed, "retrieval")
        rng_g = stream_rng(config.seed, "generation")
        batch_size = config["fully_shared", "batch_size"]
        m = config["fully_shared", "m"]
        temperature = config["fully_shared", "temperature"]
        lam_const = ag.constant(lam)
        query_cache: dict[str, list[int]] = {}
        curve: list[dict] = []
        for _ in range(config["fully_shared", "steps"]):
            opt.zero_grad()
            loss_r = _contrastive_step_loss(
                params, adapter, triples, doc_seqs, corpus_ids, rng_r,
                batch_size, m, temperature, query_cache,
            )
            gen_idx = sample_batch(rng_g, len(layouts), batch_size)
            loss_g = rag_it_loss(params, adapter, [layouts[i] for i in gen_idx])
            total = ag.add(loss_r, ag.mul(loss_g, lam_const))
            ag.backward(total)
            opt.step()
            curve.append(
                {
                    "total": float(total.data),
                    "retrieval": float(loss_r.data),
                    "generation": float(loss_g.data),
                }
            )
        adapter.freeze()
        out_path = run_dir / "shared_adapter.bsrk"
        save_adapter(
            out_path,
            adapter,
            {
                "seed": config.seed,
                "stage": "fully_shared",
                "lam": lam,
                "backbone_sha256": file_sha256(backbone_path),
            },
        )
        _update_manifest(
            run_dir,
            config,
            "fully_shared",
            {
                "inputs": _input_hashes(
                    [backbone_path, config["paths", "corpus"], config["paths", "triples"], config["paths", "qda"]]
                ),
                "lam": lam,
                "loss_curve": curve,
                "checkpoints": {out_path.name: _checkpoint_entry(out_path)},
                "wall_clock_s": time.perf_counter() - start,
            },
        )
    return out_path


# -------------------------------------------------------- index and inference


def build_corpus_index(
    config: RunConfig, backbone_path: str, adapter_path: str, out_path: str | None = None
) -> Path:
    """Embed every corpus document with the retrieval adapter and save BSRI."""
    run_dir = _run_dir(config)
    params, _ = load_backbone(backbone_path, config["run", "allow_raw_backbone"])
    params.freeze()
    adapter, _ = load_adapter(adapter_path, expected_roles=("retrieval", "shared"))
    adapter.freeze()
    docs = datapipe.read_documents(config["paths", "corpus"])
    if not docs:
        raise ValueError("corpus is empty")
    doc_seqs = _resolve_doc_seqs(docs, params.config.max_seq_len)
    built = _embed_corpus(params, adapter, docs, doc_seqs)
    path = Path(out_path) if out_path else run_dir / "corpus.bsri"
    vindex.save(built, str(path))
    return path


def run_inference(
    config: RunConfig,
    backbone_path: str,
    retriever_path: str,
    generator_path: str,
    index_path: str,
    queries_path: str | None = None,
    out_path: str | None = None,
) -> Path:
    """Retrieve top-N docs per question and greedy-decode an answer."""
    run_dir = _run_dir(config)
    params, _ = load_backbone(backbone_path, config["run", "allow_raw_backbone"])
    params.freeze()
    retr_adapter, _ = load_adapter(retriever_path, expected_roles=("retrieval", "shared"))
    retr_adapter.freeze()
    gen_adapter, _ = load_adapter(generator_path, expected_roles=("generation", "shared"))
    gen_adapter.freeze()
    corpus_index = vindex.load(index_path)
    if corpus_index.d != params.config.d_model:
        raise ValueError(
            f"index dimension {corpus_index.d} != model d_model {params.config.d_model}"
        )
    docs = datapipe.read_documents(config["paths", "corpus"])
    docs_by_id = {d.id: d for d in docs}
    queries = datapipe.read_queries(queries_path or config["paths", "queries"])
    top_n = config["inference", "top_n"]
    max_new = config["inference", "max_new"]

    rows = []
    for qid, _split, text in queries:
        q_emb = retriever.embed_query(params, retr_adapter, text)
        ranked = vindex.top_k(corpus_index, q_emb, k=min(top_n, len(corpus_index)))
        doc_texts = [_doc_text(docs_by_id[doc_id]) for doc_id, _ in ranked]
        answer_text, no_context = generator.answer(params, gen_adapter, text, doc_texts, max_new)
        rows.append(
            {
                "qid": qid,
                "ranked": [[doc_id, score] for doc_id, score in ranked],
                "answer": answer_text,
                "no_context": no_context,
            }
        )
    path = Path(out_path) if out_path else run_dir / "results.jsonl"
    datapipe.write_jsonl(str(path), rows)
    return path


# ----------------------------------------------------------------- evaluation


def compute_gaps(
    params: BackboneParams,
    adapter: LoraAdapter,
    corpus_index: vindex.VectorIndex,
    queries: Sequence[tuple[str, str]],
    gold: Mapping[str, str],
) -> list[float]:
    """Per-query gold-vs-best-other similarity margins."""
    gaps = []
    for qid, text in queries:
        gold_id = gold[qid]
        if gold_id not in corpus_index:
            raise KeyError(f"gold doc {gold_id!r} missing from the index")
        scores = corpus_index.scores(retriever.embed_query(params, adapter, text))
        by_id = dict(zip(corpus_index.ids, (float(s) for s in scores)))
        gaps.append(metrics.gap_score(by_id, gold_id))
    return gaps


def alignment_stats(
    params: BackboneParams,
    retr_adapter: LoraAdapter,
    gen_adapter: LoraAdapter,
    corpus_index: vindex.VectorIndex,
    docs_by_id: Mapping[str, datapipe.DocumentRecord],
    queries: Sequence[tuple[str, str]],
    k: int = 10,
) -> dict:
    """Agreement between retriever ranking and generator title-logprob ranking.

    Per query: the retriever's top-k doc ids, re-ranked by
    generator.score_candidate over their titles; tau over the two orders,
    Pearson over the paired scores.
    """
    taus = []
    pearsons = []
    for _qid, text in queries:
        q_emb = retriever.embed_query(params, retr_adapter, text)
        ranked = vindex.top_k(corpus_index, q_emb, k=min(k, len(corpus_index)))
        if len(ranked) < 2:
            raise ValueError("alignment needs at least two candidates per query")
        retr_order = [doc_id for doc_id, _ in ranked]
        retr_scores = [score for _, score in ranked]
        gen_scores = [
            generator.score_candidate(params, gen_adapter, text, docs_by_id[doc_id].title)
            for doc_id in retr_order
        ]
        gen_order = [
            doc_id for doc_id, _ in sorted(zip(retr_order, gen_scores), key=lambda p: (-p[1], p[0]))
        ]
        taus.append(metrics.kendall_tau(retr_order, gen_order))
        if len(set(retr_scores)) > 1 and len(set(gen_scores)) > 1:
            pearsons.append(metrics.pearson(retr_scores, gen_scores))
    out = {"tau_mean": float(np.mean(taus)), "n_queries": len(taus), "tau_per_query": taus}
    if pearsons:
        out["pearson_mean"] = float(np.mean(pearsons))
    return out


def run_eval(
    config: RunConfig,
    results_path: str,
    qrels_path: str,
    references: Mapping[str, str] | None = None,
    gaps: Sequence[float] | None = None,
    alignment: Mapping | None = None,
    judge_scores_path: str | None = None,
    splits: Mapping[str, str] | None = None,
    out_path: str | None = None,
    ns: Sequence[int] = (3, 5),
) -> dict:
    """Score a results file against qrels (and references when given).

    splits, when given, maps qid -> split name and adds per-split retrieval
    metric breakdowns. The metrics JSON is written with sorted keys so
    identical runs produce identical bytes.
    """
    run_dir = _run_dir(config)
    rows = datapipe.read_jsonl(results_path)
    qrels = datapipe.read_qrels(qrels_path)
    missing = sorted({row["qid"] for row in rows} - set(qrels))
    if missing:
        raise ValueError(f"results contain qids absent from qrels: {missing[:5]}")

    report: dict = {"n_queries": len(rows)}
    groups: dict[str, list[dict]] = {"all": rows}
    if splits is not None:
        for row in rows:
            groups.setdefault(splits.get(row["qid"], "unknown"), []).append(row)

    retrieval: dict[str, dict] = {}
    for name, group in groups.items():
        if not group:
            continue
        entry = {}
        for n in ns:
            entry[f"ndcg@{n}"] = float(
                np.mean([metrics.ndcg_at(r["ranked"], qrels[r["qid"]], n) for r in group])
            )
            entry[f"hit@{n}"] = float(
                np.mean([metrics.hit_at(r["ranked"], qrels[r["qid"]], n) for r in group])
            )
        entry["n"] = len(group)
        retrieval[name] = entry
    report["retrieval"] = retrieval

    if references is not None:
        scored = [r for r in rows if r["qid"] in references]
        if scored:
            report["generation"] = {
                "bleu3": float(np.mean([metrics.bleu3(r["answer"], references[r["qid"]]) for r in scored])),
                "rouge_l": float(np.mean([metrics.rouge_l(r["answer"], references[r["qid"]]) for r in scored])),
                "exact_match": float(
                    np.mean([metrics.exact_match(r["answer"], references[r["qid"]]) for r in scored])
                ),
                "n": len(scored),
            }
    if gaps is not None:
        report["gap_histogram"] = metrics.gap_histogram(gaps)
    if alignment is not None:
        report["alignment"] = dict(alignment)
    if judge_scores_path is not None:
        judge = metrics.read_judge_scores(judge_scores_path)
        overlap = [judge[r["qid"]] for r in rows if r["qid"] in judge]
        report["external_judge"] = {
            "mean": float(np.mean(overlap)) if overlap else None,
            "n": len(overlap),
        }
    path = Path(out_path) if out_path else run_dir / "metrics.json"
    _atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True))
    return report


# ------------------------------------------------------------ space and time


def space_time(
    config: RunConfig,
    regime_artifacts: Mapping[str, Mapping],
    n_queries: int = 0,
    query_fn: Callable[[str, str], object] | None = None,
    query_texts: Sequence[str] = (),
) -> dict:
    """Per-regime parameter/byte/timing table.

    regime_artifacts: regime name -> {"checkpoints": [paths], "index": path}.
    Timing runs query_fn(regime, text) over query_texts when n_queries > 0.
    """
    rows = []
    for regime, artifacts in sorted(regime_artifacts.items()):
        counts = lora.count_parameters(config.backbone_config(), config.lora_config(), regime)
        ckpt_bytes = sum(os.path.getsize(p) for p in artifacts.get("checkpoints", ()))
        index_path = artifacts.get("index")
        row = {
            "regime": regime,
            "total_parameters": counts["total"],
            "checkpoint_bytes": ckpt_bytes,
            "index_bytes": os.path.getsize(index_path) if index_path else 0,
        }
        if n_queries > 0 and query_fn is not None:
            texts = list(query_texts)[:n_queries]
            row["timing"] = metrics.time_queries(lambda t, r=regime: query_fn(r, t), texts)
        rows.append(row)
    return metrics.space_time_report(rows)
