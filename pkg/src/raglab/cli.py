"""Command-line interface.

Every config key is mirrored by a flag (--<section>-<key>); flags override the
config file, which overrides defaults. Boolean flags take an explicit value
(e.g. --run-allow-raw-backbone true).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import tempfile
from pathlib import Path

from . import datapipe, runner, synth
from .config import SCHEMA, RunConfig, cli_flag, load_config


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="INI config file")
    for (section, key), (tag, default, help_text) in SCHEMA.items():
        parser.add_argument(
            cli_flag(section, key),
            dest=f"{section}__{key}",
            default=None,
            metavar=tag.upper(),
            help=f"{help_text} (default {default!r})",
        )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for dest, value in vars(args).items():
        if "__" in dest and value is not None:
            section, _, key = dest.partition("__")
            overrides[f"{section}.{key}"] = value
    return load_config(args.config, overrides)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raglab",
        description="Backbone-shared retrieval-augmented generation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def _sub(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        return p

    p = _sub("prepare-data", "generate the synthetic benchmark and training files")
    p.add_argument("--data-dir", default="data")

    p = _sub("dedup", "near-duplicate removal over a documents file")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--report", default=None, help="write the cluster report JSON here")

    p = _sub("mix", "seeded proportional interleave of document files")
    p.add_argument("--source", action="append", required=True, metavar="NAME=PATH:WEIGHT")
    p.add_argument("--out", dest="out_path", required=True)
    p.add_argument("--n-total", type=int, required=True)
    p.add_argument("--manifest", default=None)

    _sub("pretrain", "stage 1: continual pre-training of the backbone")

    p = _sub("train-retriever", "stage 2: contrastive retrieval adapter")
    p.add_argument("--backbone", required=True)
    p.add_argument("--single-phase", action="store_true", help="skip mining; keep the warmup sampler")

    p = _sub("mine-negatives", "mine hard negatives with a trained retriever")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", dest="out_path", default=None)

    p = _sub("train-generator", "stage 3: retrieval-augmented instruction tuning")
    p.add_argument("--backbone", required=True)
    p.add_argument("--retriever", default=None, help="needed with --generation-use-retrieved-docs true")

    p = _sub("train-fully-shared", "baseline: one adapter on the combined loss")
    p.add_argument("--backbone", required=True)

    p = _sub("build-index", "embed the corpus and save the vector index")
    p.add_argument("--backbone", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", dest="out_path", default=None)

    p = _sub("infer", "retrieve and answer the queries file")
    p.add_argument("--backbone", required=True)
    p.add_argument("--retriever", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", default=None)
    p.add_argument("--out", dest="out_path", default=None)

    p = _sub("eval", "score a results file against qrels and references")
    p.add_argument("--results", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--qda", default=None, help="reference answers for generation metrics")
    p.add_argument("--queries", default=None, help="qid/split/text file for split breakdowns")
    p.add_argument("--judge-scores", default=None)
    p.add_argument("--backbone", default=None)
    p.add_argument("--retriever", default=None)
    p.add_argument("--generator", default=None)
    p.add_argument("--index", default=None)
    p.add_argument("--out", dest="out_path", default=None)

    p = _sub("report-space-time", "parameter/byte accounting per regime")
    p.add_argument("--regime", action="append", required=True, metavar="NAME=DIR")
    p.add_argument("--out", dest="out_path", default=None)

    _sub("selftest", "tiny end-to-end smoke run in a temp directory")
    return parser


# ----------------------------------------------------------------- commands


def _cmd_prepare_data(config: RunConfig, args) -> int:
    data_dir = Path(args.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    spec = synth.SynthSpec(
        n_docs=config["synth", "n_docs"],
        n_facts_per_doc=config["synth", "n_facts_per_doc"],
        heldout_per_doc=config["synth", "heldout_per_doc"],
        seed=config.seed,
    )
    data = synth.generate(spec, out_dir=str(data_dir))

    cpt_ratio = config["data", "cpt_general_per_domain"]
    triple_ratio = config["data", "triples_general_per_domain"]
    n_general_docs = max(
        int(math.ceil(cpt_ratio * len(data.docs))),
        int(math.ceil(triple_ratio * len(data.qda_rows))),
    )
    general_docs = datapipe.synth_general(n_general_docs, seed=config.seed + 1)
    datapipe.write_documents(str(data_dir / "general_documents.jsonl"), general_docs)

    if cpt_ratio > 0:
        n_dom = len(data.docs)
        n_gen = int(round(cpt_ratio * n_dom))
        mixed, mix_manifest = datapipe.mix(
            {"domain": data.docs, "general": general_docs},
            {"domain": float(n_dom), "general": float(n_gen)},
            n_total=n_dom + n_gen,
            seed=config.seed,
        )
    else:
        mixed, mix_manifest = datapipe.mix(
            {"domain": data.docs}, {"domain": 1.0}, n_total=len(data.docs), seed=config.seed
        )
    datapipe.write_documents(str(data_dir / "cpt_corpus.jsonl"), mixed)

    general_triples = [
        datapipe.RetrievalTriple(query=d.title, positive=d.id, negatives=())
        for d in general_docs
    ]
    corpus_ids = [d.id for d in data.docs] + [d.id for d in general_docs]
    triples, triple_manifest = datapipe.emit_triples(
        data.qda_rows,
        corpus_ids,
        general_triples=general_triples,
        general_per_domain=triple_ratio,
        seed=config.seed,
    )
    datapipe.write_triples(str(data_dir / "triples.jsonl"), triples)
    manifest = {
        "synth": {"n_docs": len(data.docs), "n_queries": len(data.queries)},
        "cpt_mix": mix_manifest,
        "triples": triple_manifest,
    }
    (data_dir / "data_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"wrote benchmark ({len(data.docs)} docs, {len(data.queries)} queries) to {data_dir}")
    return 0


def _cmd_dedup(config: RunConfig, args) -> int:
    docs = datapipe.read_documents(args.in_path)
    result = datapipe.dedup(
        docs,
        threshold=config["data", "dedup_threshold"],
        p=config["data", "minhash_p"],
        w=config["data", "shingle_w"],
        seed=config.seed,
    )
    datapipe.write_documents(args.out_path, result.kept)
    report = {
        "kept": len(result.kept),
        "dropped": len(result.dropped),
        "clusters": {k: v for k, v in result.clusters.items() if len(v) > 1},
    }
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    print(f"kept {report['kept']}, dropped {report['dropped']}")
    return 0


def _cmd_mix(config: RunConfig, args) -> int:
    sources = {}
    weights = {}
    for item in args.source:
        name, _, rest = item.partition("=")
        path, _, weight = rest.rpartition(":")
        if not name or not path or not weight:
            raise SystemExit(f"--source must look like NAME=PATH:WEIGHT, got {item!r}")
        sources[name] = datapipe.read_documents(path)
        weights[name] = float(weight)
    mixed, manifest = datapipe.mix(sources, weights, n_total=args.n_total, seed=config.seed)
    datapipe.write_documents(args.out_path, mixed)
    if args.manifest:
        Path(args.manifest).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    print(json.dumps(manifest["per_source"], sort_keys=True))
    return 0


def _cmd_mine_negatives(config: RunConfig, args) -> int:
    from . import retriever as retr

    params, _ = runner.load_backbone(args.backbone, config["run", "allow_raw_backbone"])
    params.freeze()
    adapter, _ = runner.load_adapter(args.adapter, expected_roles=("retrieval", "shared"))
    adapter.freeze()
    docs = runner._training_docs(config)
    triples = datapipe.read_triples(config["paths", "triples"])
    doc_seqs = runner._resolve_doc_seqs(docs, params.config.max_seq_len)
    corpus_index = runner._embed_corpus(params, adapter, docs, doc_seqs)
    mined = retr.mine_hard_negatives(
        lambda q: retr.embed_query(params, adapter, q),
        corpus_index,
        triples,
        limit=config["retrieval", "mine_top"],
    )
    out = args.out_path or str(runner._run_dir(config) / "mined_triples.jsonl")
    datapipe.write_triples(out, mined)
    print(f"mined negatives for {len(mined)} queries -> {out}")
    return 0


def _cmd_eval(config: RunConfig, args) -> int:
    references = None
    splits = None
    if args.qda and args.queries:
        qda_rows = datapipe.read_jsonl(args.qda)
        answer_by_question = {row["question"]: row["answer"] for row in qda_rows}
        queries = datapipe.read_queries(args.queries)
        references = {
            qid: answer_by_question[text] for qid, _, text in queries if text in answer_by_question
        }
        splits = {qid: split for qid, split, _ in queries}
    elif args.queries:
        splits = {qid: split for qid, split, _ in datapipe.read_queries(args.queries)}

    gaps = None
    alignment = None
    model_args = (args.backbone, args.retriever, args.index)
    if all(model_args):
        params, _ = runner.load_backbone(args.backbone, config["run", "allow_raw_backbone"])
        params.freeze()
        retr_adapter, _ = runner.load_adapter(args.retriever, expected_roles=("retrieval", "shared"))
        retr_adapter.freeze()
        from . import index as vindex

        corpus_index = vindex.load(args.index)
        queries = datapipe.read_queries(args.queries or config["paths", "queries"])
        qrels = datapipe.read_qrels(args.qrels)
        gold = {}
        for qid, grades in qrels.items():
            top = [d for d, g in grades.items() if g == 2]
            if len(top) == 1:
                gold[qid] = top[0]
        scored = [(qid, text) for qid, _, text in queries if qid in gold]
        gaps = runner.compute_gaps(params, retr_adapter, corpus_index, scored, gold)
        if args.generator:
            gen_adapter, _ = runner.load_adapter(args.generator, expected_roles=("generation", "shared"))
            gen_adapter.freeze()
            docs_by_id = {d.id: d for d in datapipe.read_documents(config["paths", "corpus"])}
            alignment = runner.alignment_stats(
                params, retr_adapter, gen_adapter, corpus_index, docs_by_id,
                [(qid, text) for qid, _, text in queries],
            )

    report = runner.run_eval(
        config,
        args.results,
        args.qrels,
        references=references,
        gaps=gaps,
        alignment=alignment,
        judge_scores_path=args.judge_scores,
        splits=splits,
        out_path=args.out_path,
    )
    print(json.dumps(report.get("retrieval", {}).get("all", {}), sort_keys=True))
    return 0


def _cmd_report_space_time(config: RunConfig, args) -> int:
    artifacts = {}
    for item in args.regime:
        name, _, dir_path = item.partition("=")
        if not name or not dir_path:
            raise SystemExit(f"--regime must look like NAME=DIR, got {item!r}")
        root = Path(dir_path)
        artifacts[name] = {
            "checkpoints": sorted(str(p) for p in root.glob("*.bsrk")),
            "index": next((str(p) for p in sorted(root.glob("*.bsri"))), None),
        }
    report = runner.space_time(config, artifacts)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out_path:
        Path(args.out_path).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _cmd_selftest(config: RunConfig, args) -> int:
    del config, args
    failures = 0

    def _check(name: str, fn) -> None:
        nonlocal failures
        try:
            fn()
            print(f"ok   {name}")
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            print(f"FAIL {name}: {exc}")

    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        data_dir = tmp_path / "data"
        cfg = load_config(
            None,
            {
                "run.out_dir": str(tmp_path / "runs"),
                "run.run_id": "selftest",
                "backbone.d_model": "16",
                "backbone.n_layers": "1",
                "backbone.n_heads": "2",
                "backbone.d_ffn": "32",
                "lora.rank": "2",
                "cpt.steps": "2",
                "cpt.batch_size": "2",
                "retrieval.random_steps": "2",
                "retrieval.hard_steps": "2",
                "retrieval.batch_size": "2",
                "retrieval.m": "2",
                "generation.steps": "2",
                "generation.batch_size": "2",
                "synth.n_docs": "6",
                "synth.n_facts_per_doc": "2",
                "data.cpt_general_per_domain": "0",
                "data.triples_general_per_domain": "0",
                "paths.corpus": str(data_dir / "documents.jsonl"),
                "paths.triples": str(data_dir / "triples.jsonl"),
                "paths.qda": str(data_dir / "qda.jsonl"),
                "paths.qrels": str(data_dir / "qrels.txt"),
                "paths.queries": str(data_dir / "queries.txt"),
            },
        )
        state: dict = {}
        fake_args = argparse.Namespace(data_dir=str(data_dir))
        _check("prepare-data", lambda: _cmd_prepare_data(cfg, fake_args))
        _check("pretrain", lambda: state.update(backbone=runner.run_cpt(cfg)))
        _check(
            "train-retriever",
            lambda: state.update(retriever=runner.run_stage2(cfg, str(state["backbone"]))),
        )
        _check(
            "train-generator",
            lambda: state.update(generator=runner.run_stage3(cfg, str(state["backbone"]))),
        )
        _check(
            "build-index",
            lambda: state.update(
                index=runner.build_corpus_index(cfg, str(state["backbone"]), str(state["retriever"]))
            ),
        )
        _check(
            "infer",
            lambda: state.update(
                results=runner.run_inference(
                    cfg,
                    str(state["backbone"]),
                    str(state["retriever"]),
                    str(state["generator"]),
                    str(state["index"]),
                )
            ),
        )
        _check(
            "eval",
            lambda: runner.run_eval(cfg, str(state["results"]), str(data_dir / "qrels.txt")),
        )
    print("selftest:", "FAILED" if failures else "passed")
    return 1 if failures else 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    config = _config_from_args(args)
    command = args.command

    if command == "prepare-data":
        return _cmd_prepare_data(config, args)
    if command == "dedup":
        return _cmd_dedup(config, args)
    if command == "mix":
        return _cmd_mix(config, args)
    if command == "pretrain":
        path = runner.run_cpt(config)
        print(f"backbone checkpoint -> {path}")
        return 0
    if command == "train-retriever":
        path = runner.run_stage2(config, args.backbone, single_phase=args.single_phase)
        print(f"retrieval adapter -> {path}")
        return 0
    if command == "mine-negatives":
        return _cmd_mine_negatives(config, args)
    if command == "train-generator":
        path = runner.run_stage3(config, args.backbone, args.retriever)
        print(f"generation adapter -> {path}")
        return 0
    if command == "train-fully-shared":
        path = runner.run_fully_shared(config, args.backbone)
        print(f"shared adapter -> {path}")
        return 0
    if command == "build-index":
        path = runner.build_corpus_index(config, args.backbone, args.adapter, args.out_path)
        print(f"index -> {path}")
        return 0
    if command == "infer":
        path = runner.run_inference(
            config, args.backbone, args.retriever, args.generator, args.index,
            args.queries, args.out_path,
        )
        print(f"results -> {path}")
        return 0
    if command == "eval":
        return _cmd_eval(config, args)
    if command == "report-space-time":
        return _cmd_report_space_time(config, args)
    if command == "selftest":
        return _cmd_selftest(config, args)
    raise SystemExit(f"unknown command {command!r}")


if __name__ == "__main__":
    sys.exit(main())
