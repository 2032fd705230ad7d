"""Run configuration: INI files, CLI overrides, and the BSRK_SEED env var.

Precedence, lowest to highest: built-in defaults, config file, BSRK_SEED
(run.seed only), explicit CLI flags. Every key below is mirrored by a CLI
flag --<section>-<key>; unknown file keys are errors so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field
from typing import Mapping

from .backbone import BackboneConfig
from .lora import REGIMES, LoraConfig

# (section, key) -> (type tag, default, help)
SCHEMA: dict[tuple[str, str], tuple[str, object, str]] = {
    ("run", "seed"): ("int", 0, "master seed; every stage derives its own stream"),
    ("run", "out_dir"): ("str", "runs", "parent directory for run outputs"),
    ("run", "run_id"): ("str", "run", "name of this run's output directory"),
    ("run", "regime"): ("str", "backbone_shared", "separate | fully_shared | backbone_shared"),
    ("run", "lam"): ("float", 1.0, "loss weight for the generation term (fully_shared)"),
    ("run", "allow_raw_backbone"): ("bool", False, "accept a backbone checkpoint without the CPT-complete marker"),
    ("backbone", "vocab_size"): ("int", 260, "byte vocabulary plus the four specials"),
    ("backbone", "d_model"): ("int", 128, "hidden width"),
    ("backbone", "n_layers"): ("int", 4, "transformer layers"),
    ("backbone", "n_heads"): ("int", 4, "attention heads"),
    ("backbone", "d_ffn"): ("int", 512, "feed-forward width"),
    ("backbone", "max_seq_len"): ("int", 256, "context window in tokens"),
    ("lora", "rank"): ("int", 8, "adapter rank r"),
    ("lora", "alpha"): ("float", 16.0, "adapter scaling numerator"),
    ("cpt", "steps"): ("int", 400, "continual pre-training steps"),
    ("cpt", "lr"): ("float", 1e-3, "learning rate"),
    ("cpt", "batch_size"): ("int", 8, "documents per step"),
    ("cpt", "lr_warmup_steps"): ("int", 20, "linear LR warmup steps"),
    ("retrieval", "random_steps"): ("int", 150, "warmup steps on random negatives"),
    ("retrieval", "hard_steps"): ("int", 250, "steps on mined hard negatives"),
    ("retrieval", "lr"): ("float", 2e-3, "learning rate"),
    ("retrieval", "batch_size"): ("int", 4, "queries per step"),
    ("retrieval", "m"): ("int", 4, "negatives sampled per query per step"),
    ("retrieval", "temperature"): ("float", 0.05, "InfoNCE temperature"),
    ("retrieval", "mine_top"): ("int", 30, "hard-negative list cap"),
    ("retrieval", "lr_warmup_steps"): ("int", 10, "linear LR warmup steps"),
    ("generation", "steps"): ("int", 400, "instruction-tuning steps"),
    ("generation", "lr"): ("float", 2e-3, "learning rate"),
    ("generation", "batch_size"): ("int", 4, "tuples per step"),
    ("generation", "lr_warmup_steps"): ("int", 10, "linear LR warmup steps"),
    ("generation", "use_retrieved_docs"): ("bool", False, "train on retriever top-1 instead of gold docs"),
    ("fully_shared", "steps"): ("int", 400, "combined-loss steps"),
    ("fully_shared", "lr"): ("float", 2e-3, "learning rate"),
    ("fully_shared", "batch_size"): ("int", 4, "queries/tuples per step"),
    ("fully_shared", "m"): ("int", 4, "negatives sampled per query per step"),
    ("fully_shared", "temperature"): ("float", 0.05, "InfoNCE temperature"),
    ("fully_shared", "lr_warmup_steps"): ("int", 10, "linear LR warmup steps"),
    ("inference", "top_n"): ("int", 3, "documents retrieved into the prompt (1..3)"),
    ("inference", "max_new"): ("int", 64, "decode budget in tokens"),
    ("data", "min_length"): ("int", 200, "cleaning length threshold in characters"),
    ("data", "blocklist"): ("str", "", "comma-separated extra blocklist terms"),
    ("data", "dedup_threshold"): ("float", 0.85, "MinHash Jaccard dedup threshold"),
    ("data", "quality_threshold"): ("int", 2, "minimum quality score"),
    ("data", "minhash_p"): ("int", 128, "MinHash permutations"),
    ("data", "shingle_w"): ("int", 5, "shingle width in tokens"),
    ("data", "cpt_general_per_domain"): ("float", 5.0, "general:domain doc ratio for the CPT mix"),
    ("data", "triples_general_per_domain"): ("float", 10.0, "general:domain ratio for emitted triples"),
    ("synth", "n_docs"): ("int", 200, "synthetic corpus size"),
    ("synth", "n_facts_per_doc"): ("int", 3, "facts (and questions) per document"),
    ("synth", "heldout_per_doc"): ("int", 1, "held-out questions per document"),
    ("paths", "corpus"): ("str", "data/documents.jsonl", "document corpus"),
    ("paths", "cpt_corpus"): ("str", "data/cpt_corpus.jsonl", "pre-training text mix; falls back to corpus when absent"),
    ("paths", "general_corpus"): ("str", "data/general_documents.jsonl", "extra docs encodable during retrieval training"),
    ("paths", "triples"): ("str", "data/triples.jsonl", "retrieval training triples"),
    ("paths", "qda"): ("str", "data/qda.jsonl", "question-document-answer tuples"),
    ("paths", "qrels"): ("str", "data/qrels.txt", "relevance judgments"),
    ("paths", "queries"): ("str", "data/queries.txt", "inference/eval queries"),
}

ENV_SEED = "BSRK_SEED"


def _parse_value(tag: str, raw: str, where: str):
    if tag == "int":
        return int(raw)
    if tag == "float":
        return float(raw)
    if tag == "bool":
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{where}: expected a boolean, got {raw!r}")
    return raw


@dataclass
class RunConfig:
    """Typed view over the flat (section, key) table."""

    values: dict[tuple[str, str], object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {sk: default for sk, (_, default, _) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged
        if self["run", "regime"] not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self["run", "lam"] < 0:
            raise ValueError("lam must be >= 0")
        if not 1 <= self["inference", "top_n"] <= 3:
            raise ValueError("inference.top_n must be in 1..3")

    def __getitem__(self, section_key: tuple[str, str]):
        return self.values[section_key]

    @property
    def seed(self) -> int:
        return self["run", "seed"]

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            vocab_size=self["backbone", "vocab_size"],
            d_model=self["backbone", "d_model"],
            n_layers=self["backbone", "n_layers"],
            n_heads=self["backbone", "n_heads"],
            d_ffn=self["backbone", "d_ffn"],
            max_seq_len=self["backbone", "max_seq_len"],
        )

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self["lora", "rank"], alpha=self["lora", "alpha"])

    def section(self, name: str) -> dict[str, object]:
        return {k: v for (s, k), v in self.values.items() if s == name}

    def to_dict(self) -> dict:
        out: dict[str, dict] = {}
        for (section, key), value in sorted(self.values.items()):
            out.setdefault(section, {})[key] = value
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **section_key_values) -> "RunConfig":
        """New config with ("section.key", value) style keyword updates
        written as section__key=value."""
        values = dict(self.values)
        for name, value in section_key_values.items():
            section, _, key = name.partition("__")
            if (section, key) not in SCHEMA:
                raise KeyError(f"unknown config key {section}.{key}")
            values[(section, key)] = value
        return RunConfig(values)


def load_config(
    path: str | None = None,
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Assemble a RunConfig from file, environment, and CLI-style overrides.

    overrides maps "section.key" to raw strings (as a CLI would pass them).
    """
    env = os.environ if env is None else env
    values: dict[tuple[str, str], object] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, raw in parser.items(section):
                if (section, key) not in SCHEMA:
                    raise KeyError(f"unknown config key {section}.{key} in {path}")
                tag = SCHEMA[(section, key)][0]
                values[(section, key)] = _parse_value(tag, raw, f"{path}:{section}.{key}")
    if ENV_SEED in env:
        values[("run", "seed")] = int(env[ENV_SEED])
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if (section, key) not in SCHEMA:
            raise KeyError(f"unknown config key {dotted}")
        tag = SCHEMA[(section, key)][0]
        value = raw if not isinstance(raw, str) else _parse_value(tag, raw, dotted)
        values[(section, key)] = value
    return RunConfig(values)


def cli_flag(section: str, key: str) -> str:
    return f"--{section.replace('_', '-')}-{key.replace('_', '-')}"


def flag_to_key(flag_dest: str) -> tuple[str, str] | None:
    """Reverse an argparse dest like "run__seed" to ("run", "seed")."""
    section, _, key = flag_dest.partition("__")
    if (section, key) in SCHEMA:
        return (section, key)
    return None
