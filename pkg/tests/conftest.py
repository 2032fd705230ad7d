"""Shared fixtures: a tiny backbone that keeps every test fast."""

import numpy as np
import pytest

from raglab.backbone import BackboneConfig, init_backbone
from raglab.lora import LoraConfig, init_adapter


TINY = BackboneConfig(d_model=16, n_layers=2, n_heads=2, d_ffn=32, max_seq_len=48)
TINY_LORA = LoraConfig(rank=2, alpha=4.0)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_lora_cfg():
    return TINY_LORA


@pytest.fixture
def make_params():
    def _make(seed=0, frozen=True):
        params = init_backbone(TINY, seed)
        if frozen:
            params.freeze()
        return params

    return _make


@pytest.fixture
def make_adapter():
    def _make(role="retrieval", seed=1, rank=None, alpha=None, trainable=True):
        lcfg = TINY_LORA
        if rank is not None or alpha is not None:
            lcfg = LoraConfig(
                rank=TINY_LORA.rank if rank is None else rank,
                alpha=TINY_LORA.alpha if alpha is None else alpha,
            )
        adapter = init_adapter(TINY, lcfg, role, seed)
        if not trainable:
            adapter.freeze()
        return adapter

    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
