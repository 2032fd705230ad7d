"""Low-rank adapters and parameter-sharing regimes.

Every attention projection (wq, wk, wv, wo) and both MLP weights of every
layer carry one (A, B) pair: A is (rank, in), B is (out, rank), and the
adapted projection is W x + (alpha / rank) * B (A x). B starts at zero, so a
freshly initialized adapter is an exact identity on the backbone's
behaviour. Adapters never touch backbone tensors; training one adapter never
touches another.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import ADAPTER_TARGETS, BackboneConfig

ROLES = ("retrieval", "generation", "shared")
REGIMES = ("separate", "fully_shared", "backbone_shared")

_INIT_STD = 0.02


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 0:
            raise ValueError("rank must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def scaling(self) -> float:
        # rank 0 is a legal degenerate adapter (no parameters, no effect)
        return self.alpha / self.rank if self.rank else 0.0

    def to_dict(self) -> dict:
        return {"rank": self.rank, "alpha": self.alpha}


@dataclass(frozen=True)
class RegimeConfig:
    """Which parameter-sharing regime a run trains, and its mixing weight.

    `lam` weights the generation loss in the fully_shared joint objective and
    must be present exactly for that regime.
    """

    regime: str = "backbone_shared"
    lam: float | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if self.regime == "fully_shared":
            if self.lam is None:
                object.__setattr__(self, "lam", 1.0)
            if self.lam < 0:
                raise ValueError("lam must be >= 0")
        elif self.lam is not None:
            raise ValueError("lam is only meaningful for fully_shared")


def target_dims(config: BackboneConfig, target: str) -> tuple[int, int]:
    """(out_dim, in_dim) of one adapted projection."""
    d, f = config.d_model, config.d_ffn
    if target in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        return (d, d)
    if target == "mlp.up":
        return (f, d)
    if target == "mlp.down":
        return (d, f)
    raise ValueError(f"unknown adapter target {target!r}")


def adapter_shapes(backbone_config: BackboneConfig, lora_config: LoraConfig) -> dict[str, tuple[int, ...]]:
    """Exhaustive named-tensor table for one adapter, in checkpoint order."""
    r = lora_config.rank
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(backbone_config.n_layers):
        for target in ADAPTER_TARGETS:
            out_dim, in_dim = target_dims(backbone_config, target)
            shapes[f"layers.{i}.{target}.lora_a"] = (r, in_dim)
            shapes[f"layers.{i}.{target}.lora_b"] = (out_dim, r)
    return shapes


class LoraAdapter:
    """Named (A, B) pairs for every target of every layer."""

    def __init__(self, backbone_config: BackboneConfig, config: LoraConfig, role: str, tensors: dict[str, Tensor]):
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        expected = adapter_shapes(backbone_config, config)
        if list(tensors) != list(expected):
            raise ValueError("adapter tensor table does not match the expected layout")
        for name, t in tensors.items():
            if t.data.shape != expected[name]:
                raise ValueError(f"tensor {name}: shape {t.data.shape} != {expected[name]}")
        self.backbone_config = backbone_config
        self.config = config
        self.role = role
        self.tensors = tensors

    @property
    def scaling(self) -> float:
        return self.config.scaling

    def delta(self, layer: int, target: str):
        """(A, B, scaling) for one projection."""
        pre = f"layers.{layer}.{target}."
        return (self.tensors[pre + "lora_a"], self.tensors[pre + "lora_b"], self.scaling)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def freeze(self) -> "LoraAdapter":
        for t in self.tensors.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "LoraAdapter":
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}


def init_adapter(
    backbone_config: BackboneConfig,
    lora_config: LoraConfig,
    role: str,
    seed: int,
) -> LoraAdapter:
    """Seeded init: A ~ N(0, 0.02^2), B = 0 (identity at initialization)."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in adapter_shapes(backbone_config, lora_config).items():
        if name.endswith("lora_a"):
            data = rng.normal(0.0, _INIT_STD, size=shape)
        else:
            data = np.zeros(shape)
        tensors[name] = ag.param(data)
    return LoraAdapter(backbone_config, lora_config, role, tensors)


def adapter_from_arrays(
    backbone_config: BackboneConfig,
    lora_config: LoraConfig,
    role: str,
    arrays: dict[str, np.ndarray],
) -> LoraAdapter:
    tensors = {name: ag.param(np.asarray(arr, dtype=np.float64)) for name, arr in arrays.items()}
    return LoraAdapter(backbone_config, lora_config, role, tensors)


def merged_weight(w: np.ndarray, a: np.ndarray, b: np.ndarray, scaling: float) -> np.ndarray:
    """The dense weight an adapted projection is equivalent to: W + scaling * B A."""
    return w + scaling * (b @ a)


def backbone_parameter_count(config: BackboneConfig) -> int:
    v, d, f, s, n = config.vocab_size, config.d_model, config.d_ffn, config.max_seq_len, config.n_layers
    per_layer = 4 * d * d + 2 * d * f + 4 * d
    return v * d + s * d + n * per_layer + 2 * d + v * d


def adapter_parameter_count(backbone_config: BackboneConfig, lora_config: LoraConfig) -> int:
    r, d, f, n = lora_config.rank, backbone_config.d_model, backbone_config.d_ffn, backbone_config.n_layers
    per_layer = 4 * (r * d + d * r) + (r * d + f * r) + (r * f + d * r)
    return n * per_layer


def count_parameters(
    backbone_config: BackboneConfig,
    lora_config: LoraConfig,
    regime: str,
) -> dict:
    """Trainable/stored parameter breakdown for one regime.

    separate: two independent backbone copies, each with its own adapter.
    fully_shared: one backbone, one adapter serving both tasks.
    backbone_shared: one frozen backbone, one retrieval + one generation adapter.
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}")
    backbone = backbone_parameter_count(backbone_config)
    adapter = adapter_parameter_count(backbone_config, lora_config)
    n_backbones = 2 if regime == "separate" else 1
    n_adapters = 1 if regime == "fully_shared" else 2
    return {
        "regime": regime,
        "backbone_each": backbone,
        "n_backbones": n_backbones,
        "adapter_each": adapter,
        "n_adapters": n_adapters,
        "total": n_backbones * backbone + n_adapters * adapter,
    }
