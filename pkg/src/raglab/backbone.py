"""Decoder-only transformer backbone.

Pre-norm blocks, learned absolute position embeddings, GELU MLP, causal
attention, byte-level vocabulary of 260. Weights live in a flat named-tensor
table so checkpointing, freezing, and parameter accounting can enumerate them
exhaustively. A low-rank adapter may be threaded through every linear
projection; the adapter is owned by the caller and the backbone never mutates
it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .tokenizer import EOS, PAD, VOCAB_SIZE, validate_ids

# Targets that accept a low-rank adapter delta, in layer order.
ADAPTER_TARGETS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.up", "mlp.down")

_MASK_NEG = -1e9
_INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 512
    max_seq_len: int = 256

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ffn", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ffn": self.d_ffn,
            "max_seq_len": self.max_seq_len,
        }


def param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Exhaustive named-tensor table: name -> shape, in checkpoint order."""
    v, d, f = config.vocab_size, config.d_model, config.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        shapes[pre + "ln1.gain"] = (d,)
        shapes[pre + "ln1.bias"] = (d,)
        shapes[pre + "attn.wq"] = (d, d)
        shapes[pre + "attn.wk"] = (d, d)
        shapes[pre + "attn.wv"] = (d, d)
        shapes[pre + "attn.wo"] = (d, d)
        shapes[pre + "ln2.gain"] = (d,)
        shapes[pre + "ln2.bias"] = (d,)
        shapes[pre + "mlp.up"] = (f, d)
        shapes[pre + "mlp.down"] = (d, f)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["out_proj"] = (v, d)
    return shapes


class BackboneParams:
    """Named parameter table plus its config. Linear weights are (out, in)."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            raise ValueError("tensor table does not match the expected named layout")
        for name, t in tensors.items():
            if t.data.shape != expected[name]:
                raise ValueError(f"tensor {name}: shape {t.data.shape} != {expected[name]}")
        self.config = config
        self.tensors = tensors

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors.values())

    def freeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "BackboneParams":
        for t in self.tensors.values():
            t.requires_grad = True
        return self

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}


def init_backbone(config: BackboneConfig, seed: int) -> BackboneParams:
    """Seeded init: weights ~ N(0, 0.02^2), norm gains 1, norm biases 0."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, _INIT_STD, size=shape)
        tensors[name] = ag.param(data)
    return BackboneParams(config, tensors)


def params_from_arrays(config: BackboneConfig, arrays: dict[str, np.ndarray]) -> BackboneParams:
    tensors = {name: ag.param(np.asarray(arr, dtype=np.float64)) for name, arr in arrays.items()}
    return BackboneParams(config, tensors)


# -------------------------------------------------------------------- forward


def _linear(x: Tensor, w: Tensor, delta) -> Tensor:
    """x @ w.T with an optional low-rank delta (a, b, scaling) added on top."""
    y = ag.matmul(x, ag.transpose(w, (1, 0)))
    if delta is not None:
        a, b, scaling = delta
        low = ag.matmul(ag.matmul(x, ag.transpose(a, (1, 0))), ag.transpose(b, (1, 0)))
        y = ag.add(y, ag.mul(low, ag.constant(scaling)))
    return y


def _adapter_delta(adapter, layer: int, target: str):
    if adapter is None:
        return None
    return adapter.delta(layer, target)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), _MASK_NEG), k=1)


def hidden_states(params: BackboneParams, ids: np.ndarray, adapter=None) -> Tensor:
    """Run the full stack on right-padded id batch (B, T); returns (B, T, d).

    Positions are causal, so padding appended after a sequence's last real
    token can never influence that token's hidden state.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, time) array")
    b, t = ids.shape
    cfg = params.config
    if t < 1:
        raise ValueError("sequences must be non-empty")
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")

    p = params.tensors
    x = ag.add(ag.take(p["tok_emb"], ids), ag.take(p["pos_emb"], np.arange(t)))
    mask = ag.constant(_causal_mask(t))
    scale = ag.constant(1.0 / np.sqrt(cfg.head_dim))

    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = ag.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
        q = _linear(h, p[pre + "attn.wq"], _adapter_delta(adapter, i, "attn.wq"))
        k = _linear(h, p[pre + "attn.wk"], _adapter_delta(adapter, i, "attn.wk"))
        v = _linear(h, p[pre + "attn.wv"], _adapter_delta(adapter, i, "attn.wv"))
        # (B, T, d) -> (B, H, T, head_dim)
        q = ag.transpose(ag.reshape(q, (b, t, cfg.n_heads, cfg.head_dim)), (0, 2, 1, 3))
        k = ag.transpose(ag.reshape(k, (b, t, cfg.n_heads, cfg.head_dim)), (0, 2, 1, 3))
        v = ag.transpose(ag.reshape(v, (b, t, cfg.n_heads, cfg.head_dim)), (0, 2, 1, 3))
        scores = ag.add(ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), scale), mask)
        ctx = ag.matmul(ag.softmax(scores), v)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = ag.add(x, _linear(ctx, p[pre + "attn.wo"], _adapter_delta(adapter, i, "attn.wo")))

        h = ag.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
        h = ag.gelu(_linear(h, p[pre + "mlp.up"], _adapter_delta(adapter, i, "mlp.up")))
        x = ag.add(x, _linear(h, p[pre + "mlp.down"], _adapter_delta(adapter, i, "mlp.down")))

    return ag.layer_norm(x, p["ln_f.gain"], p["ln_f.bias"])


def logits_tensor(params: BackboneParams, ids: np.ndarray, adapter=None) -> Tensor:
    """Vocabulary logits (B, T, V) with the graph attached."""
    h = hidden_states(params, ids, adapter)
    return ag.matmul(h, ag.transpose(params.tensors["out_proj"], (1, 0)))


def forward_logits(params: BackboneParams, ids, adapter=None) -> np.ndarray:
    """Logits (T, V) for one sequence; pure inference, no graph kept."""
    ids = list(ids)
    validate_ids(ids, params.config.max_seq_len)
    if not ids:
        raise ValueError("sequence must be non-empty")
    with ag.no_grad():
        return logits_tensor(params, np.asarray([ids]), adapter).data[0]


def pad_batch(seqs: list[list[int]], pad_id: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max length; returns (ids (B, T), lengths (B,))."""
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("sequences must be non-empty")
    t = int(lengths.max())
    ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def next_token_loss(params: BackboneParams, seqs: list[list[int]], adapter=None) -> Tensor:
    """Mean next-token NLL over all predicting positions in the batch.

    Each sequence contributes positions 1..len-1 as targets; the mean pools
    every target position across the batch with equal weight.
    """
    for s in seqs:
        validate_ids(s, params.config.max_seq_len)
        if len(s) < 2:
            raise ValueError("next-token loss needs sequences of length >= 2")
    ids, lengths = pad_batch(seqs)
    b, t = ids.shape
    targets = np.zeros((b, t), dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    mask = np.zeros((b, t))
    for i, n in enumerate(lengths):
        mask[i, : n - 1] = 1.0

    logp = ag.log_softmax(logits_tensor(params, ids, adapter))
    picked = ag.select_last(logp, targets)
    total = ag.tsum(ag.mul(picked, ag.constant(mask)))
    return ag.neg(ag.mul(total, ag.constant(1.0 / mask.sum())))


def masked_token_loss(params: BackboneParams, seqs: list[list[int]], masks: list[list[int]], adapter=None) -> Tensor:
    """Mean NLL over exactly the target positions flagged in `masks`.

    masks[i][j] == 1 means token j of sequence i is a prediction target
    (scored from position j-1). Position 0 can never be a target.
    """
    if len(seqs) != len(masks):
        raise ValueError("seqs and masks must align")
    ids, _ = pad_batch(seqs)
    b, t = ids.shape
    targets = np.zeros((b, t), dtype=np.int64)
    weight = np.zeros((b, t))
    n_targets = 0
    for i, (s, m) in enumerate(zip(seqs, masks)):
        if len(s) != len(m):
            raise ValueError("mask length must equal sequence length")
        if m[0]:
            raise ValueError("position 0 cannot be a prediction target")
        for j, flag in enumerate(m):
            if flag:
                targets[i, j - 1] = s[j]
                weight[i, j - 1] = 1.0
                n_targets += 1
    if n_targets == 0:
        raise ValueError("mask selects no target positions")

    logp = ag.log_softmax(logits_tensor(params, ids, adapter))
    picked = ag.select_last(logp, targets)
    total = ag.tsum(ag.mul(picked, ag.constant(weight)))
    return ag.neg(ag.mul(total, ag.constant(1.0 / n_targets)))


def greedy_decode(params: BackboneParams, prompt: list[int], max_new: int, adapter=None) -> list[int]:
    """Greedy continuation of `prompt`; ties break toward the lowest token id.

    Stops after emitting EOS, after max_new tokens, or when the context
    window is full. Returns only the generated ids (EOS included if emitted).
    """
    validate_ids(prompt, params.config.max_seq_len)
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    seq = list(prompt)
    out: list[int] = []
    with ag.no_grad():
        for _ in range(max_new):
            if len(seq) >= params.config.max_seq_len:
                break
            logits = logits_tensor(params, np.asarray([seq]), adapter).data[0, -1]
            nxt = int(np.argmax(logits))  # np.argmax returns the first (lowest) id on ties
            seq.append(nxt)
            out.append(nxt)
            if nxt == EOS:
                break
    return out


def sequence_logprob(params: BackboneParams, context: list[int], continuation: list[int], adapter=None) -> float:
    """log p(continuation | context) summed over continuation tokens."""
    if not context:
        raise ValueError("context must be non-empty")
    if not continuation:
        raise ValueError("continuation must be non-empty")
    full = list(context) + list(continuation)
    validate_ids(full, params.config.max_seq_len)
    with ag.no_grad():
        logits = logits_tensor(params, np.asarray([full]), adapter).data[0]
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    start = len(context)
    total = 0.0
    for j in range(start, len(full)):
        total += logp[j - 1, full[j]]
    return float(total)
