"""Adam optimization and seeded training utilities.

Every stage draws randomness from a purpose-keyed stream derived from the run
seed, so stages are reproducible independently and regimes that share a stage
consume identical random sequences.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import BackboneParams
from .lora import LoraAdapter


def stream_seed(seed: int, purpose: str) -> int:
    """A stable 64-bit sub-seed for one named random stream."""
    digest = hashlib.blake2b(f"{seed}:{purpose}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_rng(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(stream_seed(seed, purpose)))


class Adam:
    """Adam with bias correction, optional linear LR warmup, no weight decay.

    Refuses to manage frozen tensors: updating one is a hard error at
    construction, not a silent no-op.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        warmup_steps: int = 0,
    ):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        if warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        params = list(params)
        if not params:
            raise ValueError("no parameters to optimize")
        for p in params:
            if not p.requires_grad:
                raise ValueError("optimizer given a frozen tensor")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        ag.zero_grads(self.params)

    def current_lr(self) -> float:
        """LR after warmup scaling for the NEXT step."""
        t = self.t + 1
        if self.warmup_steps > 0 and t <= self.warmup_steps:
            return self.lr * t / self.warmup_steps
        return self.lr

    def step(self) -> None:
        lr_t = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if not p.requires_grad:
                raise ValueError("parameter was frozen after optimizer construction")
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / (1.0 - b1**self.t)
            v_hat = self._v[i] / (1.0 - b2**self.t)
            p.data -= lr_t * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise ag.NonFiniteError("non-finite parameter after Adam step")


def train_adapter_step(
    backbone: BackboneParams,
    adapter: LoraAdapter,
    optimizer: Adam,
    loss_fn: Callable[[BackboneParams, LoraAdapter], Tensor],
) -> float:
    """One optimization step against a frozen backbone; returns the loss value.

    The optimizer must own only adapter tensors; the backbone must be fully
    frozen so gradient flow cannot touch it.
    """
    if not backbone.frozen:
        raise ValueError("backbone must be frozen during adapter training")
    adapter_tensors = {id(t) for t in adapter.tensors.values()}
    for p in optimizer.params:
        if id(p) not in adapter_tensors:
            raise ValueError("optimizer holds a tensor that is not part of the adapter")
    optimizer.zero_grad()
    loss = loss_fn(backbone, adapter)
    ag.backward(loss)
    optimizer.step()
    return float(loss.data)


def sample_batch(rng: np.random.Generator, n_items: int, batch_size: int) -> list[int]:
    """Indices for one step: without replacement, at most the corpus size."""
    if n_items < 1:
        raise ValueError("nothing to sample from")
    size = min(batch_size, n_items)
    return [int(i) for i in rng.choice(n_items, size=size, replace=False)]
