"""Adam training loop with gradient-norm clipping.

`fit` is objective-agnostic: the caller supplies a closure that builds a
scalar loss Tensor for a batch of dataset items. Every source of
randomness is derived from the config seed, so a run is reproducible
bit-for-bit on one machine.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .model import LanguageModel
from .tensor import Tape


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a path of labels (stage names, example ids)."""
    key = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little") >> 1


@dataclass
class OptConfig:
    lr: float = 3e-4
    steps: int = 100
    batch_size: int = 16
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("bad step/batch configuration")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    grad_norms: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


class Adam:
    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.t = 0

    def clip_grads(self, max_norm: float) -> float:
        total = 0.0
        for _, p in self.named:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / (norm + 1e-12)
            for _, p in self.named:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for n, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


def fit(model: LanguageModel, data: list, loss_fn, opt: OptConfig) -> TrainReport:
    """Run `opt.steps` Adam updates of `model` on shuffled batches of `data`.

    loss_fn(model, batch) must return a scalar loss Tensor built under the
    active tape. Aborts with the step index if the loss goes non-finite.
    """
    if not data:
        raise ValueError("empty training data")
    rng = np.random.default_rng(opt.seed)
    optimizer = Adam(model.param_list(), opt.lr, opt.beta1, opt.beta2, opt.eps)
    report = TrainReport()
    order: list[int] = []
    cursor = 0
    for step in range(opt.steps):
        if cursor + opt.batch_size > len(order):
            order = list(rng.permutation(len(data)))
            if len(order) < opt.batch_size:
                reps = -(-opt.batch_size // len(order))
                order = order * reps
            cursor = 0
        batch = [data[i] for i in order[cursor:cursor + opt.batch_size]]
        cursor += opt.batch_size

        optimizer.zero_grad()
        with Tape() as tape:
            loss = loss_fn(model, batch)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        tape.backward(loss)
        report.grad_norms.append(optimizer.clip_grads(opt.clip_norm))
        optimizer.step()
        report.losses.append(value)
        report.steps += 1
    return report
