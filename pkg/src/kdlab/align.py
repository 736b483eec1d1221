"""Preference alignment of the student toward teacher-repaired sequences.

DPO (default), a hinge variant, and SimPO. The policy side is scored
with the differentiable batched forward; the frozen reference uses the
same forward code without a tape, so at initialization the two sides
cancel exactly and the DPO loss is ln 2 to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .model import (BOS_ID, EOS_ID, LanguageModel, logits_batch,
                    sequence_logprob)
from .tensor import Tape, Tensor
from .training import Adam, derive_seed
from .warmup import PreferencePair

VARIANTS = ("dpo", "hinge", "simpo")


@dataclass(frozen=True)
class AlignConfig:
    variant: str = "dpo"
    beta: float = 0.1
    hinge_margin: float = 1.0
    simpo_gamma: float = 0.5
    epochs: int = 1
    lr: float = 3e-6
    batch_size: int = 8
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown alignment variant {self.variant!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.hinge_margin < 0 or self.simpo_gamma < 0:
            raise ValueError("margins must be non-negative")


def bt_preference(reward_plus: float, reward_minus: float) -> float:
    """Bradley-Terry win probability sigma(r+ - r-)."""
    x = float(reward_plus) - float(reward_minus)
    if not np.isfinite(x):
        raise ValueError("rewards must be finite")
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))


def _encode_pairs(pairs: list[PreferencePair], vocab, context_len: int):
    """Tokenize pairs; completions get a terminal EOS and are truncated to fit."""
    rows = []
    for p in pairs:
        prompt = vocab.encode(p.prompt)
        room = context_len - 1 - len(prompt)
        if room < 2:
            raise ValueError("prompt leaves no room for completions")
        chosen = vocab.encode(p.chosen)[: room - 1] + [EOS_ID]
        rejected = vocab.encode(p.rejected)[: room - 1] + [EOS_ID]
        rows.append((prompt, chosen, rejected))
    return rows


def _batch_ids(encoded, which: str):
    """Stack [BOS]+prompt+completion rows, right-padded; mask completions."""
    seqs, masks, lens = [], [], []
    for prompt, chosen, rejected in encoded:
        comp = chosen if which == "chosen" else rejected
        full = [BOS_ID] + list(prompt) + list(comp)
        seqs.append(full)
        masks.append([0] * len(prompt) + [1] * len(comp))
        lens.append(len(comp))
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L - 1), dtype=np.float32)
    for i, (s, m) in enumerate(zip(seqs, masks)):
        ids[i, :len(s)] = s
        mask[i, :len(m)] = m
    return ids, mask, np.asarray(lens, dtype=np.float64)


def _sequence_sums(model: LanguageModel, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sequence sum of masked token log-probs; differentiable in model."""
    logits = logits_batch(model, ids[:, :-1])
    targets = ids[:, 1:]
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    picked = tt.mul(tt.log_softmax(logits), tt.constant(onehot))
    return tt.reduce_sum(tt.reduce_sum(picked, axis=2), axis=1)


def _pair_batch_loss(policy: LanguageModel, pairs_part, ref_sums, config: AlignConfig
                     ) -> tuple[Tensor, Tensor]:
    """(mean loss, inner bracket tensor) for a list of encoded pairs."""
    ids_c, mask_c, len_c = _batch_ids(pairs_part, "chosen")
    ids_r, mask_r, len_r = _batch_ids(pairs_part, "rejected")
    pol_c = _sequence_sums(policy, ids_c, mask_c)
    pol_r = _sequence_sums(policy, ids_r, mask_r)
    if config.variant == "simpo":
        inv_c = tt.constant((1.0 / len_c).astype(pol_c.dtype))
        inv_r = tt.constant((1.0 / len_r).astype(pol_r.dtype))
        inner = tt.mul(tt.mul(pol_c, inv_c) - tt.mul(pol_r, inv_r), config.beta)
        inner = tt.add(inner, tt.constant(np.full(inner.shape, -config.simpo_gamma,
                                                  dtype=inner.dtype)))
        loss = tt.reduce_mean(tt.mul(tt.logsigmoid(inner), -1.0))
        return loss, inner
    ref_c, ref_r = ref_sums
    diff = (pol_c - tt.constant(ref_c)) - (pol_r - tt.constant(ref_r))
    inner = tt.mul(diff, config.beta)
    if config.variant == "dpo":
        loss = tt.reduce_mean(tt.mul(tt.logsigmoid(inner), -1.0))
    else:  # hinge
        margin = tt.constant(np.full(inner.shape, config.hinge_margin, dtype=inner.dtype))
        loss = tt.reduce_mean(tt.relu(margin - inner))
    return loss, inner


def _reference_sums(reference: LanguageModel, encoded):
    ids_c, mask_c, _ = _batch_ids(encoded, "chosen")
    ids_r, mask_r, _ = _batch_ids(encoded, "rejected")
    return (_sequence_sums(reference, ids_c, mask_c).data,
            _sequence_sums(reference, ids_r, mask_r).data)


def preference_loss(policy: LanguageModel, reference: LanguageModel | None,
                    pair: PreferencePair, config: AlignConfig) -> Tensor:
    """Scalar alignment loss for one pair; gradients reach only the policy."""
    if not pair.chosen or not pair.rejected:
        raise ValueError("pair has an empty side")
    vocab = policy.vocab
    encoded = _encode_pairs([pair], vocab, policy.config.context_len)
    ref_sums = None
    if config.variant != "simpo":
        if reference is None:
            raise ValueError(f"{config.variant} needs a reference model")
        ref_sums = _reference_sums(reference, encoded)
    loss, _ = _pair_batch_loss(policy, encoded, ref_sums, config)
    return loss


def warmup_align(student: LanguageModel, pairs: list[PreferencePair],
                 config: AlignConfig, seed: int = 0
                 ) -> tuple[LanguageModel, dict]:
    """Optimize a copy of the student on preference pairs.

    The frozen reference is the pre-alignment student itself. Returns the
    aligned model (role student_warmup) and a report with the loss curve
    and the end-of-training implicit accuracy (fraction of pairs whose
    inner bracket is positive).
    """
    if not pairs:
        raise ValueError("no preference pairs to align on")
    policy = student.copy(role="student_warmup")
    if config.epochs == 0:
        return policy, {"variant": config.variant, "beta": config.beta, "steps": 0,
                        "final_loss": float("nan"), "implicit_accuracy": float("nan"),
                        "losses": []}
    reference = student.copy(role="reference").freeze()
    vocab = policy.vocab
    encoded = _encode_pairs(pairs, vocab, policy.config.context_len)
    ref_all = None
    if config.variant != "simpo":
        ref_all = _reference_sums(reference, encoded)

    rng = np.random.default_rng(derive_seed(seed, "align"))
    opt = Adam(policy.param_list(), config.lr)
    losses: list[float] = []
    for _ in range(config.epochs):
        order = rng.permutation(len(encoded))
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            part = [encoded[i] for i in idx]
            ref_part = None if ref_all is None else (ref_all[0][idx], ref_all[1][idx])
            opt.zero_grad()
            with Tape() as tape:
                loss, _ = _pair_batch_loss(policy, part, ref_part, config)
            value = float(loss.data)
            if not np.isfinite(value):
                raise FloatingPointError("non-finite alignment loss")
            tape.backward(loss)
            opt.clip_grads(config.clip_norm)
            opt.step()
            losses.append(value)

    ref_final = None if config.variant == "simpo" else ref_all
    _, inner = _pair_batch_loss(policy, encoded, ref_final, config)
    acc = float((inner.data > 0).mean())
    return policy, {"variant": config.variant, "beta": config.beta,
                    "steps": len(losses), "final_loss": losses[-1],
                    "implicit_accuracy": acc, "losses": losses}
