"""Tiny decoder-only transformer language models.

Two forward paths share one parameter set:

* `logits_batch` — whole-sequence batched forward built from tape ops,
  used for training and for any scoring that must be differentiable.
* `DecodeState` — incremental per-token forward with a KV cache, used
  for sampling, continuation and teacher-forced scoring. Scoring and
  sampling run through this single code path, so a greedily decoded
  token always scores exactly at its row maximum.

Checkpoints are a one-line JSON header (config, parameter manifest with
offsets, role, optional vocab charset) followed by raw little-endian
float32 values in manifest order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .tensor import Tensor

CHECKPOINT_VERSION = 1

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


@dataclass(frozen=True)
class Vocab:
    """Fixed character-level vocabulary with PAD/BOS/EOS in front."""

    chars: str

    def __len__(self):
        return len(self.chars) + 3

    def encode(self, text: str) -> list[int]:
        try:
            return [self.chars.index(c) + 3 for c in text]
        except ValueError as e:
            raise ValueError(f"character not in vocab: {e}") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.chars[i - 3])
        return "".join(out)


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    context_len: int
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_len < 2:
            raise ValueError("context_len must be at least 2")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_manifest(cfg: LmConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs; checkpoint layout follows this order."""
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    entries = [("wte", (v, d)), ("wpe", (cfg.context_len, d))]
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        entries += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "w_q", (d, d)), (p + "w_k", (d, d)), (p + "w_v", (d, d)),
            (p + "w_o", (d, d)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w_up", (d, ff)), (p + "b_up", (ff,)),
            (p + "w_down", (ff, d)), (p + "b_down", (d,)),
        ]
    entries += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("w_out", (d, v))]
    return entries


@dataclass
class LanguageModel:
    config: LmConfig
    params: dict[str, Tensor]
    role: str = "student"
    vocab: Vocab | None = None

    def param_list(self) -> list[tuple[str, Tensor]]:
        return [(name, self.params[name]) for name, _ in param_manifest(self.config)]

    def copy(self, role: str | None = None) -> "LanguageModel":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return LanguageModel(self.config, params, role or self.role, self.vocab)

    def astype(self, dtype) -> "LanguageModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return LanguageModel(self.config, params, self.role, self.vocab)

    def freeze(self) -> "LanguageModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def check_finite(self):
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite parameter {name}")


def init_model(cfg: LmConfig, role: str = "student", vocab: Vocab | None = None,
               dtype=np.float32) -> LanguageModel:
    """Scaled-normal init, deterministic in cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    std = 0.02
    resid_std = std / np.sqrt(2.0 * cfg.n_layers)
    params: dict[str, Tensor] = {}
    for name, shape in param_manifest(cfg):
        if name.endswith(("ln1.g", "ln2.g", "ln_f.g")):
            arr = np.ones(shape)
        elif name.endswith((".b", "ln1.b", "ln2.b", "ln_f.b", "b_up", "b_down")):
            arr = np.zeros(shape)
        elif name.endswith(("w_o", "w_down")):
            arr = rng.normal(0.0, resid_std, size=shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return LanguageModel(cfg, params, role, vocab)


# ---------------------------------------------------------------------------
# batched whole-sequence forward (tape ops; differentiable)
# ---------------------------------------------------------------------------


def logits_batch(model: LanguageModel, ids: np.ndarray) -> Tensor:
    """Next-token logits for a batch: ids (B, T) -> logits (B, T, V).

    Records on the active tape when parameters require grad; otherwise a
    plain forward.
    """
    cfg = model.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ValueError("ids must be (B, T)")
    B, T = ids.shape
    if T > cfg.context_len:
        raise ValueError(f"sequence length {T} exceeds context {cfg.context_len}")
    P = model.params
    H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model

    pos = np.broadcast_to(np.arange(T), (B, T))
    x = tt.add(tt.embed_gather(P["wte"], ids), tt.embed_gather(P["wpe"], pos))

    causal = np.triu(np.full((T, T), -1e9, dtype=P["wte"].dtype), k=1)
    mask = tt.constant(np.broadcast_to(causal, (B * H, T, T)).copy())

    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h1 = tt.layernorm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        flat = tt.reshape(h1, (B * T, d))
        q = tt.matmul(flat, P[p + "w_q"])
        k = tt.matmul(flat, P[p + "w_k"])
        v = tt.matmul(flat, P[p + "w_v"])

        def heads(t):
            return tt.reshape(tt.transpose(tt.reshape(t, (B, T, H, hd)), (0, 2, 1, 3)),
                              (B * H, T, hd))

        q, k, v = heads(q), heads(k), heads(v)
        scores = tt.mul(tt.bmm(q, tt.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(hd))
        att = tt.softmax(tt.add(scores, mask))
        ctx = tt.bmm(att, v)
        ctx = tt.reshape(tt.transpose(tt.reshape(ctx, (B, H, T, hd)), (0, 2, 1, 3)),
                         (B * T, d))
        x = tt.add(x, tt.reshape(tt.matmul(ctx, P[p + "w_o"]), (B, T, d)))

        h2 = tt.layernorm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        up = tt.gelu(tt.add(tt.matmul(tt.reshape(h2, (B * T, d)), P[p + "w_up"]),
                            P[p + "b_up"]))
        down = tt.add(tt.matmul(up, P[p + "w_down"]), P[p + "b_down"])
        x = tt.add(x, tt.reshape(down, (B, T, d)))

    xf = tt.layernorm(x, P["ln_f.g"], P["ln_f.b"])
    logits = tt.matmul(tt.reshape(xf, (B * T, d)), P["w_out"])
    return tt.reshape(logits, (B, T, cfg.vocab_size))


# ---------------------------------------------------------------------------
# incremental forward (numpy only; sampling + teacher-forced scoring)
# ---------------------------------------------------------------------------


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


class DecodeState:
    """KV-cached forward over n parallel streams sharing positions."""

    def __init__(self, model: LanguageModel, n: int = 1):
        cfg = model.config
        self.model = model
        self.n = n
        self.t = 0
        dt = model.params["wte"].dtype
        self.k_cache = [np.empty((n, cfg.context_len, cfg.d_model), dtype=dt)
                        for _ in range(cfg.n_layers)]
        self.v_cache = [np.empty((n, cfg.context_len, cfg.d_model), dtype=dt)
                        for _ in range(cfg.n_layers)]

    def step(self, token_ids) -> np.ndarray:
        """Consume one token per stream; return next-token logits (n, V)."""
        cfg = self.model.config
        if self.t >= cfg.context_len:
            raise ValueError(f"context overflow at position {self.t}")
        ids = np.asarray(token_ids, dtype=np.int64)
        P = {k: v.data for k, v in self.model.params.items()}
        H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
        n, t = self.n, self.t
        inv_sqrt_hd = float(1.0 / np.sqrt(hd))

        x = P["wte"][ids] + P["wpe"][t]
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            h1 = _ln(x, P[p + "ln1.g"], P[p + "ln1.b"])
            self.k_cache[i][:, t] = h1 @ P[p + "w_k"]
            self.v_cache[i][:, t] = h1 @ P[p + "w_v"]
            q = (h1 @ P[p + "w_q"]).reshape(n, H, hd)
            ks = self.k_cache[i][:, :t + 1].reshape(n, t + 1, H, hd)
            vs = self.v_cache[i][:, :t + 1].reshape(n, t + 1, H, hd)
            scores = np.einsum("nhd,nshd->nhs", q, ks) * inv_sqrt_hd
            scores -= scores.max(axis=-1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=-1, keepdims=True)
            ctx = np.einsum("nhs,nshd->nhd", w, vs).reshape(n, d)
            x = x + ctx @ P[p + "w_o"]
            h2 = _ln(x, P[p + "ln2.g"], P[p + "ln2.b"])
            u = h2 @ P[p + "w_up"] + P[p + "b_up"]
            t3 = np.tanh(0.7978845608028654 * (u + 0.044715 * (u * u * u)))
            x = x + (0.5 * u * (1.0 + t3)) @ P[p + "w_down"] + P[p + "b_down"]
        xf = _ln(x, P["ln_f.g"], P["ln_f.b"])
        self.t += 1
        return xf @ P["w_out"]

    def feed(self, ids: list[int]) -> np.ndarray:
        """Feed the same token sequence to every stream; return last logits."""
        logits = None
        for tok in ids:
            logits = self.step(np.full(self.n, tok, dtype=np.int64))
        return logits


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def score_rows(model: LanguageModel, prompt: list[int], completions: list[list[int]]
               ) -> list[np.ndarray]:
    """Teacher-forced log-probability rows for completions of one prompt.

    Returns, per completion of length m, an (m, V) array where row i is
    the model's log distribution over token y_i given [BOS]+prompt+y_<i.
    """
    cfg = model.config
    if not completions or any(len(c) == 0 for c in completions):
        raise ValueError("completions must be non-empty")
    max_m = max(len(c) for c in completions)
    total = 1 + len(prompt) + max_m
    if total > cfg.context_len + 1:
        raise ValueError(f"prompt+completion length {total - 1} exceeds context {cfg.context_len}")
    n = len(completions)
    state = DecodeState(model, n)
    logits = state.feed([BOS_ID] + list(prompt))
    rows = np.empty((n, max_m, cfg.vocab_size), dtype=np.float64)
    padded = np.full((n, max_m), PAD_ID, dtype=np.int64)
    for j, c in enumerate(completions):
        padded[j, :len(c)] = c
    for i in range(max_m):
        rows[:, i] = _log_softmax_rows(logits.astype(np.float64))
        if i + 1 < max_m:
            logits = state.step(padded[:, i])
    return [rows[j, :len(c)] for j, c in enumerate(completions)]


def token_logprobs(model: LanguageModel, prompt: list[int], completion: list[int]
                   ) -> np.ndarray:
    """log q(y_i | prompt, y_<i) for each completion token."""
    rows = score_rows(model, prompt, [list(completion)])[0]
    return rows[np.arange(len(completion)), np.asarray(completion, dtype=np.int64)]


def sequence_logprob(model: LanguageModel, prompt: list[int], completion: list[int]
                     ) -> tuple[float, float]:
    """(total, per-token mean) log-probability of a completion."""
    lp = token_logprobs(model, prompt, completion)
    return float(lp.sum()), float(lp.mean())


def _nucleus_pick(probs: np.ndarray, top_p: float, u: np.ndarray) -> np.ndarray:
    """Vectorized nucleus sampling: keep the smallest top set with mass >= top_p."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    cum = np.cumsum(sorted_p, axis=-1)
    keep = (cum - sorted_p) < top_p  # token enters while accumulated mass is short
    sorted_p = np.where(keep, sorted_p, 0.0)
    sorted_p /= sorted_p.sum(axis=-1, keepdims=True)
    cum = np.cumsum(sorted_p, axis=-1)
    idx = (u[:, None] > cum).sum(axis=-1)
    idx = np.minimum(idx, probs.shape[-1] - 1)
    return np.take_along_axis(order, idx[:, None], axis=-1)[:, 0]


def sample(model: LanguageModel, prompt: list[int], n: int, max_new: int,
           temperature: float = 1.0, top_p: float = 1.0,
           rng: np.random.Generator | None = None, greedy: bool = False
           ) -> list[list[int]]:
    """Draw n completions for one prompt; each ends at EOS or max_new tokens.

    greedy=True is the temperature->0 limit (argmax decoding, rng unused).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive; use greedy=True for argmax")
    if not (0 < top_p <= 1):
        raise ValueError("top_p must be in (0, 1]")
    cfg = model.config
    budget = cfg.context_len - (1 + len(prompt))
    if budget <= 0:
        raise ValueError("prompt leaves no room to generate")
    max_new = min(max_new, budget)
    if not greedy and rng is None:
        rng = np.random.default_rng(0)

    state = DecodeState(model, n)
    logits = state.feed([BOS_ID] + list(prompt))
    seqs: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_new):
        if greedy:
            nxt = logits.argmax(axis=-1)
        else:
            z = (logits / temperature).astype(np.float64)
            z -= z.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            nxt = _nucleus_pick(p, top_p, rng.random(n))
        nxt = np.where(done, PAD_ID, nxt)
        for j in range(n):
            if not done[j]:
                seqs[j].append(int(nxt[j]))
        done |= nxt == EOS_ID
        if done.all():
            break
        logits = state.step(nxt)
    return seqs


def generate_batch(model: LanguageModel, prompts: list[list[int]], max_new: int,
                   greedy: bool = True, temperature: float = 1.0, top_p: float = 1.0,
                   rng: np.random.Generator | None = None) -> list[list[int]]:
    """Decode one completion per prompt; prompts must share a length.

    Streams that emit EOS early are frozen on PAD until the batch stops.
    """
    if not prompts:
        return []
    plen = len(prompts[0])
    if any(len(p) != plen for p in prompts):
        raise ValueError("generate_batch requires equal-length prompts")
    cfg = model.config
    budget = cfg.context_len - (1 + plen)
    if budget <= 0:
        raise ValueError("prompts leave no room to generate")
    max_new = min(max_new, budget)
    if not greedy and rng is None:
        rng = np.random.default_rng(0)
    n = len(prompts)
    cols = np.asarray(prompts, dtype=np.int64)
    state = DecodeState(model, n)
    logits = state.step(np.full(n, BOS_ID, dtype=np.int64))
    for t in range(plen):
        logits = state.step(cols[:, t])
    seqs: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for _ in range(max_new):
        if greedy:
            nxt = logits.argmax(axis=-1)
        else:
            z = (logits / temperature).astype(np.float64)
            z -= z.max(axis=-1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=-1, keepdims=True)
            nxt = _nucleus_pick(p, top_p, rng.random(n))
        nxt = np.where(done, PAD_ID, nxt)
        for j in range(n):
            if not done[j]:
                seqs[j].append(int(nxt[j]))
        done |= nxt == EOS_ID
        if done.all():
            break
        logits = state.step(nxt)
    return seqs


def continue_from(model: LanguageModel, prompt: list[int], prefix: list[int],
                  max_new: int, greedy: bool = True, temperature: float = 1.0,
                  top_p: float = 1.0, rng: np.random.Generator | None = None
                  ) -> list[int]:
    """Return prefix plus a model-generated suffix (greedy by default)."""
    prefix = list(prefix)
    if prefix and prefix[-1] == EOS_ID:
        return prefix
    cfg = model.config
    used = 1 + len(prompt) + len(prefix)
    if used >= cfg.context_len:
        raise ValueError("prompt+prefix leaves no room to generate")
    if not greedy and rng is None:
        rng = np.random.default_rng(0)
    state = DecodeState(model, 1)
    logits = state.feed([BOS_ID] + list(prompt) + prefix)
    out = list(prefix)
    for _ in range(min(max_new, cfg.context_len - used)):
        if greedy:
            nxt = int(logits.argmax(axis=-1)[0])
        else:
            z = (logits[0] / temperature).astype(np.float64)
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(_nucleus_pick(p[None, :], top_p, rng.random(1))[0])
        out.append(nxt)
        if nxt == EOS_ID:
            break
        logits = state.step(np.array([nxt]))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: LanguageModel, path):
    manifest = []
    offset = 0
    for name, shape in param_manifest(model.config):
        manifest.append({"name": name, "shape": list(shape), "offset": offset})
        offset += int(np.prod(shape))
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.__dict__ | {},
        "manifest": manifest,
        "role": model.role,
        "vocab_chars": model.vocab.chars if model.vocab else None,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, _ in param_manifest(model.config):
            f.write(model.params[name].data.astype("<f4").tobytes())


def load_checkpoint(path) -> LanguageModel:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        raw = np.frombuffer(f.read(), dtype="<f4")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    cfg = LmConfig(**header["config"])
    params = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape))
        arr = raw[entry["offset"]:entry["offset"] + size].reshape(shape)
        params[entry["name"]] = Tensor(arr.astype(np.float32), requires_grad=True)
    expected = dict(param_manifest(cfg))
    if set(expected) != set(params) or any(params[k].shape != expected[k] for k in expected):
        raise ValueError("checkpoint manifest does not match config-derived shapes")
    vocab = Vocab(header["vocab_chars"]) if header.get("vocab_chars") else None
    return LanguageModel(cfg, params, header.get("role", "student"), vocab)
