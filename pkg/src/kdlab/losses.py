"""The distillation objective family.

Scalar `divergence` works on plain probability rows in float64 and is
the reference implementation checked against direct summation. `ce_loss`
and `kd_loss` build the same quantities out of tape ops so gradients
flow into student logits; teacher rows always enter as constants.

Divergences are proper (zero at equality): the KL variants use
sum p*log(p/q) rather than the cross-entropy form, which differs only
by the constant teacher entropy and therefore has identical student
gradients. Probabilities are clamped below at EPS before every log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor

EPS = 1e-12

KINDS = ("seqkd_ce", "fkl", "rkl", "tvd", "js", "skew_fkl", "akl")
DIVERGENCE_KINDS = ("fkl", "rkl", "tvd", "js", "skew_fkl", "akl")


@dataclass(frozen=True)
class DistillConfig:
    kind: str = "fkl"
    temperature: float = 2.0
    skew_lambda: float | None = None
    mix: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0.0 <= self.mix <= 1.0):
            raise ValueError("mix coefficient must lie in [0, 1]")
        if self.kind == "skew_fkl":
            lam = 0.1 if self.skew_lambda is None else self.skew_lambda
            if not (0.0 <= lam <= 1.0):
                raise ValueError("skew lambda must lie in [0, 1]")
            object.__setattr__(self, "skew_lambda", lam)
        elif self.skew_lambda is not None:
            raise ValueError("skew_lambda is only meaningful for kind='skew_fkl'")


def _validate_rows(p: np.ndarray, q: np.ndarray):
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"distribution rows must be 1-D and aligned, got {p.shape} vs {q.shape}")
    for name, row in (("p", p), ("q", q)):
        if row.min() < 0:
            raise ValueError(f"{name} has negative entries")
        if abs(row.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1 (sum={row.sum():.8f})")


def head_mask(p: np.ndarray, mass: float = 0.5) -> np.ndarray:
    """Smallest set of highest-probability tokens covering >= mass.

    Ties break toward the lower token id so the set is deterministic.
    """
    order = np.lexsort((np.arange(len(p)), -p))
    cum = np.cumsum(p[order])
    k = int(np.searchsorted(cum, mass - 1e-15)) + 1
    mask = np.zeros(len(p), dtype=bool)
    mask[order[:k]] = True
    return mask


def divergence(p, q, config: DistillConfig) -> float:
    """Distance from teacher row p to student row q under config.kind."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _validate_rows(p, q)
    kind = config.kind
    if kind not in DIVERGENCE_KINDS:
        raise ValueError(f"kind {kind!r} has no distribution-matching form")
    logp = np.log(np.maximum(p, EPS))
    logq = np.log(np.maximum(q, EPS))
    if kind == "fkl":
        return float(np.sum(p * (logp - logq)))
    if kind == "rkl":
        return float(np.sum(q * (logq - logp)))
    if kind == "tvd":
        return float(0.5 * np.abs(p - q).sum())
    if kind == "js":
        m = 0.5 * (p + q)
        logm = np.log(np.maximum(m, EPS))
        return float(0.5 * np.sum(p * (logp - logm)) + 0.5 * np.sum(q * (logq - logm)))
    if kind == "skew_fkl":
        mix = config.skew_lambda * p + (1.0 - config.skew_lambda) * q
        return float(np.sum(p * (logp - np.log(np.maximum(mix, EPS)))))
    if kind == "akl":
        diff = np.abs(p - q)
        head = head_mask(p)
        denom = diff.sum()
        w = 0.5 if denom == 0 else float(diff[head].sum() / denom)
        fkl = np.sum(p * (logp - logq))
        rkl = np.sum(q * (logq - logp))
        return float(w * fkl + (1.0 - w) * rkl)
    raise ValueError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# differentiable losses (tape ops)
# ---------------------------------------------------------------------------


def ce_loss(logits: Tensor, targets, reduction: str = "mean", mask=None) -> Tensor:
    """Token-level cross entropy: -sum_i log q(x_i | x_<i).

    logits: (T, V) or (B, T, V); targets: matching integer array. An
    optional {0,1} mask selects which positions count; the mean divides
    by the number of selected positions.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError("reduction must be 'sum' or 'mean'")
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} do not align with targets {targets.shape}")
    V = logits.shape[-1]
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    if mask is not None:
        mask = np.asarray(mask, dtype=logits.dtype)
        onehot *= mask[..., None]
        count = float(mask.sum())
    else:
        count = float(targets.size)
    if count == 0:
        raise ValueError("mask selects no positions")
    picked = tt.reduce_sum(tt.mul(tt.log_softmax(logits), tt.constant(onehot)))
    total = tt.mul(picked, -1.0)
    return total if reduction == "sum" else tt.mul(total, 1.0 / count)


def _per_position_divergence(p_rows: np.ndarray, logq: Tensor, q: Tensor,
                             config: DistillConfig) -> Tensor:
    """Divergence per position: constants from teacher rows, grads via q.

    p_rows: (..., V) teacher probabilities (constant); q / logq: matching
    student tensors (softmax and log-softmax of the same logits).
    Returns a (...)-shaped tensor.
    """
    kind = config.kind
    logp = np.log(np.maximum(p_rows, EPS))
    p_const = tt.constant(p_rows)
    ax = p_rows.ndim - 1

    def fkl_pos():
        ent = tt.constant((p_rows * logp).sum(axis=-1))
        return ent - tt.reduce_sum(tt.mul(p_const, logq), axis=ax)

    def rkl_pos():
        cross = tt.reduce_sum(tt.mul(q, tt.constant(logp)), axis=ax)
        return tt.reduce_sum(tt.mul(q, logq), axis=ax) - cross

    if kind == "fkl":
        return fkl_pos()
    if kind == "rkl":
        return rkl_pos()
    if kind == "tvd":
        return tt.mul(tt.reduce_sum(tt.absolute(q - p_const), axis=ax), 0.5)
    if kind == "js":
        m = tt.add(tt.mul(q, 0.5), tt.constant(0.5 * p_rows))
        logm = tt.log(tt.clamp_min(m, EPS))
        left = tt.constant((p_rows * logp).sum(axis=-1)) - tt.reduce_sum(tt.mul(p_const, logm), axis=ax)
        right = tt.reduce_sum(tt.mul(q, logq), axis=ax) - tt.reduce_sum(tt.mul(q, logm), axis=ax)
        return tt.mul(left + right, 0.5)
    if kind == "skew_fkl":
        lam = config.skew_lambda
        mix = tt.add(tt.mul(q, 1.0 - lam), tt.constant(lam * p_rows))
        logmix = tt.log(tt.clamp_min(mix, EPS))
        ent = tt.constant((p_rows * logp).sum(axis=-1))
        return ent - tt.reduce_sum(tt.mul(p_const, logmix), axis=ax)
    if kind == "akl":
        flat = p_rows.reshape(-1, p_rows.shape[-1])
        hmask = np.stack([head_mask(row) for row in flat]).astype(p_rows.dtype)
        hmask = hmask.reshape(p_rows.shape)
        diff = tt.absolute(q - p_const)
        head = tt.reduce_sum(tt.mul(diff, tt.constant(hmask)), axis=ax)
        total = tt.clamp_min(tt.reduce_sum(diff, axis=ax), 1e-30)
        w = tt.div(head, total)
        one = tt.constant(np.ones(w.shape, dtype=p_rows.dtype))
        return tt.add(tt.mul(w, fkl_pos()), tt.mul(one - w, rkl_pos()))
    raise ValueError(f"kind {kind!r} has no distribution-matching form")


def kd_loss(teacher_logits, student_logits: Tensor, config: DistillConfig,
            mask=None) -> Tensor:
    """Temperature-scaled distribution-matching loss.

    Mean over (unmasked) positions of divergence between the two
    temperature-softened rows, rescaled by tau^2 so gradient magnitudes
    stay comparable across temperatures. Teacher rows are constants.
    """
    tau = config.temperature
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_data.shape != student_logits.shape:
        raise ValueError(f"teacher {t_data.shape} / student {student_logits.shape} logits disagree")
    z = t_data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p_rows = e / e.sum(axis=-1, keepdims=True)

    s = tt.mul(student_logits, 1.0 / tau)
    q = tt.softmax(s)
    logq = tt.log_softmax(s)
    per_pos = _per_position_divergence(p_rows, logq, q, config)

    if mask is None:
        mean = tt.reduce_mean(tt.reshape(per_pos, (per_pos.size,)))
    else:
        mask = np.asarray(mask, dtype=p_rows.dtype)
        if mask.shape != per_pos.shape:
            raise ValueError("mask shape must match position grid")
        count = float(mask.sum())
        if count == 0:
            raise ValueError("mask selects no positions")
        mean = tt.mul(tt.reduce_sum(tt.mul(per_pos, tt.constant(mask))), 1.0 / count)
    return tt.mul(mean, tau * tau)


def combined_loss(ce, kd, alpha: float = 0.5):
    """alpha * ce + (1 - alpha) * kd, for tensors or plain numbers."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    if isinstance(ce, Tensor) or isinstance(kd, Tensor):
        ce = ce if isinstance(ce, Tensor) else tt.constant(np.asarray(ce))
        kd = kd if isinstance(kd, Tensor) else tt.constant(np.asarray(kd))
        return tt.add(tt.mul(ce, alpha), tt.mul(kd, 1.0 - alpha))
    return alpha * ce + (1.0 - alpha) * kd


# ---------------------------------------------------------------------------
# mode-seeking / mode-covering witness
# ---------------------------------------------------------------------------

BIMODAL_TARGET = np.array([0.02, 0.44, 0.02, 0.02, 0.02, 0.02, 0.44, 0.02])


def fit_unimodal(target: np.ndarray, kind: str, steps: int = 800, lr: float = 0.05,
                 mu0: float = 2.0, log_sigma0: float = -0.7) -> np.ndarray:
    """Gradient-fit a discretized Gaussian to `target` under fkl or rkl.

    The family q_i = softmax(-(i - mu)^2 / (2 sigma^2)) is unimodal by
    construction; the two free scalars are optimized with Adam. Returns
    the fitted probability row (float64). Forward KL spreads q over every
    target mode; reverse KL concentrates it on one.
    """
    if kind not in ("fkl", "rkl"):
        raise ValueError("witness supports fkl and rkl only")
    target = np.asarray(target, dtype=np.float64)
    n = len(target)
    grid = tt.constant(np.arange(n, dtype=np.float64))
    logp = tt.constant(np.log(np.maximum(target, EPS)))
    p_const = tt.constant(target)
    ent = float((target * np.log(np.maximum(target, EPS))).sum())

    mu = Tensor(np.array([mu0]), requires_grad=True)
    log_sigma = Tensor(np.array([log_sigma0]), requires_grad=True)
    from .training import Adam  # local import to avoid a cycle

    opt = Adam([("mu", mu), ("log_sigma", log_sigma)], lr)
    for _ in range(steps):
        opt.zero_grad()
        with tt.Tape() as tape:
            d = grid - tt.broadcast_scalar(mu, n)
            prec = tt.mul(tt.exp(tt.mul(log_sigma, -2.0)), -0.5)
            z = tt.mul(tt.mul(d, d), tt.broadcast_scalar(prec, n))
            q = tt.softmax(z)
            logq = tt.log_softmax(z)
            if kind == "fkl":
                loss = tt.constant(np.array(ent)) - tt.reduce_sum(tt.mul(p_const, logq))
            else:
                loss = tt.reduce_sum(tt.mul(q, logq)) - tt.reduce_sum(tt.mul(q, logp))
        tape.backward(loss)
        opt.step()
    with np.errstate(all="ignore"):
        z = -((np.arange(n) - float(mu.data[0])) ** 2) * 0.5 * np.exp(-2 * float(log_sigma.data[0]))
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()
