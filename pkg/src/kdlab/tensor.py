"""Dense-tensor reverse-mode autodiff.

A Tensor wraps a row-major numpy array plus an optional gradient slot.
Operations executed while a Tape is active are recorded (when any input
requires gradients); Tape.backward replays the records in reverse and
accumulates gradients onto every participating tensor.

Deliberately small surface: 2-D/3-D matmul, same-shape elementwise ops,
bias-add over the last axis, and the handful of nonlinearities the
language model and loss family need. No general broadcasting. Default
precision is float32; pass float64 arrays (or use `astype`) for
numerical checks.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPE = None


class Tensor:
    """Dense array with an optional grad slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype):
        t = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return t

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def constant(data, dtype=None):
    """Tensor that never takes gradients."""
    return Tensor(data, requires_grad=False, dtype=dtype)


class Tape:
    """Recording of forward operations, consumed once by backward().

    Use as a context manager; ops executed inside record themselves when
    any input requires gradients. Single-threaded by design.
    """

    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, root: Tensor):
        """Populate .grad on every recorded tensor that requires grad.

        root must be scalar (shape () or (1,)). A tape can only be walked
        once; a second call raises instead of silently producing wrong
        gradients.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward()")
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True
        root.grad = np.ones_like(root.data)
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    # backward rules return arrays safe to take ownership of
                    inp.grad = g if g.dtype == inp.data.dtype else g.astype(inp.data.dtype)
                else:
                    inp.grad += g


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(
        isinstance(i, Tensor) and i.requires_grad for i in inputs
    ):
        out.requires_grad = True
        tape._records.append((out, inputs, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product over stacked 2-D slices: (B,m,k) @ (B,k,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _record(out, (a, b), backward)


def add(a, b) -> Tensor:
    """Elementwise add; b may also be a 1-D bias broadcast over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = b.ndim == 1 and a.ndim > 1 and a.shape[-1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        if bias:
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        # distinct arrays so later in-place accumulation cannot alias
        return g, g.copy() if (a.requires_grad and b.requires_grad and a is not b) else g

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product (same shape), or scale by a python number."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        out = Tensor(a.data * c)

        def backward(g):
            return (g * c,)

        return _record(out, (a,), backward)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)

    def backward(g):
        return g * b.data, g * a.data

    return _record(out, (a, b), backward)


def div(a, b) -> Tensor:
    """Elementwise quotient, same shape."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"div shape mismatch: {a.shape} / {b.shape}")
    out = Tensor(a.data / b.data)
    _check_finite(out.data, "div")

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _record(out, (a, b), backward)


def embed_gather(table, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...]]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError("embed_gather expects a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embed_gather id out of range")
    out = Tensor(table.data[ids])

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), backward)


def layernorm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layernorm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = (gx_hat - m1 - xhat * m2) * inv
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax(x) -> Tensor:
    """log(softmax(x)) over the last axis, computed stably."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    p = np.exp(out.data)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    x = _as_tensor(x)
    x2 = x.data * x.data
    u = _GELU_C * (x.data + 0.044715 * (x2 * x.data))
    t = np.tanh(u)
    out = Tensor(0.5 * x.data * (1.0 + t))

    def backward(g):
        du = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _record(out, (x,), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def backward(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), backward)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.exp(x.data))
    _check_finite(out.data, "exp")

    def backward(g):
        return (g * out.data,)

    return _record(out, (x,), backward)


def log(x) -> Tensor:
    """Natural log; inputs must be strictly positive (clamp upstream)."""
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value; clamp first")
    out = Tensor(np.log(x.data))

    def backward(g):
        return (g / x.data,)

    return _record(out, (x,), backward)


def absolute(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.abs(x.data))

    def backward(g):
        return (g * np.sign(x.data),)

    return _record(out, (x,), backward)


def clamp_min(x, floor) -> Tensor:
    """max(x, floor) elementwise; gradient passes only where x > floor."""
    x = _as_tensor(x)
    floor = float(floor)
    out = Tensor(np.maximum(x.data, floor))

    def backward(g):
        return (g * (x.data > floor),)

    return _record(out, (x,), backward)


def logsigmoid(x) -> Tensor:
    """log(sigmoid(x)), computed without overflow."""
    x = _as_tensor(x)
    out = Tensor(np.where(x.data >= 0, -np.log1p(np.exp(-np.abs(x.data))),
                          x.data - np.log1p(np.exp(-np.abs(x.data)))))

    def backward(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        a = np.abs(x.data)
        s = np.exp(-a) / (1.0 + np.exp(-a))
        return (g * np.where(x.data >= 0, s, 1.0 - s),)

    return _record(out, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(old),)

    return _record(out, (x,), backward)


def transpose(x, axes) -> Tensor:
    """Permute axes."""
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))

    def backward(g):
        return (g.transpose(inv),)

    return _record(out, (x,), backward)


def slice_axis(x, axis, start, stop) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(x.data[idx]))

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), backward)


def reduce_sum(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=x.dtype),)
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis), x.shape)),)

    return _record(out, (x,), backward)


def reduce_mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g / n, dtype=x.dtype),)
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(g, axis) / n, x.shape)),)

    return _record(out, (x,), backward)


def broadcast_scalar(t: Tensor, n: int) -> Tensor:
    """Expand a scalar tensor to shape (n,) through a rank-1 matmul."""
    ones = constant(np.ones((n, 1), dtype=t.dtype))
    return reshape(matmul(ones, reshape(t, (1, 1))), (n,))


# ---------------------------------------------------------------------------
# numerical verification
# ---------------------------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 2.0**-20) -> float:
    """Max relative error between tape gradients and central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic. Run with
    float64 data; float32 has too little headroom at the default step.
    The default step is a power of two so that linear functions of exactly
    representable inputs check out to literally zero error.
    """
    x = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("non-finite f(x) in grad_check")
    tape.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x.data.copy())).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
