"""Minimal dense tensor library with reverse-mode automatic differentiation.

Only the operations the cross-attention model and its losses need are
implemented. Arrays are numpy (float32 or float64), gradients are recorded
on an explicit Tape and replayed in exact reverse execution order.

Broadcasting is deliberately restricted to scalar-times-tensor; anything
else requires an explicit reshape/repeat. Every op output is checked for
NaN/Inf and raises instead of propagating silently.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

SIGMOID_EPS = 1e-7  # probabilities are clamped to [eps, 1-eps] before any log

_ACTIVE_TAPE: Optional["Tape"] = None


class TensorError(ValueError):
    """Shape mismatch, non-finite values, or misuse of the tape."""


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense n-dimensional float array, optionally participating in a tape.

    A Tensor outside any active Tape is a plain immutable value; ops on it
    never record gradients. `requires_grad` marks leaves whose gradient
    should be accumulated into `.grad` by `backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise TensorError("non-finite values in tensor data")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant copy detached from any tape."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are the only permitted broadcast
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(scale(self, -1.0), float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    def slice(self, axis: int, start: int, stop: int) -> "Tensor":
        return slice_along(self, axis, start, stop)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


class Tape:
    """Ordered record of executed differentiable ops.

    Use as a context manager; ops executed inside record themselves. The
    backward pass walks records in exact reverse execution order. Clearing
    drops all records (and with them the saved intermediates captured in
    the backward closures).

    Single-threaded: no two threads may record onto one tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], list]]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TensorError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out: Tensor, backward_fn):
        self._records.append((out, backward_fn))

    def __len__(self):
        return len(self._records)

    def clear(self):
        self._records.clear()

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Repeated calls without zeroing the leaves accumulate again.
        """
        if loss.data.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TensorError("loss was not recorded on this tape")
        # pass-local gradients; reverse execution order is a valid
        # topological order, so each record sees its output's full gradient
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for out, backward_fn in reversed(self._records):
            entry = pending.pop(id(out), None)
            if entry is None:
                continue
            for inp, contrib in backward_fn(entry[1]):
                key = id(inp)
                if key in pending:
                    pending[key] = (inp, pending[key][1] + contrib)
                else:
                    pending[key] = (inp, contrib)
        # entries never popped belong to leaves (tensors no record produced)
        for tensor, g in pending.values():
            if tensor.requires_grad:
                if tensor.grad is None:
                    tensor.grad = g.copy()
                else:
                    tensor.grad = tensor.grad + g


def backward(loss: Tensor):
    """Run the backward pass for `loss` on the tape that recorded it."""
    if loss._tape is None:
        raise TensorError("loss is not attached to any tape")
    loss._tape.backward(loss)


def _result(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; record it if a tape is active and grads are needed."""
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._tape = tape
        tape._record(out, backward_fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; `b` may be a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)

        def bwd_s(g, a=a):
            return [(a, g)] if a.requires_grad else []

        return _result(a.data + c, [a], bwd_s)
    _check_same_shape(a, b, "add")

    def bwd(g, a=a, b=b):
        out = []
        if a.requires_grad:
            out.append((a, g))
        if b.requires_grad:
            out.append((b, g))
        return out

    return _result(a.data + b.data, [a, b], bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; `b` may be a python scalar."""
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_shape(a, b, "mul")

    def bwd(g, a=a, b=b):
        out = []
        if a.requires_grad:
            out.append((a, g * b.data))
        if b.requires_grad:
            out.append((b, g * a.data))
        return out

    return _result(a.data * b.data, [a, b], bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar (the one permitted broadcast)."""
    c = float(c)

    def bwd(g, a=a):
        return [(a, g * c)] if a.requires_grad else []

    return _result(a.data * c, [a], bwd)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for scalar p; differentiable for positive base."""
    p = float(p)

    def bwd(g, a=a):
        if not a.requires_grad:
            return []
        if p == 0.0:
            return [(a, np.zeros_like(a.data))]
        return [(a, g * p * np.power(a.data, p - 1.0))]

    return _result(np.power(a.data, p), [a], bwd)


def log(a: Tensor) -> Tensor:
    """Elementwise natural log; input must be strictly positive."""

    def bwd(g, a=a):
        return [(a, g / a.data)] if a.requires_grad else []

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, [a], bwd)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function with outputs clamped to [eps, 1-eps], eps=1e-7.

    Clamping keeps subsequent logs finite; the gradient uses the clamped
    output, so it is ~eps (not exactly zero) in deep saturation.
    """
    s = 1.0 / (1.0 + np.exp(-a.data))
    s = np.clip(s, SIGMOID_EPS, 1.0 - SIGMOID_EPS)

    def bwd(g, a=a, s=s):
        return [(a, g * s * (1.0 - s))] if a.requires_grad else []

    return _result(s, [a], bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact gaussian error linear unit, x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g, a=a, x=x, phi=phi):
        if not a.requires_grad:
            return []
        d = phi + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return [(a, g * d)]

    return _result(out, [a], bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def bwd(g, a=a):
        return [(a, np.full_like(a.data, float(g)))] if a.requires_grad else []

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), [a], bwd)


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements, as a scalar tensor."""
    n = a.data.size

    def bwd(g, a=a, n=n):
        return [(a, np.full_like(a.data, float(g) / n))] if a.requires_grad else []

    return _result(np.asarray(a.data.mean(), dtype=a.data.dtype), [a], bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def bwd(g, a=a):
        return [(a, g.reshape(a.shape))] if a.requires_grad else []

    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise TensorError(f"reshape {a.shape} -> {shape}: {e}") from None
    return _result(out, [a], bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise TensorError(f"transpose expects a matrix, got shape {a.shape}")

    def bwd(g, a=a):
        return [(a, g.T)] if a.requires_grad else []

    return _result(a.data.T.copy(), [a], bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along `axis`; all other extents must agree."""
    tensors = list(tensors)
    if not tensors:
        raise TensorError("concat of zero tensors")
    nd = tensors[0].ndim
    for t in tensors:
        if t.ndim != nd:
            raise TensorError("concat: rank mismatch")
    if not -nd <= axis < nd:
        raise TensorError(f"concat: axis {axis} out of range for rank {nd}")
    axis = axis % nd
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise TensorError(f"concat: {e}") from None
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tensors, offsets=offsets, axis=axis):
        res = []
        idx = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx[axis] = slice(lo, hi)
                res.append((t, g[tuple(idx)]))
        return res

    return _result(out, tensors, bwd)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along `axis`."""
    if not -a.ndim <= axis < a.ndim:
        raise TensorError(f"slice: axis {axis} out of range for rank {a.ndim}")
    axis = axis % a.ndim
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise TensorError(f"slice [{start}:{stop}) out of range for extent {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g, a=a, idx=idx):
        if not a.requires_grad:
            return []
        full = np.zeros_like(a.data)
        full[idx] = g
        return [(a, full)]

    return _result(a.data[idx].copy(), [a], bwd)


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat a leading-extent-1 tensor `times` times along axis 0."""
    if a.shape[0] != 1:
        raise TensorError(f"repeat_rows expects leading extent 1, got {a.shape}")

    def bwd(g, a=a):
        return [(a, g.sum(axis=0, keepdims=True))] if a.requires_grad else []

    return _result(np.repeat(a.data, times, axis=0), [a], bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise TensorError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: inner dims differ, {a.shape} x {b.shape}")

    def bwd(g, a=a, b=b):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out

    return _result(a.data @ b.data, [a, b], bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x:[n,k], w:[k,m], b:[m] (a fused linear layer)."""
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise TensorError(f"affine: bad ranks {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise TensorError(f"affine: dims differ, {x.shape} @ {w.shape} + {b.shape}")

    def bwd(g, x=x, w=w, b=b):
        out = []
        if x.requires_grad:
            out.append((x, g @ w.data.T))
        if w.requires_grad:
            out.append((w, x.data.T @ g))
        if b.requires_grad:
            out.append((b, g.sum(axis=0)))
        return out

    return _result(x.data @ w.data + b.data, [x, w, b], bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by per-row max subtraction."""
    if a.ndim != 2:
        raise TensorError(f"softmax_rows expects a matrix, got {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g, a=a, s=s):
        if not a.requires_grad:
            return []
        dot = (g * s).sum(axis=1, keepdims=True)
        return [(a, s * (g - dot))]

    return _result(s, [a], bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last dimension, then apply gain and bias."""
    if eps <= 0:
        raise TensorError("layer_norm eps must be positive")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise TensorError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match last dim {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bwd(g, a=a, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
        out = []
        if a.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            out.append((a, inv * (gy - m1 - xhat * m2)))
        if gain.requires_grad:
            out.append((gain, (g * xhat).reshape(-1, d).sum(axis=0)))
        if bias.requires_grad:
            out.append((bias, g.reshape(-1, d).sum(axis=0)))
        return out

    return _result(xhat * gain.data + bias.data, [a, gain, bias], bwd)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between vectors (1-d) or between matching rows (2-d)."""
    _check_same_shape(a, b, "cosine_similarity")
    if a.ndim == 1:
        x = a.data[None, :]
        y = b.data[None, :]
    elif a.ndim == 2:
        x = a.data
        y = b.data
    else:
        raise TensorError(f"cosine_similarity expects rank 1 or 2, got {a.shape}")
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise TensorError("cosine_similarity of a zero-norm vector")
    cos = (x * y).sum(axis=1) / (nx * ny)

    def bwd(g, a=a, b=b, x=x, y=y, nx=nx, ny=ny, cos=cos):
        out = []
        gc = np.atleast_1d(g).reshape(-1, 1)
        if a.requires_grad:
            da = gc * (y / (nx * ny)[:, None] - cos[:, None] * x / (nx * nx)[:, None])
            out.append((a, da.reshape(a.shape)))
        if b.requires_grad:
            db = gc * (x / (nx * ny)[:, None] - cos[:, None] * y / (ny * ny)[:, None])
            out.append((b, db.reshape(b.shape)))
        return out

    out_data = cos[0] if a.ndim == 1 else cos
    return _result(np.asarray(out_data, dtype=a.data.dtype), [a, b], bwd)


def weighted_rows_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Per-batch weighted sum of rows: [B,n] x [B,n,m] -> [B,m]."""
    if weights.ndim != 2 or values.ndim != 3 or weights.shape != values.shape[:2]:
        raise TensorError(
            f"weighted_rows_sum: incompatible shapes {weights.shape} and {values.shape}"
        )

    def bwd(g, weights=weights, values=values):
        out = []
        if weights.requires_grad:
            out.append((weights, np.einsum("bm,bnm->bn", g, values.data)))
        if values.requires_grad:
            out.append((values, np.einsum("bn,bm->bnm", weights.data, g)))
        return out

    return _result(np.einsum("bn,bnm->bm", weights.data, values.data), [weights, values], bwd)


# ---------------------------------------------------------------------------
# tiny patch extractor convolution


def _im2col3(x: np.ndarray) -> np.ndarray:
    """[B,h,w,c] -> [B*h*w, 9c] of 3x3 neighbourhoods, zero-padded."""
    b, h, w, c = x.shape
    padded = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    padded[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9 * c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[..., k * c : (k + 1) * c] = padded[:, dy : dy + h, dx : dx + w, :]
            k += 1
    return cols.reshape(b * h * w, 9 * c)


def _col2im3(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _im2col3: scatter-add [B*h*w, 9c] back to [B,h,w,c]."""
    b, h, w, c = shape
    cols = cols.reshape(b, h, w, 9 * c)
    padded = np.zeros((b, h + 2, w + 2, c), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            padded[:, dy : dy + h, dx : dx + w, :] += cols[..., k * c : (k + 1) * c]
            k += 1
    return padded[:, 1:-1, 1:-1, :]


def conv3x3_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 same-padding convolution mixing local patches: [B,h,w,c] -> [B,h,w,m].

    Weights are [9c, m] (neighbourhood offsets unrolled row-major), bias [m].
    """
    if x.ndim != 4:
        raise TensorError(f"conv3x3_same expects [B,h,w,c], got {x.shape}")
    bsz, h, wd, c = x.shape
    if w.ndim != 2 or w.shape[0] != 9 * c or b.shape != (w.shape[1],):
        raise TensorError(f"conv3x3_same: weight {w.shape} / bias {b.shape} mismatch c={c}")
    m = w.shape[1]
    cols = _im2col3(x.data)
    out = (cols @ w.data + b.data).reshape(bsz, h, wd, m)

    def bwd(g, x=x, w=w, b=b, cols=cols, shape=(bsz, h, wd, c), m=m):
        out2 = []
        g2 = g.reshape(-1, m)
        if x.requires_grad:
            out2.append((x, _col2im3(g2 @ w.data.T, shape)))
        if w.requires_grad:
            out2.append((w, cols.T @ g2))
        if b.requires_grad:
            out2.append((b, g2.sum(axis=0)))
        return out2

    return _result(out, [x, w, b], bwd)


# ---------------------------------------------------------------------------
# parameter initialisation


def uniform_param(rng: np.random.Generator, shape, fan_in: int = None, dtype=np.float64) -> Tensor:
    """Trainable tensor initialised uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    fan_in defaults to the first extent of `shape` (input dimension of a
    weight matrix laid out [in, out]); tokens and biases pass it explicitly.
    """
    shape = tuple(shape)
    if fan_in is None:
        fan_in = shape[0]
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=True)


def zero_grads(params):
    for p in params:
        p.grad = None
