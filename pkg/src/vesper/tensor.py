"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Operations are
plain functions; while a Tape is active they append backward closures to it.
Recording is lazy: an op is taped only if at least one input can reach a
trainable leaf, so forward passes through frozen parameters cost nothing
extra.

Gradients accumulate additively into leaf ``.grad`` buffers; call
``zero_grad`` between backward passes that should not sum.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NonFiniteValues, ShapeMismatch

# Toggle for the per-op NaN/Inf guard. On by default; tests that probe
# overflow behaviour may switch it off locally.
FINITE_CHECKS = True

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """An ndarray with an optional gradient buffer.

    ``requires_grad`` marks a trainable leaf. Tensors produced by ops keep
    the default False; their transient gradients live on the tape during
    backward and are never exposed.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's array, cut off from the graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Sugar for the handful of spots where operator syntax reads better.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, float(other))

    __rmul__ = __mul__


class Tape:
    """Ordered record of taped ops, consumed in reverse by backward()."""

    def __init__(self):
        # (output, inputs, grad_fn); grad_fn maps d(output) -> per-input grads
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        # ids of tensors that can reach a trainable leaf
        self._reaching: set[int] = set()
        # ids of tensors produced by a taped op (non-leaves)
        self._produced: set[int] = set()

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()
        return False

    def _reaches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._reaching

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn: Callable):
        self.entries.append((out, inputs, grad_fn))
        self._reaching.add(id(out))
        self._produced.add(id(out))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward() needs a scalar loss, got shape {loss.shape}"
            )
        if id(loss) not in self._produced and not loss.requires_grad:
            raise ContractViolation("loss was not computed on this tape")
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for out, inputs, grad_fn in reversed(self.entries):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            in_grads = grad_fn(g_out)
            for t, g in zip(inputs, in_grads):
                if g is None or not self._reaches(t):
                    continue
                if id(t) in self._produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = g if acc is None else acc + g
                else:
                    # trainable leaf: accumulate persistently
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
        # a leaf used directly as the loss
        g_leaf = grads.pop(id(loss), None)
        if g_leaf is not None and loss.requires_grad and id(loss) not in self._produced:
            if loss.grad is None:
                loss.grad = np.zeros_like(loss.data)
            loss.grad += g_leaf


_STACK: list[Tape] = []


def tape() -> Tape:
    """New recording context: ``with tape() as t: ... t.backward(loss)``."""
    return Tape()


def active_tape() -> Tape | None:
    return _STACK[-1] if _STACK else None


def backward(loss: Tensor):
    """Backward through the innermost active tape."""
    t = active_tape()
    if t is None:
        raise ContractViolation("backward() called with no active tape")
    t.backward(loss)


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.grad = None


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteValues(f"{op} produced non-finite values")
    return arr


def _make(arr: np.ndarray, op: str, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(_finite(arr, op))
    t = active_tape()
    if t is not None and any(t._reaches(x) for x in inputs):
        t.record(out, inputs, grad_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. Shapes must match exactly."""
    _same_shape(a, b, "mul")
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (g * b.data, g * a.data),
    )


def smul(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated through)."""
    c = float(c)
    return _make(x.data * c, "smul", (x,), lambda g: (g * c,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a scalar tensor, differentiable in both arguments."""
    if s.data.size != 1:
        raise ContractViolation(f"scale_by: scale has shape {s.shape}")
    return _make(
        x.data * s.data.reshape(()), "scale_by", (x, s),
        lambda g: (g * s.data.reshape(()), np.sum(g * x.data, keepdims=False).reshape(s.shape)),
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis, broadcast over leading axes."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias: {x.shape} vs {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(
        x.data + b.data, "add_bias", (x, b),
        lambda g: (g, g.sum(axis=axes) if axes else g),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics for ndim > 2."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {a.shape} vs {b.shape}")

    def grad_fn(g):
        if a.ndim == 1 or b.ndim == 1:
            raise ContractViolation("matmul gradients need ndim >= 2 operands")
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        # contract away broadcast batch axes
        ga = _unbroadcast(ga, a.shape)
        gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), grad_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + _GELU_A * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def grad_fn(g):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * d,)

    return _make(out, "gelu", (x,), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, "softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    axes = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gy = g * gain.data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gy - m1 - xhat * m2)
        ggain = (g * xhat).sum(axis=axes) if axes else g * xhat
        gbias = g.sum(axis=axes) if axes else g
        return gx, ggain, gbias

    return _make(out, "layer_norm", (x, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(
        np.transpose(x.data, axes), "transpose", (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    return _make(
        x.data.reshape(shape), "reshape", (x,),
        lambda g: (g.reshape(orig),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        "concat", tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along the first axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractViolation(f"take_rows: index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ContractViolation(
            f"take_rows: index out of range for {x.shape[0]} rows"
        )

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], "take_rows", (x,), grad_fn)


def row_replace(x: Tensor, rows: np.ndarray, v: Tensor) -> Tensor:
    """Copy of x with x[rows] overwritten by the vector v (broadcast per row)."""
    rows = np.asarray(rows, dtype=np.int64)
    if v.ndim != 1 or v.shape[0] != x.shape[-1]:
        raise ShapeMismatch(f"row_replace: {x.shape} vs {v.shape}")
    if rows.size and np.unique(rows).size != rows.size:
        raise ContractViolation("row_replace: duplicate row indices")
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise ContractViolation(
            f"row_replace: index out of range for {x.shape[0]} rows"
        )
    out = x.data.copy()
    out[rows] = v.data

    def grad_fn(g):
        gx = g.copy()
        gx[rows] = 0.0
        gv = g[rows].sum(axis=0) if rows.size else np.zeros_like(v.data)
        return gx, gv

    return _make(out, "row_replace", (x, v), grad_fn)


# ---------------------------------------------------------------------------
# reductions and losses


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        return _make(
            np.asarray(x.data.mean()), "mean", (x,),
            lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
        )
    n = x.shape[axis]
    ax = axis

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g / n, ax), n, axis=ax),)

    return _make(x.data.mean(axis=ax), "mean", (x,), grad_fn)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(
            np.asarray(x.data.sum()), "sum", (x,),
            lambda g: (np.broadcast_to(g, x.shape).copy(),),
        )
    ax = axis
    return _make(
        x.data.sum(axis=ax), "sum", (x,),
        lambda g: (np.repeat(np.expand_dims(g, ax), x.shape[ax], axis=ax),),
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over every element."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size if diff.size else 1

    def grad_fn(g):
        s = 2.0 * g / n
        return (s * diff, -(s * diff))

    return _make(np.asarray((diff * diff).sum() / n), "mse", (a, b), grad_fn)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy. logits (B, C), labels int (B,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(
            f"cross_entropy_logits: {logits.shape} vs labels {labels.shape}"
        )
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    b = logits.shape[0]
    picked = z[np.arange(b), labels]
    loss = (lse - picked).mean()
    p = np.exp(z - lse[:, None])

    def grad_fn(g):
        gl = p.copy()
        gl[np.arange(b), labels] -= 1.0
        return (g * gl / b,)

    return _make(np.asarray(loss), "cross_entropy_logits", (logits,), grad_fn)


def kl_softmax(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(a) || softmax(b)) along the last axis."""
    _same_shape(a, b, "kl_softmax")
    za = a.data - a.data.max(axis=-1, keepdims=True)
    zb = b.data - b.data.max(axis=-1, keepdims=True)
    la = za - np.log(np.exp(za).sum(axis=-1, keepdims=True))
    lb = zb - np.log(np.exp(zb).sum(axis=-1, keepdims=True))
    p = np.exp(la)
    q = np.exp(lb)
    per_row = (p * (la - lb)).sum(axis=-1)
    rows = max(per_row.size, 1)

    def grad_fn(g):
        kl = per_row[..., None]
        ga = p * ((la - lb) - kl)
        gb = q - p
        scale = g / rows
        return scale * ga, scale * gb

    return _make(np.asarray(per_row.mean()), "kl_softmax", (a, b), grad_fn)


# ---------------------------------------------------------------------------
# convolution


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
    groups: int = 1,
) -> Tensor:
    """1-D convolution. x (C_in, L), weight (C_out, C_in/groups, k).

    padding is symmetric when an int, else (left, right). Output length is
    (L + pad_left + pad_right - k) // stride + 1.
    """
    c_in, length = x.shape
    c_out, c_in_g, k = weight.shape
    if c_in % groups or c_out % groups or c_in_g != c_in // groups:
        raise ShapeMismatch(
            f"conv1d: x {x.shape}, weight {weight.shape}, groups {groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias {bias.shape} vs C_out {c_out}")
    pad_l, pad_r = (padding, padding) if isinstance(padding, int) else padding
    padded = np.pad(x.data, ((0, 0), (pad_l, pad_r)))
    t_out = (length + pad_l + pad_r - k) // stride + 1
    if t_out <= 0:
        raise ContractViolation(
            f"conv1d: kernel {k} does not fit input of length {length}"
        )
    s0, s1 = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded, shape=(c_in, t_out, k), strides=(s0, s1 * stride, s1)
    )
    og = c_out // groups
    ig = c_in // groups
    out = np.empty((c_out, t_out))
    w_flat = weight.data.reshape(groups, og, ig * k)
    win = windows.reshape(groups, ig, t_out, k)
    for g_idx in range(groups):
        cols = win[g_idx].transpose(0, 2, 1).reshape(ig * k, t_out)
        out[g_idx * og:(g_idx + 1) * og] = w_flat[g_idx] @ cols
    if bias is not None:
        out += bias.data[:, None]

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        gx_padded = np.zeros_like(padded)
        gw_flat = gw.reshape(groups, og, ig * k)
        for gi in range(groups):
            g_out = g[gi * og:(gi + 1) * og]  # (og, t_out)
            cols = win[gi].transpose(0, 2, 1).reshape(ig * k, t_out)
            gw_flat[gi] += g_out @ cols.T
            gcols = w_flat[gi].T @ g_out  # (ig*k, t_out)
            gwin = gcols.reshape(ig, k, t_out).transpose(0, 2, 1)  # (ig, t_out, k)
            base = gi * ig
            for t in range(t_out):
                gx_padded[base:base + ig, t * stride:t * stride + k] += gwin[:, t]
        gx = gx_padded[:, pad_l:pad_l + length] if (pad_l or pad_r) else gx_padded
        gb = g.sum(axis=1) if bias is not None else None
        if bias is None:
            return gx, gw
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "conv1d", inputs, grad_fn)


# ---------------------------------------------------------------------------
# numerical gradient check


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between taped and central-difference gradients.

    fn must return a scalar Tensor. Inputs are perturbed in place (and
    restored), so pass float64 leaves.
    """
    for t in inputs:
        if not t.requires_grad:
            raise ContractViolation("grad_check inputs must require grad")
        t.grad = None
    with tape() as t:
        loss = fn(*inputs)
        t.backward(loss)
    worst = 0.0
    for inp in inputs:
        analytic = inp.grad if inp.grad is not None else np.zeros_like(inp.data)
        flat = inp.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
