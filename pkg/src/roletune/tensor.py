"""Dense float arrays with reverse-mode autodiff.

Storage and vectorized kernels come from numpy; the differentiation machinery
is a recording tape. Ops run "eager": with no active Tape they just compute,
under a `with Tape() as tape:` block they also append a backward rule per call.
`tape.backward(loss)` replays the records in reverse and returns gradients for
the trainable leaves.

Broadcasting is restricted to leading-axis repetition: two operands must have
equal shapes, or one shape must be a suffix of the other. No size-1 stretching.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

# Additive mask value. Finite so fully-masked rows stay NaN-free, yet large
# enough that exp(x - max) underflows to exactly 0.0 in both f32 and f64.
MASK_NEG = -1.0e9

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """A dense float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        # note: np.ascontiguousarray would promote 0-d scalars to shape (1,)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Stop-gradient view: shares data, never receives gradients."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        return out

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal scalar")
        return mul(self, _as_tensor(1.0 / other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered op log. Recording order is a topological order by
    construction (an op's inputs exist before its output), so one reverse
    sweep propagates every gradient and touches each entry exactly once."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.entry_visits: list[int] = []
        self._produced: set[int] = set()
        self._spent = False

    def __enter__(self):
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tls.stack
        stack.pop()
        _tls.tape = stack[-1] if stack else None
        return False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of a scalar loss into every trainable leaf.

        Returns {leaf tensor: gradient array}. Frozen and detached tensors are
        absent. A tape supports a single backward pass.
        """
        if loss.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        if self._spent:
            raise RuntimeError("tape already consumed by a previous backward pass")
        self._spent = True

        self.entry_visits = [0] * len(self.entries)
        loss.grad = np.ones((), dtype=loss.dtype)
        leaves: dict[Tensor, np.ndarray] = {}
        for i in range(len(self.entries) - 1, -1, -1):
            entry = self.entries[i]
            self.entry_visits[i] += 1
            g = entry.output.grad
            if g is None:
                continue  # not on a path to the loss
            input_grads = entry.backward_fn(g)
            for t, gi in zip(entry.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                # never mutate gradient arrays in place, so sharing is safe
                t.grad = gi if t.grad is None else t.grad + gi
        for entry in self.entries:
            out = entry.output
            for t in entry.inputs:
                if t.requires_grad and id(t) not in self._produced and t.grad is not None:
                    leaves.setdefault(t, t.grad)
            out.grad = None  # free intermediates; leaves keep .grad for the optimizer
        return leaves

    def _record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn):
        output.requires_grad = True
        self.entries.append(_Entry(inputs, output, backward_fn))
        self._produced.add(id(output))


def _maybe_record(inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(inputs, output, backward_fn)
    return output


def _raw(data) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)  # normalizes numpy scalars to 0-d arrays
    out.requires_grad = False
    out.grad = None
    return out


# ---------------------------------------------------------------------------
# elementwise ops (leading-axis repetition only)
# ---------------------------------------------------------------------------

def _check_suffix(sa: tuple, sb: tuple, op: str):
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not match (suffix broadcasting only)")


def _check_dtype(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b, "add")
    _check_suffix(a.shape, b.shape, "add")
    out = _raw(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _maybe_record((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b, "sub")
    _check_suffix(a.shape, b.shape, "sub")
    out = _raw(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _maybe_record((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype(a, b, "mul")
    _check_suffix(a.shape, b.shape, "mul")
    out = _raw(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _maybe_record((a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    out = _raw(-a.data)
    return _maybe_record((a,), out, lambda g: (-g,))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = _raw(x.data * sig)

    def backward(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _maybe_record((x,), out, backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    out = _raw(np.ascontiguousarray(x.data.reshape(shape)))
    return _maybe_record((x,), out, lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = _raw(np.ascontiguousarray(x.data.swapaxes(a, b)))
    return _maybe_record((x,), out, lambda g: (np.ascontiguousarray(g.swapaxes(a, b)),))


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = _raw(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _maybe_record(tuple(parts), out, backward)


def tensor_sum(x: Tensor) -> Tensor:
    out = _raw(x.data.sum())
    return _maybe_record((x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype.type, copy=True),))


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _raw(x.data.mean())

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype.type, copy=True),)

    return _maybe_record((x,), out, backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D operands, or stacked operands with identical
    leading (batch) extents. Gradients: dA = dC @ B^T, dB = A^T @ dC."""
    _check_dtype(a, b, "matmul")
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or len(sa) != len(sb) or sa[:-2] != sb[:-2] or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} do not conform")
    out = _raw(a.data @ b.data)

    def backward(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _maybe_record((a, b), out, backward)


# ---------------------------------------------------------------------------
# softmax / cross entropy
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; rejects non-finite inputs."""
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("softmax: input contains non-finite values")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _raw(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _maybe_record((x,), out, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None):
    """Mean negative log-likelihood over masked-in positions.

    logits: (..., V); targets: integer array of shape (...); mask: 0/1 array of
    the same shape (None = all positions count). Returns (loss, n) where n is
    the number of scored positions; when every position is masked out the loss
    is an un-tracked zero and n == 0.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} vs logits {logits.shape}")
    if mask is None:
        m = np.ones(targets.shape, dtype=bool)
    else:
        m = np.asarray(mask).astype(bool)
        if m.shape != targets.shape:
            raise ShapeError(f"cross_entropy: mask shape {m.shape} vs targets {targets.shape}")
    n = int(m.sum())
    if n == 0:
        return _raw(np.zeros((), dtype=logits.dtype)), 0
    if (targets[m] < 0).any() or (targets[m] >= vocab).any():
        bad = targets[m][(targets[m] < 0) | (targets[m] >= vocab)][0]
        raise IndexError(f"cross_entropy: target id {int(bad)} outside vocab of size {vocab}")

    x = logits.data
    mx = x.max(axis=-1, keepdims=True)
    lse = mx[..., 0] + np.log(np.exp(x - mx).sum(axis=-1))
    safe_targets = np.where(m, targets, 0)
    picked = np.take_along_axis(x, safe_targets[..., None], axis=-1)[..., 0]
    nll = (lse - picked) * m
    out = _raw(np.asarray(nll.sum() / n, dtype=logits.dtype))

    def backward(g):
        p = np.exp(x - mx)
        p /= p.sum(axis=-1, keepdims=True)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_targets[..., None], 1.0, axis=-1)
        d = (p - onehot) * m[..., None] * (g / n)
        return (d.astype(x.dtype, copy=False),)

    return _maybe_record((logits,), out, backward), n


# ---------------------------------------------------------------------------
# model-specific primitives
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...]]. Backward scatter-adds."""
    ids = np.asarray(ids)
    out = _raw(np.ascontiguousarray(table.data[ids]))

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _maybe_record((table,), out, backward)


def rms_norm(x: Tensor, scale: Tensor, eps: float) -> Tensor:
    """y = x / sqrt(mean(x^2, last) + eps) * scale."""
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = _raw(xhat * scale.data)

    def backward(g):
        gxhat = g * scale.data
        dot = (gxhat * x.data).sum(axis=-1, keepdims=True)
        gx = inv * (gxhat - x.data * (inv * inv / d) * dot)
        gscale = (g * xhat).reshape(-1, d).sum(axis=0)
        return gx.astype(x.dtype.type, copy=False), gscale.astype(x.dtype.type, copy=False)

    return _maybe_record((x, scale), out, backward)


def _rope_tables(positions: np.ndarray, d_head: int, base: float, dtype):
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    ang = positions[..., None].astype(np.float64) * inv_freq  # (..., half)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate adjacent feature pairs of x by position-dependent angles.

    x: (B, H, S, Dh) with Dh even; positions: (B, S). Pair i spins at
    base^(-2i/Dh) radians per position step. The map is orthogonal per slot,
    so the backward pass is a rotation by the negated angles.
    """
    d_head = x.shape[-1]
    cos, sin = _rope_tables(positions, d_head, base, x.dtype.type)  # (B, S, half)
    cos = cos[:, None, :, :]
    sin = sin[:, None, :, :]

    def rot(arr, c, s):
        even = arr[..., 0::2]
        odd = arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    out = _raw(rot(x.data, cos, sin))
    return _maybe_record((x,), out, lambda g: (rot(g, cos, -sin),))
