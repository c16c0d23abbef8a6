"""Dense float64 tensors with tape-based reverse-mode differentiation.

Deliberately small: only the operations the detection model needs, all
backed by numpy arrays. Everything is 64-bit. A forward pass runs inside
a ``with Tape() as tape:`` block; ``tape.backward(loss)`` then walks the
recorded operations once, in reverse order, accumulating ``.grad`` arrays
on every tensor that requires gradients. Tensors are treated as immutable
once created; parameters are only rewritten between steps.

Tapes are per-thread (a thread-local holds the active one). Independent
forward passes on separate threads with separate tapes are safe; a single
tape must never be shared across threads.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DegenerateRowError, ShapeError

_STATE = threading.local()


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """A dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with gradient tracking severed."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng=None) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Operations append in execution order, which is automatically a
    topological order (an op can only consume tensors that already
    exist). ``backward`` visits each recorded node exactly once.
    """

    def __init__(self):
        self._nodes = []  # (output tensor, backward rule)

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor):
        """Accumulate gradients of a scalar ``root`` into all inputs."""
        if root.data.shape != ():
            raise ContractError("backward root must be a scalar")
        if not root.requires_grad:
            raise ContractError("root does not depend on any tracked tensor")
        root.grad = np.ones((), dtype=np.float64)
        for out, rule in reversed(self._nodes):
            g = out.grad
            if g is not None:
                rule(g)


def record(out: Tensor, inputs, backward) -> Tensor:
    """Attach ``out`` to the active tape if any input is tracked.

    ``backward`` receives the gradient w.r.t. ``out`` and must accumulate
    into each tracked input via :func:`accumulate`. Exposed so sibling
    modules can define their own primitives (e.g. the state-space scan).
    """
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, backward))
    return out


def accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _ensure_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)

    def backward(g):
        accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def backward(g):
        accumulate(a, -g)

    return record(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward(g):
        accumulate(a, g * out.data)

    return record(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def backward(g):
        accumulate(a, g / a.data)

    return record(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))

    def backward(g):
        accumulate(a, g * 0.5 / out.data)

    return record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s)

    def backward(g):
        accumulate(a, g * s * (1.0 - s))

    return record(out, (a,), backward)


def softplus(a) -> Tensor:
    # log(1 + e^x), linearized above 30 where e^x would dwarf the 1
    a = as_tensor(a)
    x = a.data
    out = Tensor(np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0)))))

    def backward(g):
        with np.errstate(over="ignore"):
            accumulate(a, g / (1.0 + np.exp(-x)))

    return record(out, (a,), backward)


def silu(a) -> Tensor:
    """x * sigmoid(x), the smooth nonlinearity used throughout the model."""
    a = as_tensor(a)
    return mul(a, sigmoid(a))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = tuple(
                1 if i in axes else s for i, s in enumerate(a.data.shape)
            )
            g = g.reshape(shape)
        accumulate(a, np.broadcast_to(g, a.data.shape))

    return record(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        accumulate(a, g.reshape(a.data.shape))

    return record(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        accumulate(a, g.transpose(inverse))

    return record(out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            accumulate(t, g[tuple(idx)])
            offset += size

    return record(out, tuple(tensors), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = tuple(
        slice(start, stop) if i == axis else slice(None) for i in range(a.data.ndim)
    )
    out = Tensor(a.data[idx].copy())

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            accumulate(a, full)

    return record(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and normalization


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes.

    Gradients are summed back over broadcast batch dimensions, so a
    shared projection matrix multiplied against a batched activation
    receives a correctly pooled gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)
    _ensure_finite(out.data, "matmul output")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            accumulate(b, _unbroadcast(gb, b.data.shape))

    return record(out, (a, b), backward)


def softmax_rows(a, mask=None) -> Tensor:
    """Numerically stabilized softmax over the last axis.

    ``mask`` is boolean with True where attention is permitted; it may be
    lower-dimensional and broadcasts over leading axes. Excluded entries
    are exactly 0 in the output and receive no gradient. A row with no
    permitted entry is an error.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        shifted = np.where(m, x, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        with np.errstate(over="ignore"):
            e = np.exp(shifted)
        e = np.where(m, e, 0.0)
    else:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    _ensure_finite(s, "softmax output")
    out = Tensor(s)

    def backward(g):
        if a.requires_grad:
            inner = (g * s).sum(axis=-1, keepdims=True)
            accumulate(a, s * (g - inner))

    return record(out, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1] if x.data.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("gamma/beta must have the normalized extent")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    normed = mul(centered, inv)
    return add(mul(normed, gamma), beta)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, x: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must map a tensor to a scalar tensor. The relative error per
    coordinate uses max(|analytic|, |numeric|, 1e-2) as denominator so
    near-zero gradients are compared absolutely at a sensible scale.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError("eps must lie in [1e-6, 1e-3]")
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if not isinstance(out, Tensor) or out.data.shape != ():
            raise ContractError("f must return a scalar tensor")
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = np.array(x.data, copy=True)
    worst = 0.0
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        saved = base[idx]
        base[idx] = saved + eps
        f_plus = f(Tensor(base)).item()
        base[idx] = saved - eps
        f_minus = f(Tensor(base)).item()
        base[idx] = saved
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-2)
        worst = max(worst, rel)
        it.iternext()
    return worst
