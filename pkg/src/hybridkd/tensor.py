"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Design: define-by-run. Ops executed while a GradientTape is active record a
node (inputs + backward closure); `backward` walks the node list in reverse
record order, summing gradients into every tensor that is consumed by more
than one op. Without an active tape every op is a plain numpy computation.

Broadcasting follows numpy semantics; the gradient of a broadcast operand is
summed back down to its shape by `_unbroadcast`, which is the single place
that rule lives.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (e.g. backward on a non-scalar)."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op non-finite input checks (slow; off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


_ACTIVE_TAPE: "GradientTape | None" = None


class _Node:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class GradientTape:
    """Records ops in execution order; context manager activates it."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    `requires_grad` marks leaves (parameters, probed inputs) that should
    accumulate into `.grad` during backward. Tensors produced by ops carry a
    reference to the tape that recorded them; a tensor detached from any tape
    never receives gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: GradientTape | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _check_finite(name, *arrays):
    if _DEBUG_CHECKS:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{name}: non-finite input")


def _record(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result; attach a node if the active tape tracks any input."""
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(
        t.requires_grad or t._tape is tape for t in inputs
    ):
        out._tape = tape
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_shapes(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    _check_finite("add", a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    _check_finite("sub", a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    _check_finite("mul", a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    _check_finite("div", a.data, b.data)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _record(-a.data, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product; batched when operands carry leading axes.

    Requires ndim >= 2 on both sides. A 2-D operand against a batched one is
    broadcast (the usual shared-projection case); its gradient sums over the
    batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _check_finite("matmul", a.data, b.data)
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(np.transpose(a.data, axes), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), bwd)


def outer(a, b) -> Tensor:
    """Outer product of two vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: need vectors, got {a.shape}, {b.shape}")
    out = np.outer(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd, g.T @ ad

    return _record(out, (a, b), bwd)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a.data)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("log", a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _record(np.log(ad), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("sigmoid", a.data)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), bwd)


def silu(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("silu", a.data)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    ad = a.data

    def bwd(g):
        return (g * (s + ad * s * (1.0 - s)),)

    return _record(out, (a,), bwd)


# -- softmax family ------------------------------------------------------------

MASK_NEG = -1e30  # additive surrogate for -inf; underflows to exactly 0 probability


def _softmax_data(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    _check_finite("row_softmax", a.data)
    s = _softmax_data(a.data)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), bwd)


def masked_row_softmax(a, keep_mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with positions where `keep_mask` is False
    forced to exactly zero probability (additive -1e30 before normalizing).

    Every row must keep at least one position.
    """
    a = as_tensor(a)
    keep = np.asarray(keep_mask, dtype=bool)
    try:
        np.broadcast_shapes(a.shape, keep.shape)
    except ValueError:
        raise ShapeError(
            f"masked_row_softmax: mask {keep.shape} does not broadcast to {a.shape}"
        )
    if not np.broadcast_to(keep, a.shape).any(axis=-1).all():
        raise ShapeError("masked_row_softmax: some row masks out every position")
    _check_finite("masked_row_softmax", a.data)
    biased = np.where(keep, a.data, a.data + MASK_NEG)
    s = _softmax_data(biased)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("log_softmax", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bwd(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bwd)


# -- reductions -----------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), bwd)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else np.prod(
        [shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(out, (a,), bwd)


def l2_sq(a) -> Tensor:
    """Sum of squared entries (scalar)."""
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        return (2.0 * g * ad,)

    return _record(np.asarray((ad * ad).sum()), (a,), bwd)


# -- shape surgery ---------------------------------------------------------------


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) indexing; gradient scatters into zeros."""
    a = as_tensor(a)
    out = a.data[key]
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[key] += g
        return (full,)

    return _record(out, (a,), bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup into `table` by integer ids; gradient scatter-adds rows."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.shape[0]}) in lookup"
        )
    out = table.data[ids]
    vshape = table.shape

    def bwd(g):
        gt = np.zeros(vshape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, vshape[1]))
        return (gt,)

    return _record(out, (table,), bwd)


# -- losses -----------------------------------------------------------------------


def cross_entropy(logits, targets: np.ndarray, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    Positions equal to `ignore_index` contribute neither loss nor gradient.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} vs logits {logits.shape}"
        )
    flat = logits.data.reshape(-1, logits.shape[-1])
    tflat = targets.reshape(-1)
    keep = tflat != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ShapeError("cross_entropy: no supervised positions")
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    ls = z - lse
    nll = -ls[np.arange(flat.shape[0]), np.where(keep, tflat, 0)]
    out = np.asarray((nll * keep).sum() / n)
    sm = np.exp(ls)
    lshape = logits.shape

    def bwd(g):
        gi = sm.copy()
        gi[np.arange(flat.shape[0]), np.where(keep, tflat, 0)] -= 1.0
        gi *= (keep / n)[:, None] * g
        return (gi.reshape(lshape),)

    return _record(out, (logits,), bwd)


def kl_div(p, q) -> Tensor:
    """KL(p || q) between row distributions, reduced over the last axis.

    Both arguments are probability rows; zero entries of `p` contribute 0.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_div: shapes {p.shape} vs {q.shape}")
    pd, qd = p.data, q.data
    safe_p = np.where(pd > 0.0, pd, 1.0)
    ratio = np.log(safe_p) - np.log(qd)
    out = (pd * ratio).sum(axis=-1)

    def bwd(g):
        ge = g[..., None]
        gp = np.where(pd > 0.0, ratio + 1.0, 0.0) * ge
        gq = -pd / qd * ge
        return gp, gq

    return _record(out, (p, q), bwd)


# -- backward + verification -------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls without zeroing accumulate into `.grad`.
    """
    if loss._tape is None:
        raise TapeError("backward: loss is not attached to a tape")
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g_out)):
            if gi is None:
                continue
            if t._tape is not tape and not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.requires_grad and t._tape is not tape:
                leaves[key] = t
    for key, leaf in leaves.items():
        g = grads[key]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def finite_difference_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps one tensor (or a sequence of tensors) to a scalar Tensor. Error
    per coordinate is |analytic - numeric| / (|numeric| + 1e-8).
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with GradientTape():
            y = f(*xs)
            backward(y)
        worst = 0.0
        for t in xs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            aflat = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(*xs).item()
                flat[i] = orig - eps
                lo = f(*xs).item()
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * eps)
                err = abs(aflat[i] - numeric) / (abs(numeric) + 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g


def record_op(out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Public hook for composite ops with hand-written backward rules."""
    return _record(out_data, tuple(as_tensor(t) for t in inputs), backward_fn)
