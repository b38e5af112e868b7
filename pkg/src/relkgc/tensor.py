"""Dense float64 tensors with taped reverse-mode differentiation and Adam.

Design: a small explicit tape. Primitives compute forward values with numpy
and, when a tape is active and an input is grad-connected, append a backward
rule. backward(loss) replays the tape in exact reverse recording order,
accumulating into a per-call gradient map and adding final gradients into the
.grad buffers of requires_grad leaves. Repeated backward calls therefore
accumulate, matching the usual deep-learning convention.

Everything is float64. Reductions use fixed numpy orders (np.add.at,
ufunc.reduceat), so forward and backward are bit-deterministic on one thread.
"""

from contextlib import contextmanager

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested primitive."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class NonScalarLoss(ValueError):
    """backward() requires a scalar (size-1) loss tensor."""


# Negative-control hook for the gradient-check suite: scales one backward
# rule (matmul's left input) so a deliberately broken gradient is detectable.
# Production value is exactly 1.0.
_MATMUL_GRAD_SCALE = 1.0


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar so formulas read like the math they implement.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.entries = []       # (output Tensor, backward fn)
        self.tracked = set()    # ids of tensors produced by recorded ops

    def __len__(self):
        return len(self.entries)


_ACTIVE = []


@contextmanager
def tape():
    """Activate a fresh tape; primitives called inside are recorded."""
    t = Tape()
    _ACTIVE.append(t)
    try:
        yield t
    finally:
        _ACTIVE.pop()


def _current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _connected(tp, *tensors):
    return any(t.requires_grad or id(t) in tp.tracked for t in tensors)


def _record(out, bwd):
    tp = _current_tape()
    tp.entries.append((out, bwd))
    tp.tracked.add(id(out))


def _maybe_record(out, bwd, *inputs):
    tp = _current_tape()
    if tp is not None and _connected(tp, *inputs):
        _record(out, bwd)
    return out


def backward(loss, tape_obj=None):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    The loss must be a size-1 tensor recorded on the currently active tape
    (or on `tape_obj` if given). Gradients of intermediate tensors live only
    in a per-call map; leaf .grad buffers are added to, never reset.
    """
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    tp = tape_obj or _current_tape()
    if tp is None:
        raise RuntimeError("backward() called with no active tape")

    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        _add_leaf_grad(loss, grads[id(loss)])
    for out, bwd in reversed(tp.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gc in bwd(g):
            if gc is None:
                continue
            if t.requires_grad:
                _add_leaf_grad(t, gc)
            elif id(t) in tp.tracked:
                prev = grads.get(id(t))
                grads[id(t)] = gc if prev is None else prev + gc


def _add_leaf_grad(t, gc):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + gc


# ---------------------------------------------------------------------------
# Multiply-accumulate instrumentation.
#
# Counts forward-pass MACs of matmul and elementwise multiply (the multiply
# half of weighted aggregation). Pure additions, gathers, and activations are
# free, matching the usual convention for MAC cost models.

class MacCounter:
    def __init__(self):
        self.total = 0


_MACS = []


@contextmanager
def count_macs():
    c = MacCounter()
    _MACS.append(c)
    try:
        yield c
    finally:
        _MACS.pop()


def _count(n):
    if _MACS:
        _MACS[-1].total += int(n)


# ---------------------------------------------------------------------------
# Primitives.

def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    _count(a.shape[0] * a.shape[1] * b.shape[1])
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return [(a, (g @ bd.T) * _MATMUL_GRAD_SCALE), (b, ad.T @ g)]

    return _maybe_record(out, bwd, a, b)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = astensor(a), astensor(b)
    _broadcast_check("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _maybe_record(out, bwd, a, b)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    _broadcast_check("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _maybe_record(out, bwd, a, b)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    shape = _broadcast_check("mul", a, b)
    _count(int(np.prod(shape)) if shape else 1)
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return [(a, _unbroadcast(g * bd, a.shape)), (b, _unbroadcast(g * ad, b.shape))]

    return _maybe_record(out, bwd, a, b)


def neg(a):
    a = astensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        return [(a, -g)]

    return _maybe_record(out, bwd, a)


def concat(tensors, axis=0):
    ts = [astensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("concat", ())
    try:
        out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    except ValueError:
        raise ShapeMismatch("concat", *(t.shape for t in ts)) from None
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gs = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            gs.append((t, g[tuple(sl)]))
        return gs

    return _maybe_record(out, bwd, *ts)


def gather_rows(x, indices):
    """Select rows of a 2-D tensor. Backward scatter-adds, so repeated
    indices accumulate correctly."""
    x = astensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("gather_rows", x.shape)
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return [(x, gx)]

    return _maybe_record(out, bwd, x)


def scatter_add_rows(x, indices, num_rows):
    """Sum rows of `x` into an output of `num_rows` rows at `indices`.

    Uses np.add.at, which applies updates in index order, so duplicate
    destinations are deterministic.
    """
    x = astensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("scatter_add_rows", x.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeMismatch("scatter_add_rows", x.shape, idx.shape)
    acc = np.zeros((num_rows, x.shape[1]))
    np.add.at(acc, idx, x.data)
    out = Tensor(acc)

    def bwd(g):
        return [(x, g[idx])]

    return _maybe_record(out, bwd, x)


def broadcast_rows(x, n):
    """Repeat a single-row tensor to n rows (backward sums the rows)."""
    x = astensor(x)
    if x.ndim != 2 or x.shape[0] != 1:
        raise ShapeMismatch("broadcast_rows", x.shape)
    out = Tensor(np.broadcast_to(x.data, (n, x.shape[1])).copy())

    def bwd(g):
        return [(x, g.sum(axis=0, keepdims=True))]

    return _maybe_record(out, bwd, x)


def relu(x):
    x = astensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0

    def bwd(g):
        return [(x, g * mask)]

    return _maybe_record(out, bwd, x)


def sigmoid(x):
    x = astensor(x)
    xd = x.data
    s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                 np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    out = Tensor(s)

    def bwd(g):
        return [(x, g * s * (1.0 - s))]

    return _maybe_record(out, bwd, x)


def tanh(x):
    x = astensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)

    def bwd(g):
        return [(x, g * (1.0 - t * t))]

    return _maybe_record(out, bwd, x)


def exp(x):
    x = astensor(x)
    e = np.exp(x.data)
    out = Tensor(e)

    def bwd(g):
        return [(x, g * e)]

    return _maybe_record(out, bwd, x)


def log(x):
    x = astensor(x)
    out = Tensor(np.log(x.data))
    xd = x.data

    def bwd(g):
        return [(x, g / xd)]

    return _maybe_record(out, bwd, x)


def softplus(x):
    """log(1 + e^x), computed stably as logaddexp(0, x)."""
    x = astensor(x)
    out = Tensor(np.logaddexp(0.0, x.data))
    xd = x.data

    def bwd(g):
        s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                     np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
        return [(x, g * s)]

    return _maybe_record(out, bwd, x)


def segment_softmax(x, segments):
    """Softmax over contiguous segments of a 1-D tensor.

    `segments` must be non-decreasing; each maximal run of equal ids forms
    one softmax group. Used for attention over the incoming edges of a node
    when edges are sorted by destination.
    """
    x = astensor(x)
    if x.ndim != 1:
        raise ShapeMismatch("segment_softmax", x.shape)
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != x.shape:
        raise ShapeMismatch("segment_softmax", x.shape, seg.shape)
    if seg.size == 0:
        return _maybe_record(Tensor(np.zeros(0)), lambda g: [(x, g)], x)
    if np.any(np.diff(seg) < 0):
        raise ValueError("segment ids must be non-decreasing")

    starts = np.r_[0, np.flatnonzero(np.diff(seg)) + 1]
    counts = np.diff(np.r_[starts, seg.size])
    pos = np.repeat(np.arange(starts.size), counts)  # element -> local segment

    m = np.maximum.reduceat(x.data, starts)
    z = np.exp(x.data - m[pos])
    denom = np.add.reduceat(z, starts)
    s = z / denom[pos]
    out = Tensor(s)

    def bwd(g):
        dot = np.add.reduceat(g * s, starts)
        return [(x, s * (g - dot[pos]))]

    return _maybe_record(out, bwd, x)


def tsum(x, axis=None, keepdims=False):
    x = astensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape).copy())]

    return _maybe_record(out, bwd, x)


def tmean(x, axis=None, keepdims=False):
    x = astensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [(x, np.broadcast_to(g, x.shape) / n)]

    return _maybe_record(out, bwd, x)


def slice_axis(x, axis, start, stop):
    """Contiguous slice along one axis (backward zero-pads)."""
    x = astensor(x)
    if axis >= x.ndim or stop > x.shape[axis] or start < 0 or start >= stop:
        raise ShapeMismatch("slice_axis", x.shape, (axis, start, stop))
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(x.data[sl])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return [(x, gx)]

    return _maybe_record(out, bwd, x)


def reshape(x, shape):
    x = astensor(x)
    out = Tensor(x.data.reshape(shape))
    orig = x.shape

    def bwd(g):
        return [(x, g.reshape(orig))]

    return _maybe_record(out, bwd, x)


def logsumexp_rows(x):
    """Row-wise log(sum(exp(x))) of a 2-D tensor, shift-stabilized.

    Composed from primitives; the max shift is detached, which is exact
    because d/dx logsumexp is invariant to the constant shift.
    """
    x = astensor(x)
    if x.ndim != 2:
        raise ShapeMismatch("logsumexp_rows", x.shape)
    m = x.data.max(axis=1, keepdims=True)
    shifted = sub(x, m)
    return add(log(tsum(exp(shifted), axis=1, keepdims=True)), m)


# ---------------------------------------------------------------------------
# Initialization and optimization.

def xavier_normal(rng, shape, fan_in, fan_out):
    """Zero-mean normal with variance 2/(fan_in+fan_out)."""
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


class Adam:
    """Bias-corrected Adam. Tensors without a gradient are left untouched,
    and non-trainable tensors are refused at construction."""

    def __init__(self, params, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("Adam given a frozen tensor")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeMismatch("adam_step", p.data.shape, g.shape)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
