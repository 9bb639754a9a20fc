"""Minimal float64 tensor engine with reverse-mode automatic differentiation.

Operations executed while a :class:`Tape` is active record themselves (when
any input requires a gradient); :func:`backward` replays the records in
reverse.  Every recorded output stays alive until the tape is dropped, which
is also what the live-float counter measures.

    with Tape() as tape:
        loss = loss_mse(matmul(x, w), y)
    backward(tape, loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError, StateError

_TAPES: list["Tape"] = []
_COUNTER: "LiveFloatCounter | None" = None
_TRACKING = True


class LiveFloatCounter:
    """Tracks how many tensor floats are alive while the context is open.

    Views (reshape/transpose results that share memory with their input)
    count as zero.  Gradient buffers created by :func:`backward` are counted
    too; tensors created before the context opened (parameters) are not.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, k: int):
        self.live += k
        if self.live > self.peak:
            self.peak = self.live

    def free(self, k: int):
        self.live -= k

    def __enter__(self):
        global _COUNTER
        if not _TRACKING:
            raise StateError("memory tracking is disabled")
        if _COUNTER is not None:
            raise StateError("a live-float counter is already active")
        _COUNTER = self
        return self

    def __exit__(self, *exc):
        global _COUNTER
        _COUNTER = None


def set_memory_tracking(enabled: bool) -> None:
    global _TRACKING
    _TRACKING = bool(enabled)


def memory_tracking_enabled() -> bool:
    return _TRACKING


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_counted", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._counted = None
        self._track(True)

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, count: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._counted = None
        t._track(count)
        return t

    def _track(self, count: bool):
        c = _COUNTER
        if c is not None and count:
            c.alloc(self.data.size)
            self._counted = (c, self.data.size)

    def __del__(self):
        if self._counted is not None:
            c, k = self._counted
            c.free(k)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()
        self._produced.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    view = any(np.may_share_memory(data, p.data) for p in parents)
    out = Tensor._wrap(data, requires, count=not view)
    if requires and _TAPES:
        tape = _TAPES[-1]
        tape.records.append((out, parents, backward_fn))
        tape._produced.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, root: Tensor, params=None) -> None:
    """Accumulate d root / d leaf into ``leaf.grad`` for every reachable leaf.

    ``params``, if given, get a zero gradient when the root does not depend
    on them, so optimizers see a fully materialized set.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    counter = _COUNTER
    grads: dict[int, np.ndarray] = {}

    def store(t: Tensor, g: np.ndarray):
        k = id(t)
        if k in tape._produced:
            old = grads.get(k)
            if old is None:
                grads[k] = g
                if counter is not None:
                    counter.alloc(g.size)
            else:
                grads[k] = old + g
        else:
            if t.grad is None:
                t.grad = np.array(g, dtype=np.float64, copy=True)
                if counter is not None:
                    counter.alloc(g.size)
            else:
                t.grad += g

    store(root, np.ones_like(root.data))
    for out, parents, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = fn(g)
        if counter is not None:
            counter.free(g.size)
        del g
        for p, pg in zip(parents, pgrads):
            if pg is not None and p.requires_grad:
                store(p, pg)
        del pgrads
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
                if counter is not None:
                    counter.alloc(p.data.size)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis.

    ``-inf`` entries are allowed (they receive zero weight); a slice that is
    entirely ``-inf`` yields all zeros.  NaN or ``+inf`` raise.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    xd = x.data
    if np.isnan(xd).any() or np.isposinf(xd).any():
        raise NumericError("softmax input contains NaN or +inf")
    m = xd.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xd - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            xh = (x.data - mu) * inv
            gxh = g * gain.data
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = _unbroadcast(g * ((x.data - mu) * inv), gain.shape)
        if bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return _make(out, (x, gain, bias), bw)


def _check_ids(ids, nrows: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= nrows):
        raise IndexError(f"row index out of range for {nrows} rows")
    return ids


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array; output shape ids.shape + (d,)."""
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    ids = _check_ids(ids, table.shape[0])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def gather_rows(x: Tensor, ids) -> Tensor:
    """Select rows (first axis) of a 2-D activation."""
    return embedding_lookup(x, ids)


def segment_sum(x: Tensor, segment_ids, num_segments: int, weights=None) -> Tensor:
    """out[s] = sum of weights[p] * x[p] over rows p with segment_ids[p] == s."""
    seg = _check_ids(segment_ids, num_segments)
    if x.ndim != 2 or len(seg) != x.shape[0]:
        raise ShapeError(f"segment_sum: {x.shape} rows vs {len(seg)} segment ids")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)[:, None]
    rows = x.data if w is None else x.data * w
    out = np.zeros((num_segments, x.shape[1]))
    np.add.at(out, seg, rows)

    def bw(g):
        gx = g[seg]
        return (gx if w is None else gx * w,)

    return _make(out, (x,), bw)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the second-to-last axis, kept as a length-1 axis."""
    n = x.shape[-2]
    return _make(x.data.mean(axis=-2, keepdims=True), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# losses (all mean-reduced to a 0-d tensor)


def loss_mse(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"loss_mse: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.array((diff**2).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def loss_l1(pred: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"loss_l1: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.array(np.abs(diff).sum() / n), (pred,), lambda g: (g * np.sign(diff) / n,))


def loss_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of logsumexp(row) - row[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross-entropy expects (m, C) logits, got {logits.shape}")
    m, c = logits.shape
    labels = _check_ids(labels, c)
    if labels.shape != (m,):
        raise ShapeError(f"{labels.shape} labels for {m} rows")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    lse = (np.log(s) + zmax)[:, 0]
    rows = np.arange(m)
    loss = (lse - z[rows, labels]).mean()

    def bw(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (g * p / m,)

    return _make(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def grad_check_many(f, tensors, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` takes no arguments and returns a scalar tensor built from
    ``tensors``; each tensor's data is perturbed in place and restored.
    """
    tensors = list(tensors)
    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            y = f()
        backward(tape, y, params=tensors)
        del tape
        worst = 0.0
        for t in tensors:
            analytic = t.grad.copy()
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
            worst = max(worst, _rel_err(analytic, numeric))
        return worst
    finally:
        for t, (rg, gr) in zip(tensors, saved):
            t.requires_grad = rg
            t.grad = gr


def grad_check(f, x: Tensor, h: float = 1e-6) -> float:
    return grad_check_many(lambda: f(x), [x], h)
