"""Small reverse-mode autodiff engine over float64 numpy arrays.

The graph is built on the fly (define-by-run): every op returns a new
:class:`Tensor` that remembers its parents and a closure that pushes the
output gradient back to them. :func:`backward` walks the graph once in
reverse topological order.

Only the ops needed by the tiny transformer are provided. Broadcasting is
limited to adding a 1-D bias row over the last axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, decoding, erasure sweeps)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float64 array that can take part in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad and op == "leaf" else None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    # fresh: nobody else will read or write ``g`` (an op's own output
    # gradient qualifies, backward() drops it right after propagation)
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def _bw(g):
            _accum(a, g, fresh=True)
            _accum(b, g)
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def _bw(g):
            _accum(a, g, fresh=True)
            if b.requires_grad:
                _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0), fresh=True)
    else:
        raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    return _make(a.data + b.data, (a, b), "add", _bw)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def _bw_const(g):
            _accum(a, g * c, fresh=True)

        return _make(a.data * c, (a,), "scale", _bw_const)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * b.data, fresh=True)
        if b.requires_grad:
            _accum(b, g * a.data, fresh=True)

    return _make(a.data * b.data, (a, b), "mul", _bw)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0

    def _bw(g):
        _accum(x, g * mask, fresh=True)

    return _make(x.data * mask, (x,), "relu", _bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def _bw(g):
        _accum(x, g * keep, fresh=True)

    return _make(x.data * keep, (x,), "dropout", _bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def _bw(g):
        _accum(x, np.broadcast_to(g, x.shape).copy(), fresh=True)

    return _make(np.asarray(x.data.sum()), (x,), "sum", _bw)


def tmean(x: Tensor) -> Tensor:
    n = x.size

    def _bw(g):
        _accum(x, np.full(x.shape, float(g) / n), fresh=True)

    return _make(np.asarray(x.data.mean()), (x,), "mean", _bw)


# -------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as rows."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    out = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            k, n = b.shape
            _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n), fresh=True)

    return _make(out, (a, b), "matmul", _bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def _bw(g):
        _accum(x, g.reshape(src), fresh=True)

    return _make(x.data.reshape(shape), (x,), "reshape", _bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)), fresh=True)

    return _make(x.data.transpose(axes), (x,), "transpose", _bw)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``(B, T, d)`` -> ``(B, h, T, d/h)``."""
    bsz, t, d = x.shape
    if d % num_heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {num_heads} heads")
    return transpose(reshape(x, (bsz, t, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """``(B, h, T, dk)`` -> ``(B, T, h*dk)`` (head concatenation)."""
    bsz, h, t, dk = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (bsz, t, h * dk))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def _bw(g):
        for x, part in zip(xs, np.split(g, bounds, axis=ax)):
            _accum(x, part, fresh=True)

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, "concat", _bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.data.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[ax]}")
    out = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * x.data.ndim
        idx[ax] = slice(start, start + n)
        idx = tuple(idx)

        def _bw(g, idx=idx):
            if x.requires_grad:
                full = np.zeros_like(x.data)
                full[idx] = g
                _accum(x, full, fresh=True)

        out.append(_make(x.data[idx].copy(), (x,), "split", _bw))
        start += n
    return out


# ------------------------------------------------------------ nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    if not np.all(np.isfinite(p)):
        raise FloatingPointError("softmax: non-finite input")

    def _bw(g):
        _accum(x, p * (g - (g * p).sum(axis=axis, keepdims=True)), fresh=True)

    return _make(p, (x,), "softmax", _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def _bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0), fresh=True)
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0), fresh=True)
        if x.requires_grad:
            gx = g * gain.data
            gx -= gx.mean(axis=-1, keepdims=True)
            gx -= xhat * (g * gain.data * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * gx, fresh=True)

    return _make(out, (x, gain, bias), "layer_norm", _bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding: id out of range for table of {vocab} rows")

    def _bw(g):
        if table.requires_grad:
            d = table.shape[1]
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
            _accum(table, full, fresh=True)

    return _make(table.data[ids], (table,), "embedding", _bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``(B, h, T, dk)`` operands.

    ``mask`` is boolean, broadcastable to ``(B, h, Tq, Tk)``; ``True`` marks an
    allowed key. Every query row must keep at least one key.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def _bw(g):
        if v.requires_grad:
            _accum(v, np.swapaxes(p, -1, -2) @ g, fresh=True)
        if q.requires_grad or k.requires_grad:
            dp = g @ np.swapaxes(v.data, -1, -2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
            if q.requires_grad:
                _accum(q, ds @ k.data, fresh=True)
            if k.requires_grad:
                _accum(k, np.swapaxes(ds, -1, -2) @ q.data, fresh=True)

    return _make(out, (q, k, v), "attention", _bw)


def cross_entropy(logits: Tensor, targets, pad_id: int | None = 0) -> Tensor:
    """Mean negative log-likelihood over non-pad target positions.

    ``logits`` has shape ``(..., V)`` and ``targets`` the leading shape.
    Returns 0 (with zero gradient) when every target is padding.
    """
    v = logits.shape[-1]
    x = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"cross_entropy: {x.shape[0]} logit rows vs {t.shape[0]} targets")
    keep = np.ones_like(t, dtype=bool) if pad_id is None else t != pad_id
    if np.any((t[keep] < 0) | (t[keep] >= v)):
        raise IndexError(f"cross_entropy: target id out of range for {v} classes")
    n = int(keep.sum())
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.nonzero(keep)[0]
    nll = lse[rows] - z[rows, t[rows]]
    loss = nll.sum() / n if n else 0.0

    def _bw(g):
        if not n:
            return
        p = np.exp(z[rows] - lse[rows, None])
        p[np.arange(rows.size), t[rows]] -= 1.0
        full = np.zeros_like(x)
        full[rows] = p * (float(g) / n)
        _accum(logits, full.reshape(logits.shape), fresh=True)

    return _make(np.asarray(loss, dtype=DTYPE), (logits,), "cross_entropy", _bw)


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # intermediate buffers are not needed once propagated
            node.grad = None


def graph_records(loss: Tensor) -> list[tuple[str, tuple[int, ...], int]]:
    """Op records ``(op, input ids, output id)`` in topological order."""
    order = _topo_order(loss)
    return [(n.op, tuple(id(p) for p in n._parents), id(n)) for n in order]


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
