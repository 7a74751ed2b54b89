"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a backward closure on the output tensor; calling
:func:`backward` on a scalar loss walks the recorded graph once in reverse
topological order and accumulates gradients into ``.grad``. Gradients on
leaf tensors accumulate across calls (call :func:`zero_grad` between
optimizer steps). Intermediate tensors are created fresh per forward pass,
so a pass owns its tape and independent passes may run concurrently as
long as they do not share intermediates.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPS_L2NORM = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus an optional gradient slot.

    ``requires_grad`` marks trainable leaves; operation outputs require
    grad whenever any input does and tape recording is enabled.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def item(self) -> float:
        return float(self.data)


def _out(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            t.grad = t.grad + g


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


def parameter(data, rng: np.random.Generator | None = None, scale_: float | None = None) -> Tensor:
    """Leaf tensor with ``requires_grad=True``; optionally uniform(-scale, scale) init."""
    if rng is not None:
        data = rng.uniform(-scale_, scale_, size=data)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not match")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _out(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _out(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (elementwise) product."""
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _out(ad * bd, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(a, g * s)

    return _out(a.data * s, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    ad, bd = a.data, b.data

    def bw(g):
        _accum(a, g @ bd.T)
        _accum(b, ad.T @ g)

    return _out(ad @ bd, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")

    def bw(g):
        _accum(a, g.T)

    return _out(a.data.T.copy(), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: no operands")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    parts = tuple(parts)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _out(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice of a matrix; backward scatters into the slice."""
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError(f"take_rows: rows [{start}:{stop}] invalid for shape {a.data.shape}")
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        full[start:stop] = g
        _accum(a, full)

    return _out(a.data[start:stop].copy(), (a,), bw)


def take_col(a: Tensor, j: int) -> Tensor:
    """Column j of a matrix as a (rows, 1) tensor."""
    if a.data.ndim != 2 or not (0 <= j < a.data.shape[1]):
        raise ShapeError(f"take_col: column {j} invalid for shape {a.data.shape}")
    shape = a.data.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, j : j + 1] = g
        _accum(a, full)

    return _out(a.data[:, j : j + 1].copy(), (a,), bw)


def broadcast_cols(a: Tensor, n: int) -> Tensor:
    """Tile a (d, 1) column against a length-n row of ones, giving (d, n)."""
    if a.data.ndim != 2 or a.data.shape[1] != 1:
        raise ShapeError(f"broadcast_cols: expected a column (d, 1), got {a.data.shape}")
    if n < 1:
        raise ShapeError(f"broadcast_cols: need n >= 1, got {n}")

    def bw(g):
        _accum(a, g.sum(axis=1, keepdims=True))

    return _out(np.repeat(a.data, n, axis=1), (a,), bw)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, shape).copy())

    return _out(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _out(y, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # numerically symmetric formulation, exact for large |x|
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _out(y, (a,), bw)


def dropout(a: Tensor, keep_prob: float, rng: np.random.Generator | None = None,
            training: bool = True) -> Tensor:
    """Inverted dropout: train-mode mask scaled by 1/keep_prob, identity in eval."""
    if not (0.0 < keep_prob <= 1.0):
        raise ValueError(f"dropout: keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return a
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    mask = (rng.random(a.data.shape) < keep_prob) / keep_prob

    def bw(g):
        _accum(a, g * mask)

    return _out(a.data * mask, (a,), bw)


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    if a.data.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.data.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _out(y, (a,), bw)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Softmax restricted to ``mask`` positions; masked-out entries are exactly 0.

    The mask is a routing decision, not a variable: no gradient flows to
    masked-out entries.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs data {a.data.shape}")
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: some slice has no unmasked entry")
    neg = np.where(mask, a.data, -np.inf)
    z = neg - neg.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _out(y, (a,), bw)


def l2_normalize(a: Tensor, axis: int) -> Tensor:
    """Scale each slice along ``axis`` to unit norm; sqrt(sum(x^2) + eps) guards zero."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True) + EPS_L2NORM)
    y = x / norm

    def bw(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        _accum(a, g / norm - x * dot / norm**3)

    return _out(y, (a,), bw)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single row of logits, as a scalar."""
    flat = logits.data.reshape(-1)
    n = flat.shape[0]
    if logits.data.ndim > 2 or (logits.data.ndim == 2 and logits.data.shape[0] != 1):
        raise ShapeError(f"softmax_cross_entropy: expected a logit row, got {logits.data.shape}")
    if not (0 <= target < n):
        raise ValueError(f"softmax_cross_entropy: target {target} out of range [0, {n})")
    m = flat.max()
    e = np.exp(flat - m)
    lse = m + np.log(e.sum())
    probs = e / e.sum()
    shape = logits.data.shape

    def bw(g):
        d = probs.copy()
        d[target] -= 1.0
        _accum(logits, float(g) * d.reshape(shape))

    return _out(np.asarray(lse - flat[target]), (logits,), bw)


# ---------------------------------------------------------------------------
# embedding lookup
# ---------------------------------------------------------------------------


def embedding_cols(table: Tensor, ids: Sequence[int], pad_id: int = 0) -> Tensor:
    """Columns of word vectors for ``ids``: column j is table row ids[j].

    PAD columns are exactly zero and receive no gradient.
    """
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.data.shape[0]
    if ids.size == 0:
        raise ShapeError("embedding_cols: empty id sequence")
    if (ids < 0).any() or (ids >= vocab).any():
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise ValueError(f"embedding_cols: id {bad} out of range for vocab size {vocab}")
    valid = ids != pad_id
    out = table.data[ids].T.copy()
    out[:, ~valid] = 0.0
    tshape = table.data.shape

    def bw(g):
        gt = np.zeros(tshape)
        np.add.at(gt, ids[valid], g[:, valid].T)
        _accum(table, gt)

    return _out(out, (table,), bw)


# ---------------------------------------------------------------------------
# discrete selection (no gradient: a routing decision)
# ---------------------------------------------------------------------------


def topk_indices(row, k: int) -> np.ndarray:
    """Indices of the k largest values of a 1-d row, ascending by index.

    Ties break toward the lowest index. k larger than the row is clamped
    (tiny graphs reuse full-scale defaults).
    """
    values = row.data if isinstance(row, Tensor) else np.asarray(row)
    values = values.reshape(-1)
    n = values.shape[0]
    if k < 1:
        raise ValueError(f"topk_indices: k must be >= 1, got {k}")
    if k > n:
        log.warning("topk_indices: k=%d exceeds row length %d; clamping", k, n)
        k = n
    order = np.lexsort((np.arange(n), -values))  # value desc, index asc on ties
    return np.sort(order[:k])


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` with d(loss)/d(tensor) for everything reachable.

    ``loss`` must be scalar. Gradients accumulate into existing ``.grad``
    slots; passing ``params`` zero-fills them first so parameters the loss
    never touches read back as exact zeros.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if params is not None:
        zero_grad(params)

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones(())
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
