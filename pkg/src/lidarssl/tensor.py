"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Dynamic tape: every op stores its parents and a vjp closure on the output
tensor.  ``backward`` replays reachable nodes in reverse creation order,
which is a valid topological order because an op's inputs always exist
before its output.  Everything is float64; there is no broadcasting beyond
the row-vector / column-vector patterns the encoders need.

Max-style reductions (``rowmax``, ``colmax``, ``scatter_max``) route the
gradient to the argmax element only, with ties broken toward the lowest
index, so backward passes are bit-reproducible.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when an op's operand shapes are inconsistent."""


_ids = itertools.count()
_check_finite = False
_margin_sink: list | None = None


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf assertion run after every forward op."""
    global _check_finite
    _check_finite = bool(enabled)


@contextmanager
def debug_checks():
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


@contextmanager
def margin_tracking():
    """Collect kink margins (distance to the nearest relu/argmax switch).

    Used by gradient-check harnesses to honour the differentiability
    precondition of finite differences: a forward pass whose smallest
    margin is below a few step sizes sits too close to a kink for central
    differences to be meaningful.
    """
    global _margin_sink
    prev = _margin_sink
    _margin_sink = []
    try:
        yield _margin_sink
    finally:
        _margin_sink = prev


def _record_margin(kind: str, value: float) -> None:
    if _margin_sink is not None:
        _margin_sink.append((kind, float(value)))


class Tensor:
    """An n-dimensional float64 value node in the differentiation graph."""

    __slots__ = ("values", "requires_grad", "grad", "op", "parents", "_vjp", "_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _make(values: np.ndarray, parents: tuple[Tensor, ...], op: str, vjp) -> Tensor:
    out = Tensor(values)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.op = op
        out.parents = parents
        out._vjp = vjp
    if _check_finite and not np.all(np.isfinite(values)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must hold exactly one element.  Each graph node is visited
    exactly once, in reverse creation order; leaf gradients accumulate.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # Reachable grad-requiring subgraph.
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t.parents:
            if p.requires_grad and p._id not in nodes:
                stack.append(p)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.values)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._vjp is None:
            # leaf
            t.grad = g if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t.parents, t._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and affine ops
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def vjp(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _make(a.values + b.values, (a, b), "add", vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def vjp(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _make(a.values - b.values, (a, b), "sub", vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def vjp(g):
        return (
            g * b.values if a.requires_grad else None,
            g * a.values if b.requires_grad else None,
        )

    return _make(a.values * b.values, (a, b), "mul", vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (g * c,)

    return _make(a.values * c, (a,), "scale", vjp)


def add_const(a: Tensor, c: float) -> Tensor:
    def vjp(g):
        return (g,)

    return _make(a.values + float(c), (a,), "add_const", vjp)


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """a: n*m, b: 1*m; adds b to every row (bias add)."""
    if a.values.ndim != 2 or b.shape != (1, a.shape[1]):
        raise ShapeError(f"add_rowvec: {a.shape} with {b.shape}")

    def vjp(g):
        return (
            g if a.requires_grad else None,
            g.sum(axis=0, keepdims=True) if b.requires_grad else None,
        )

    return _make(a.values + b.values, (a, b), "add_rowvec", vjp)


def sub_colvec(a: Tensor, b: Tensor) -> Tensor:
    """a: n*m, b: n*1; subtracts b from every column."""
    if a.values.ndim != 2 or b.shape != (a.shape[0], 1):
        raise ShapeError(f"sub_colvec: {a.shape} with {b.shape}")

    def vjp(g):
        return (
            g if a.requires_grad else None,
            -g.sum(axis=1, keepdims=True) if b.requires_grad else None,
        )

    return _make(a.values - b.values, (a, b), "sub_colvec", vjp)


def mul_colvec(a: Tensor, b: Tensor) -> Tensor:
    """a: n*m, b: n*1; scales each row of a by the matching entry of b."""
    if a.values.ndim != 2 or b.shape != (a.shape[0], 1):
        raise ShapeError(f"mul_colvec: {a.shape} with {b.shape}")

    def vjp(g):
        return (
            g * b.values if a.requires_grad else None,
            (g * a.values).sum(axis=1, keepdims=True) if b.requires_grad else None,
        )

    return _make(a.values * b.values, (a, b), "mul_colvec", vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0.0
    if _margin_sink is not None and a.values.size:
        _record_margin("relu", np.min(np.abs(a.values)))

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.values, 0.0), (a,), "relu", vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), "tanh", vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), "exp", vjp)


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (g / a.values,)

    return _make(np.log(a.values), (a,), "log", vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")

    def vjp(g):
        return (
            g @ b.values.T if a.requires_grad else None,
            a.values.T @ g if b.requires_grad else None,
        )

    return _make(a.values @ b.values, (a, b), "matmul", vjp)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: need 2-d tensor, got {a.shape}")

    def vjp(g):
        return (g.T,)

    return _make(a.values.T.copy(), (a,), "transpose", vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.values.reshape(shape), (a,), "reshape", vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    if axis not in (0, 1):
        raise ShapeError(f"concat: axis must be 0 or 1, got {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if not t.requires_grad:
                out.append(None)
            elif axis == 0:
                out.append(g[lo:hi])
            else:
                out.append(g[:, lo:hi])
        return tuple(out)

    vals = np.concatenate([t.values for t in tensors], axis=axis)
    return _make(vals, tuple(tensors), "concat", vjp)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select (possibly repeated) rows; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    n, c = a.shape

    def vjp(g):
        flat = (idx[:, None] * c + np.arange(c)[None, :]).ravel()
        gx = np.bincount(flat, weights=g.ravel(), minlength=n * c).reshape(n, c)
        return (gx,)

    return _make(a.values[idx], (a,), "gather_rows", vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g.reshape(()))),)

    return _make(np.array([[a.values.sum()]]), (a,), "sum_all", vjp)


def mean_all(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.values.size

    def vjp(g):
        return (np.full(shape, float(g.reshape(())) / n),)

    return _make(np.array([[a.values.mean()]]), (a,), "mean_all", vjp)


def sum_rows(a: Tensor) -> Tensor:
    """n*m -> n*1 row sums."""
    m = a.shape[1]

    def vjp(g):
        return (np.repeat(g, m, axis=1),)

    return _make(a.values.sum(axis=1, keepdims=True), (a,), "sum_rows", vjp)


def _max_margin(values: np.ndarray, axis: int) -> float:
    if values.shape[axis] < 2:
        return np.inf
    part = np.sort(values, axis=axis)
    if axis == 1:
        return float(np.min(part[:, -1] - part[:, -2]))
    return float(np.min(part[-1, :] - part[-2, :]))


def rowmax(a: Tensor) -> Tensor:
    """n*m -> n*1 row maxima; gradient only to the argmax (lowest index on ties)."""
    arg = np.argmax(a.values, axis=1)
    n, m = a.shape
    if _margin_sink is not None:
        _record_margin("rowmax", _max_margin(a.values, axis=1))

    def vjp(g):
        gx = np.zeros((n, m))
        gx[np.arange(n), arg] = g[:, 0]
        return (gx,)

    return _make(a.values[np.arange(n), arg][:, None], (a,), "rowmax", vjp)


def colmax(a: Tensor) -> Tensor:
    """n*m -> 1*m column maxima; gradient only to the argmax (lowest index on ties)."""
    arg = np.argmax(a.values, axis=0)
    n, m = a.shape
    if _margin_sink is not None:
        _record_margin("colmax", _max_margin(a.values, axis=0))

    def vjp(g):
        gx = np.zeros((n, m))
        gx[arg, np.arange(m)] = g[0, :]
        return (gx,)

    return _make(a.values[arg, np.arange(m)][None, :], (a,), "colmax", vjp)


def scatter_max(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Segment-wise column max of rows; empty segments yield zero rows.

    Gradient flows only to the winning row per (segment, channel); ties go
    to the lowest row index.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    n, c = a.shape
    if ids.shape != (n,):
        raise ShapeError(f"scatter_max: ids shape {ids.shape} for {n} rows")
    if n and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeError("scatter_max: segment id out of range")
    out = np.full((num_segments, c), -np.inf)
    np.maximum.at(out, ids, a.values)
    empty = ~np.isfinite(out)
    out[empty] = 0.0
    # Winner per (segment, channel): lowest contributing row achieving the max.
    winner = np.full((num_segments, c), n, dtype=np.int64)
    hit_row, hit_col = np.nonzero(a.values == out[ids])
    np.minimum.at(winner, (ids[hit_row], hit_col), hit_row)
    winner[winner == n] = -1
    winner[empty] = -1
    if _margin_sink is not None and n:
        gaps = out[ids] - a.values
        gaps = gaps[gaps > 0.0]
        if gaps.size:
            _record_margin("scatter_max", float(gaps.min()))

    def vjp(g):
        gx = np.zeros((n, c))
        seg, col = np.nonzero(winner >= 0)
        rows = winner[seg, col]
        gx[rows, col] += g[seg, col]  # one winner per (segment, channel): no collisions
        return (gx,)

    return _make(out, (a,), "scatter_max", vjp)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(row_norm, eps); zero rows pass through scaled by 1/eps."""
    if a.values.ndim != 2:
        raise ShapeError(f"l2_normalize: need 2-d tensor, got {a.shape}")
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = a.values / denom
    guarded = norms < eps

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        gx = (g - out * dot) / denom
        if guarded.any():
            rows = guarded[:, 0]
            gx[rows] = g[rows] / eps
        return (gx,)

    return _make(out, (a,), "l2_normalize", vjp)


def softmax_row(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if a.values.ndim != 2:
        raise ShapeError(f"softmax_row: need 2-d tensor, got {a.shape}")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), "softmax_row", vjp)


# ---------------------------------------------------------------------------
# 3x3 grid convolution (zero padding)
# ---------------------------------------------------------------------------

_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]


def conv3x3(a: Tensor, h: int, w: int, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution over a flattened h*w grid of feature rows.

    ``a`` is (h*w, c_in) in row-major cell order, ``weight`` is
    (9*c_in, c_out) with the 9 kernel taps in (dr, dc) row-major order,
    ``bias`` is (1, c_out).  Borders use zero padding.
    """
    hw, c_in = a.shape
    if hw != h * w:
        raise ShapeError(f"conv3x3: grid rows {hw} != {h}*{w}")
    if weight.shape[0] != 9 * c_in:
        raise ShapeError(f"conv3x3: weight rows {weight.shape[0]} != 9*{c_in}")
    c_out = weight.shape[1]
    if bias.shape != (1, c_out):
        raise ShapeError(f"conv3x3: bias shape {bias.shape} for c_out={c_out}")

    grid = a.values.reshape(h, w, c_in)
    wv = weight.values
    out = np.tile(bias.values[0], (h, w, 1))
    spans = []
    for j, (dr, dc) in enumerate(_OFFSETS):
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        spans.append((r0, r1, c0, c1, dr, dc))
        if r1 <= r0 or c1 <= c0:
            continue
        wj = wv[j * c_in : (j + 1) * c_in]
        out[r0:r1, c0:c1] += grid[r0 + dr : r1 + dr, c0 + dc : c1 + dc] @ wj

    def vjp(g):
        g3 = g.reshape(h, w, c_out)
        ga = np.zeros((h, w, c_in)) if a.requires_grad else None
        gw = np.zeros_like(wv) if weight.requires_grad else None
        gb = g.sum(axis=0, keepdims=True) if bias.requires_grad else None
        for j, (r0, r1, c0, c1, dr, dc) in enumerate(spans):
            if r1 <= r0 or c1 <= c0:
                continue
            wj = wv[j * c_in : (j + 1) * c_in]
            gslice = g3[r0:r1, c0:c1]
            src = grid[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
            if ga is not None:
                ga[r0 + dr : r1 + dr, c0 + dc : c1 + dc] += gslice @ wj.T
            if gw is not None:
                gw[j * c_in : (j + 1) * c_in] = src.reshape(-1, c_in).T @ gslice.reshape(-1, c_out)
        return (
            ga.reshape(hw, c_in) if ga is not None else None,
            gw,
            gb,
        )

    return _make(out.reshape(hw, c_out), (a, weight, bias), "conv3x3", vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _eval_scalar(f, x: Tensor) -> float:
    out = f(x)
    if out.size != 1:
        raise ShapeError("grad_check target must return a scalar")
    return float(out.values.reshape(()))


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative disagreement between analytic grads and central differences.

    relative error per coordinate: |analytic - fd| / max(|analytic|, 1e-8).
    ``f`` must be deterministic and twice differentiable at ``x``.
    """
    x.grad = None
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.values)
    x.grad = None
    flat = x.values.ravel()
    aflat = analytic.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval_scalar(f, x)
        flat[i] = orig - h
        fm = _eval_scalar(f, x)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        err = abs(aflat[i] - fd) / max(abs(aflat[i]), 1e-8)
        worst = max(worst, err)
    return worst


def grad_check_params(f, params: dict[str, Tensor], h: float = 1e-5) -> tuple[float, str]:
    """grad_check over every tensor of a parameter dict, for a loss ``f()``.

    Returns (max relative error, name of the offending parameter).
    """
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values)) for k, p in params.items()}
    for p in params.values():
        p.grad = None
    worst, worst_name = 0.0, ""
    for name, p in params.items():
        flat = p.values.ravel()
        aflat = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().values.reshape(()))
            flat[i] = orig - h
            fm = float(f().values.reshape(()))
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(abs(aflat[i]), 1e-8)
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name
