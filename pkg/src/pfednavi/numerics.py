"""Dense float64 tensors and taped reverse-mode differentiation.

The engine is intentionally small.  Values are numpy arrays in row-major
order; a :class:`Tape` records primitive operations in execution order, so
reversed iteration is already a topological order and gradient accumulation
is bitwise reproducible for identical tapes.  There is no broadcasting
beyond what each documented op defines.

Two kinds of ops exist: the generic primitives (matmul, add, mul, tanh,
sigmoid, softmax, concat, gather_rows, reductions, scale, cross entropy)
and a few fused recurrent/attention steps whose vector-Jacobian products
are written by hand.  Every op, fused or not, is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeMismatch",
    "Tensor",
    "Tape",
    "Gradients",
    "backward",
    "grad_check",
    "const",
    "matmul",
    "matmul_nt",
    "affine",
    "add",
    "add_n",
    "sub",
    "mul",
    "smul",
    "scale",
    "tanh",
    "sigmoid",
    "softmax",
    "concat",
    "stack_cols",
    "gather_rows",
    "reduce_sum",
    "reduce_mean",
    "cross_entropy",
    "weighted_nll",
    "gru_step",
    "attend",
    "pair_scores",
]


class ShapeMismatch(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """Immutable float64 value, optionally attached to a tape node."""

    __slots__ = ("value", "tape", "nid")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, nid: int = -1):
        self.value = value
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the value."""
        return self.value.reshape(-1)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" nid={self.nid}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


def const(x) -> Tensor:
    """Wrap a value as an untracked constant tensor."""
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Linear record of primitive ops; append order is topological order."""

    __slots__ = ("_parents", "_vjps", "_shapes")

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, value) -> Tensor:
        """Register an input node (typically a parameter) on this tape."""
        arr = np.asarray(value, dtype=np.float64)
        nid = len(self._parents)
        self._parents.append(())
        self._vjps.append(None)
        self._shapes.append(arr.shape)
        return Tensor(arr, self, nid)

    def _record(self, value: np.ndarray, parents: tuple[int, ...], vjp: Callable | None) -> Tensor:
        nid = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        return Tensor(value, self, nid)


class Gradients:
    """Result of :func:`backward`: gradient arrays addressable by tensor."""

    __slots__ = ("_grads", "_shapes")

    def __init__(self, grads: list, shapes: list):
        self._grads = grads
        self._shapes = shapes

    def get(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zeros if the loss did not depend on it."""
        if t.nid < 0 or t.nid >= len(self._grads):
            raise KeyError("tensor is not a node of the differentiated tape")
        g = self._grads[t.nid]
        if g is None:
            return np.zeros(self._shapes[t.nid])
        return g

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self.get(t)


def _tape_of(op: str, *tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError(f"{op}: operands live on different tapes")
    return tape


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from ``loss`` (a scalar) over everything recorded before it."""
    if loss.tape is not tape:
        raise ValueError("loss tensor does not belong to this tape")
    if loss.value.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    n = len(tape)
    grads: list = [None] * n
    grads[loss.nid] = np.ones_like(loss.value)
    parents = tape._parents
    vjps = tape._vjps
    for i in range(loss.nid, -1, -1):
        g = grads[i]
        if g is None:
            continue
        vjp = vjps[i]
        if vjp is None:
            continue
        for pid, pg in zip(parents[i], vjp(g)):
            if pid < 0 or pg is None:
                continue
            cur = grads[pid]
            # Out-of-place accumulation: vjp outputs may alias their input.
            grads[pid] = pg if cur is None else cur + pg
    return Gradients(grads, tape._shapes)


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between taped and central-difference gradients.

    ``fn`` must build a scalar output from its single tensor argument using
    ops from this module only.  The relative error at each coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    pt = np.asarray(point, dtype=np.float64)
    tape = Tape()
    x = tape.leaf(pt)
    out = fn(x)
    if out.value.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    analytic = backward(tape, out).get(x).reshape(-1)

    flat = pt.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = fn(const(bumped.reshape(pt.shape))).value
        bumped[i] = flat[i] - step
        lo = fn(const(bumped.reshape(pt.shape))).value
        numeric[i] = (float(hi) - float(lo)) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(numeric))
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# generic primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch("matmul", av.shape, bv.shape)
    out = av @ bv
    tape = _tape_of("matmul", a, b)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g @ bv.T, av.T @ g)

    return tape._record(out, (a.nid, b.nid), vjp)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b.T`` for 2-D operands sharing their trailing dimension."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeMismatch("matmul_nt", av.shape, bv.shape)
    out = av @ bv.T
    tape = _tape_of("matmul_nt", a, b)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g @ bv, g.T @ av)

    return tape._record(out, (a.nid, b.nid), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with a 1-D bias broadcast over rows."""
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise ShapeMismatch("affine", xv.shape, wv.shape, bv.shape)
    out = xv @ wv + bv
    tape = _tape_of("affine", x, w, b)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g @ wv.T, xv.T @ g, g.sum(axis=0))

    return tape._record(out, (x.nid, w.nid, b.nid), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise ShapeMismatch("add", a.value.shape, b.value.shape)
    out = a.value + b.value
    tape = _tape_of("add", a, b)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g, g)

    return tape._record(out, (a.nid, b.nid), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference of same-shape tensors."""
    if a.value.shape != b.value.shape:
        raise ShapeMismatch("sub", a.value.shape, b.value.shape)
    out = a.value - b.value
    tape = _tape_of("sub", a, b)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g, -g)

    return tape._record(out, (a.nid, b.nid), vjp)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shape tensors as a single node."""
    if not tensors:
        raise ValueError("add_n of an empty sequence")
    shape = tensors[0].value.shape
    for t in tensors[1:]:
        if t.value.shape != shape:
            raise ShapeMismatch("add_n", shape, t.value.shape)
    out = tensors[0].value.copy()
    for t in tensors[1:]:
        out += t.value
    tape = _tape_of("add_n", *tensors)
    if tape is None:
        return Tensor(out)
    k = len(tensors)

    def vjp(g):
        return (g,) * k

    return tape._record(out, tuple(t.nid for t in tensors), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeMismatch("mul", av.shape, bv.shape)
    out = av * bv
    tape = _tape_of("mul", a, b)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g * bv, g * av)

    return tape._record(out, (a.nid, b.nid), vjp)


def smul(t: Tensor, s: Tensor) -> Tensor:
    """Scale a tensor by a 0-d tensor (the only tensor-tensor broadcast)."""
    sv = s.value
    if sv.ndim != 0:
        raise ShapeMismatch("smul", t.value.shape, sv.shape)
    tv = t.value
    out = tv * sv
    tape = _tape_of("smul", t, s)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (g * sv, np.asarray((g * tv).sum()))

    return tape._record(out, (t.nid, s.nid), vjp)


def scale(t: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant."""
    c = float(c)
    out = t.value * c
    if t.tape is None:
        return Tensor(out)

    def vjp(g):
        return (g * c,)

    return t.tape._record(out, (t.nid,), vjp)


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.value)
    if t.tape is None:
        return Tensor(out)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return t.tape._record(out, (t.nid,), vjp)


def sigmoid(t: Tensor) -> Tensor:
    out = _sigmoid(t.value)
    if t.tape is None:
        return Tensor(out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return t.tape._record(out, (t.nid,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow on extreme inputs
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction."""
    out = _softmax(t.value)
    if t.tape is None:
        return Tensor(out)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return t.tape._record(out, (t.nid,), vjp)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree."""
    if not tensors:
        raise ValueError("concat of an empty sequence")
    values = [t.value for t in tensors]
    ref = list(values[0].shape)
    for v in values[1:]:
        s = list(v.shape)
        if len(s) != len(ref) or s[:axis] != ref[:axis] or s[axis + 1 :] != ref[axis + 1 :]:
            raise ShapeMismatch("concat", values[0].shape, v.shape)
    out = np.concatenate(values, axis=axis)
    tape = _tape_of("concat", *tensors)
    if tape is None:
        return Tensor(out)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i] : offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return tape._record(out, tuple(t.nid for t in tensors), vjp)


def stack_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D ``(B, D)`` tensors into ``(B, M, D)`` along a new middle axis."""
    if not tensors:
        raise ValueError("stack_cols of an empty sequence")
    shape = tensors[0].value.shape
    for t in tensors[1:]:
        if t.value.shape != shape or t.value.ndim != 2:
            raise ShapeMismatch("stack_cols", shape, t.value.shape)
    out = np.stack([t.value for t in tensors], axis=1)
    tape = _tape_of("stack_cols", *tensors)
    if tape is None:
        return Tensor(out)
    m = len(tensors)

    def vjp(g):
        return tuple(g[:, j, :] for j in range(m))

    return tape._record(out, tuple(t.nid for t in tensors), vjp)


def gather_rows(t: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor by integer index (embedding lookup)."""
    tv = t.value
    if tv.ndim != 2:
        raise ShapeMismatch("gather_rows", tv.shape)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("gather_rows", tv.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {tv.shape[0]} rows")
    out = tv[idx]
    if t.tape is None:
        return Tensor(out)

    def vjp(g):
        acc = np.zeros_like(tv)
        np.add.at(acc, idx, g)
        return (acc,)

    return t.tape._record(out, (t.nid,), vjp)


def reduce_sum(t: Tensor) -> Tensor:
    out = np.asarray(t.value.sum())
    if t.tape is None:
        return Tensor(out)
    shape = t.value.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return t.tape._record(out, (t.nid,), vjp)


def reduce_mean(t: Tensor) -> Tensor:
    n = t.value.size
    if n == 0:
        raise ShapeMismatch("reduce_mean", t.value.shape)
    out = np.asarray(t.value.sum() / n)
    if t.tape is None:
        return Tensor(out)
    shape = t.value.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return t.tape._record(out, (t.nid,), vjp)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row softmax.

    ``logits`` is ``(B, K)`` (a 1-D row is treated as ``(1, K)``); ``targets``
    holds integer class indices.  ``mask`` selects which rows count; the mean
    runs over rows with nonzero mask.
    """
    lv = logits.value
    squeeze = lv.ndim == 1
    if squeeze:
        lv = lv[None, :]
    if lv.ndim != 2:
        raise ShapeMismatch("cross_entropy", logits.value.shape)
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if tgt.shape != (lv.shape[0],):
        raise ShapeMismatch("cross_entropy", lv.shape, tgt.shape)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= lv.shape[1]):
        raise IndexError("cross_entropy: target index out of range")
    if mask is None:
        m = np.ones(lv.shape[0])
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(-1)
        if m.shape != (lv.shape[0],):
            raise ShapeMismatch("cross_entropy", lv.shape, m.shape)
    count = float((m != 0).sum())
    if count == 0:
        raise ValueError("cross_entropy: mask selects no rows")
    logp = _log_softmax(lv)
    rows = np.arange(lv.shape[0])
    out = np.asarray(-(logp[rows, tgt] * m).sum() / count)
    if logits.tape is None:
        return Tensor(out)
    probs = np.exp(logp)

    def vjp(g):
        d = probs.copy()
        d[rows, tgt] -= 1.0
        d *= (m * (float(g) / count))[:, None]
        return (d[0] if squeeze else d,)

    return logits.tape._record(out, (logits.nid,), vjp)


def weighted_nll(logits: Tensor, targets, weights) -> Tensor:
    """Sum over rows of ``weights[b] * (-log softmax(logits)[b, targets[b]])``.

    Unlike :func:`cross_entropy` there is no normalisation; the weights are
    plain constants, so this is the policy-gradient surrogate with whatever
    advantage values the caller baked into ``weights``.
    """
    lv = logits.value
    if lv.ndim != 2:
        raise ShapeMismatch("weighted_nll", lv.shape)
    tgt = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if tgt.shape != (lv.shape[0],) or w.shape != (lv.shape[0],):
        raise ShapeMismatch("weighted_nll", lv.shape, tgt.shape, w.shape)
    logp = _log_softmax(lv)
    rows = np.arange(lv.shape[0])
    out = np.asarray(-(logp[rows, tgt] * w).sum())
    if logits.tape is None:
        return Tensor(out)
    probs = np.exp(logp)

    def vjp(g):
        d = probs.copy()
        d[rows, tgt] -= 1.0
        d *= (w * float(g))[:, None]
        return (d,)

    return logits.tape._record(out, (logits.nid,), vjp)


# ---------------------------------------------------------------------------
# fused recurrent / attention steps
# ---------------------------------------------------------------------------


def gru_step(
    x: Tensor,
    h: Tensor,
    w_update: Tensor,
    b_update: Tensor,
    w_reset: Tensor,
    b_reset: Tensor,
    w_cand: Tensor,
    b_cand: Tensor,
    carry=None,
) -> Tensor:
    """One gated recurrent update ``(B, I), (B, H) -> (B, H)``.

    Gate weights act on the concatenation ``[x, h]``.  ``carry`` is an
    optional constant ``(B, 1)`` column of {0, 1}: rows with 0 keep their
    previous state (used for padded positions in batched sequences).
    """
    xv, hv = x.value, h.value
    if xv.ndim != 2 or hv.ndim != 2 or xv.shape[0] != hv.shape[0]:
        raise ShapeMismatch("gru_step", xv.shape, hv.shape)
    din, hid = xv.shape[1], hv.shape[1]
    for wname, wt, bt in (
        ("update", w_update, b_update),
        ("reset", w_reset, b_reset),
        ("cand", w_cand, b_cand),
    ):
        if wt.value.shape != (din + hid, hid) or bt.value.shape != (hid,):
            raise ShapeMismatch(f"gru_step/{wname}", wt.value.shape, bt.value.shape)

    wu, bu = w_update.value, b_update.value
    wr, br = w_reset.value, b_reset.value
    wc, bc = w_cand.value, b_cand.value
    xh = np.concatenate([xv, hv], axis=1)
    z = _sigmoid(xh @ wu + bu)
    r = _sigmoid(xh @ wr + br)
    xrh = np.concatenate([xv, r * hv], axis=1)
    c = np.tanh(xrh @ wc + bc)
    u = (1.0 - z) * hv + z * c
    if carry is None:
        out = u
        mcol = None
    else:
        mcol = np.asarray(carry, dtype=np.float64).reshape(-1, 1)
        if mcol.shape[0] != xv.shape[0]:
            raise ShapeMismatch("gru_step", xv.shape, mcol.shape)
        out = hv + mcol * (u - hv)

    tape = _tape_of("gru_step", x, h, w_update, b_update, w_reset, b_reset, w_cand, b_cand)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        gu = g if mcol is None else g * mcol
        dc = gu * z * (1.0 - c * c)
        dz = gu * (c - hv) * z * (1.0 - z)
        dwc = xrh.T @ dc
        dbc = dc.sum(axis=0)
        dxrh = dc @ wc.T
        dx = dxrh[:, :din]
        drh = dxrh[:, din:]
        dr = drh * hv * r * (1.0 - r)
        dwz = xh.T @ dz
        dbz = dz.sum(axis=0)
        dwr = xh.T @ dr
        dbr = dr.sum(axis=0)
        dxh = dz @ wu.T + dr @ wr.T
        dx = dx + dxh[:, :din]
        dh = gu * (1.0 - z) + drh * r + dxh[:, din:]
        if mcol is not None:
            dh = dh + g * (1.0 - mcol)
        return (dx, dh, dwz, dbz, dwr, dbr, dwc, dbc)

    parents = (
        x.nid,
        h.nid,
        w_update.nid,
        b_update.nid,
        w_reset.nid,
        b_reset.nid,
        w_cand.nid,
        b_cand.nid,
    )
    return tape._record(out, parents, vjp)


def _check_attend(op: str, q: Tensor, keys: Tensor, mask) -> np.ndarray | None:
    qv, kv = q.value, keys.value
    if qv.ndim != 2 or kv.ndim != 3 or kv.shape[0] != qv.shape[0] or kv.shape[2] != qv.shape[1]:
        raise ShapeMismatch(op, qv.shape, kv.shape)
    if mask is None:
        return None
    mv = np.asarray(mask, dtype=np.float64)
    if mv.shape != kv.shape[:2]:
        raise ShapeMismatch(op, kv.shape, mv.shape)
    return mv


def pair_scores(q: Tensor, keys: Tensor, mask=None) -> Tensor:
    """Bilinear scores ``(B, K)`` between query rows and per-row key sets.

    ``score[b, k] = q[b] . keys[b, k]`` plus an optional additive constant
    mask (use large negatives to exclude padded keys).
    """
    mv = _check_attend("pair_scores", q, keys, mask)
    qv, kv = q.value, keys.value
    out = np.einsum("bd,bkd->bk", qv, kv)
    if mv is not None:
        out = out + mv
    tape = _tape_of("pair_scores", q, keys)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        return (np.einsum("bk,bkd->bd", g, kv), np.einsum("bk,bd->bkd", g, qv))

    return tape._record(out, (q.nid, keys.nid), vjp)


def attend(q: Tensor, keys: Tensor, mask=None) -> Tensor:
    """Soft attention readout ``(B, D)`` over per-row key sets ``(B, K, D)``.

    Scores are dot products, masked additively, softmaxed over K, then used
    to mix the keys.  The mask is a constant.
    """
    mv = _check_attend("attend", q, keys, mask)
    qv, kv = q.value, keys.value
    scores = np.einsum("bd,bkd->bk", qv, kv)
    if mv is not None:
        scores = scores + mv
    p = _softmax(scores)
    out = np.einsum("bk,bkd->bd", p, kv)
    tape = _tape_of("attend", q, keys)
    if tape is None:
        return Tensor(out)

    def vjp(g):
        dp = np.einsum("bd,bkd->bk", g, kv)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = np.einsum("bk,bkd->bd", ds, kv)
        dk = np.einsum("bk,bd->bkd", p, g) + np.einsum("bk,bd->bkd", ds, qv)
        return (dq, dk)

    return tape._record(out, (q.nid, keys.nid), vjp)
