"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records a forward pass as a list of (op name, output id,
adjoint closure) triples.  Adjoints are registered at the granularity of the
library's vector operations (tensor products, gates, aggregations, ...)
rather than per scalar op, which keeps the tape short and the backward pass
fast.  Constants can be passed as plain ndarrays anywhere a :class:`Var` is
accepted; they are simply not tracked.

``differentiate(loss, params)`` returns the gradient of a scalar loss with
respect to every parameter; parameters that the loss does not depend on get
zero gradients.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter

__all__ = [
    "Tape", "Var", "UnregisteredAdjointError", "differentiate",
    "value_of", "gather_rows", "segment_sum", "concat_cols", "slice_cols",
    "permute_cols", "add", "scale", "mul", "vsum", "swish", "dense",
    "matmul_rows", "mean_pool", "broadcast_rows", "mse_loss", "mae_loss",
]


class UnregisteredAdjointError(RuntimeError):
    pass


class Var:
    """Handle to one array produced during a recorded forward pass."""

    __slots__ = ("value", "id")

    def __init__(self, value, vid):
        self.value = value
        self.id = vid

    @property
    def shape(self):
        return self.value.shape


class Tape:
    __slots__ = ("_records", "_next_id", "_param_leaves")

    def __init__(self):
        self._records = []
        self._next_id = 0
        self._param_leaves = {}  # var id -> parameter id

    def _new_var(self, value) -> Var:
        v = Var(np.asarray(value, dtype=np.float64), self._next_id)
        self._next_id += 1
        return v

    def leaf(self, param: Parameter) -> Var:
        """Enter a trainable parameter into the recording."""
        v = self._new_var(param.value)
        self._param_leaves[v.id] = param.id
        return v

    def record(self, op: str, out_value, backward) -> Var:
        """Create an output variable for ``op``.

        ``backward(grad_out)`` must return a list of (input Var id, gradient
        contribution) pairs.  Passing ``backward=None`` marks the op as
        having no registered adjoint; differentiation through it is a hard
        error naming the op.
        """
        out = self._new_var(out_value)
        self._records.append((op, out.id, backward))
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else x


def differentiate(loss: Var, params, tape: Tape) -> dict:
    """Gradients of a recorded scalar loss w.r.t. a set of parameters.

    Returns a dict mapping parameter id to a gradient array of the
    parameter's shape.  Parameters unreachable from the loss get zeros.
    """
    if np.asarray(loss.value).size != 1:
        raise ValueError("loss must be a scalar")
    grads = {loss.id: np.ones_like(np.asarray(loss.value, dtype=np.float64))}
    for op, out_id, backward in reversed(tape._records):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        if backward is None:
            raise UnregisteredAdjointError(f"op {op!r} has no registered adjoint")
        for vid, contrib in backward(g):
            if vid in grads:
                grads[vid] = grads[vid] + contrib
            else:
                grads[vid] = contrib

    by_param = {}
    for vid, pid in tape._param_leaves.items():
        if vid in grads:
            g = by_param.get(pid)
            by_param[pid] = grads[vid] if g is None else g + grads[vid]
    out = {}
    for p in params:
        g = by_param.get(p.id)
        out[p.id] = np.zeros_like(p.value) if g is None else np.reshape(g, p.value.shape)
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def gather_rows(tape, x, idx, scatter_csr=None):
    """out[e] = x[idx[e]].  ``scatter_csr`` (shape [n_rows(x), len(idx)])
    performs the scatter-add in the backward pass; without it the adjoint
    falls back to ``np.add.at``."""
    xv = value_of(x)
    out = xv[idx]
    if not isinstance(x, Var):
        return out
    if scatter_csr is not None:
        def backward(g):
            return [(x.id, scatter_csr @ g)]
    else:
        def backward(g):
            gx = np.zeros_like(xv)
            np.add.at(gx, idx, g)
            return [(x.id, gx)]
    return tape.record("gather_rows", out, backward)


def segment_sum(tape, x, csr, idx):
    """Sum rows of x into segments: out = csr @ x, with csr the 0/1
    aggregation matrix whose row i selects the rows idx == i."""
    xv = value_of(x)
    out = csr @ xv
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, g[idx])]
    return tape.record("segment_sum", out, backward)


def concat_cols(tape, parts):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=-1)
    tracked = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not tracked:
        return out
    offs = np.cumsum([0] + [v.shape[-1] for v in vals])

    def backward(g):
        return [(p.id, g[..., offs[i]:offs[i + 1]]) for i, p in tracked]
    return tape.record("concat_cols", out, backward)


def permute_cols(tape, x, perm, inv_perm):
    """Reorder the trailing axis; used to regroup concatenated layouts into
    a compact term order before a tensor product."""
    xv = value_of(x)
    out = xv[..., perm]
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, g[..., inv_perm])]
    return tape.record("permute_cols", out, backward)


def slice_cols(tape, x, sl: slice):
    xv = value_of(x)
    out = xv[..., sl]
    if not isinstance(x, Var):
        return out

    def backward(g):
        gx = np.zeros_like(xv)
        gx[..., sl] = g
        return [(x.id, gx)]
    return tape.record("slice_cols", out, backward)


def add(tape, a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tracked = [v for v in (a, b) if isinstance(v, Var)]
    if not tracked:
        return out

    def backward(g):
        return [(v.id, g) for v in tracked]
    return tape.record("add", out, backward)


def scale(tape, x, c: float):
    xv = value_of(x)
    out = xv * c
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, g * c)]
    return tape.record("scale", out, backward)


def mul(tape, a, b):
    """Elementwise product; either side may be a constant array."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, bv))
    if isinstance(b, Var):
        pairs.append((b, av))
    if not pairs:
        return out

    def backward(g):
        return [(v.id, g * other) for v, other in pairs]
    return tape.record("mul", out, backward)


def vsum(tape, x):
    xv = value_of(x)
    out = np.sum(xv)
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, np.broadcast_to(g, xv.shape).copy())]
    return tape.record("sum", out, backward)


def _swish(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def swish(tape, x):
    """x * sigmoid(x)."""
    xv = value_of(x)
    out, s = _swish(xv)
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, g * (s * (1.0 + xv * (1.0 - s))))]
    return tape.record("swish", out, backward)


def dense(tape, x, w, b=None):
    """Plain affine map on the trailing axis: out = x @ w (+ b)."""
    xv, wv = value_of(x), value_of(w)
    out = xv @ wv
    if b is not None:
        out = out + value_of(b)
    tracked = [v for v in (x, w, b) if isinstance(v, Var)]
    if not tracked:
        return out

    def backward(g):
        contribs = []
        if isinstance(x, Var):
            contribs.append((x.id, g @ wv.T))
        if isinstance(w, Var):
            contribs.append((w.id, xv.reshape(-1, xv.shape[-1]).T
                             @ g.reshape(-1, g.shape[-1])))
        if isinstance(b, Var):
            contribs.append((b.id, g.reshape(-1, g.shape[-1]).sum(axis=0)))
        return contribs
    return tape.record("dense", out, backward)


def matmul_rows(tape, m, x):
    """out = m @ x for a constant matrix m (e.g. a representation matrix)."""
    xv = value_of(x)
    out = xv @ m.T
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, g @ m)]
    return tape.record("matmul_rows", out, backward)


def mean_pool(tape, x, pool_csr, unpool_csr):
    """Per-graph mean over node rows.  ``pool_csr`` holds 1/n_i weights;
    ``unpool_csr`` is its transpose, used by the adjoint."""
    xv = value_of(x)
    out = pool_csr @ xv
    if not isinstance(x, Var):
        return out

    def backward(g):
        return [(x.id, unpool_csr @ g)]
    return tape.record("mean_pool", out, backward)


def broadcast_rows(tape, x, idx):
    """out[n] = x[idx[n]] for graph-level rows broadcast back to nodes."""
    return gather_rows(tape, x, idx)


def mse_loss(tape, pred, target):
    pv = value_of(pred)
    diff = pv - target
    out = np.mean(diff * diff)
    if not isinstance(pred, Var):
        return out

    def backward(g):
        return [(pred.id, g * (2.0 / diff.size) * diff)]
    return tape.record("mse_loss", out, backward)


def mae_loss(tape, pred, target):
    pv = value_of(pred)
    diff = pv - target
    out = np.mean(np.abs(diff))
    if not isinstance(pred, Var):
        return out

    def backward(g):
        return [(pred.id, g * np.sign(diff) / diff.size)]
    return tape.record("mae_loss", out, backward)
