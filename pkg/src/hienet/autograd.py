"""Reverse-mode automatic differentiation over dense float64 arrays.

Every forward primitive is recorded on a :class:`Tape`. Backward passes apply
vector-Jacobian rules that are themselves composed of tape primitives, so the
result of :func:`backward` is differentiable again (reverse-over-reverse).
That is what lets a force field defined as F = -dE/dP be trained with a loss
on F: the second differentiation w.r.t. weights runs over the same tape.

All values are float64. Index arrays and boolean masks are stored as constant
metadata, not as differentiable nodes. Reductions with data-dependent order
(scatter_add) accumulate in index-sorted order so results are reproducible.
"""

from contextlib import contextmanager

import numpy as np


class Node:
    __slots__ = ("op", "inputs", "value", "meta", "tag")

    def __init__(self, op, inputs, value, meta, tag):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.meta = meta
        self.tag = tag


class Tape:
    """Ordered record of primitive operations; single-writer."""

    def __init__(self):
        self.nodes = []
        self._tag = None

    def _record(self, op, inputs, value, meta=()):
        self.nodes.append(Node(op, inputs, value, meta, self._tag))
        return DiffTensor(self, len(self.nodes) - 1)

    def leaf(self, value):
        """Register an independent variable."""
        return self._record("leaf", (), np.asarray(value, dtype=np.float64))

    # constants are leaves too; gradients w.r.t. them are simply never requested
    constant = leaf

    @contextmanager
    def scope(self, tag):
        """Tag nodes created inside the block (used for op introspection)."""
        prev = self._tag
        self._tag = tag
        try:
            yield
        finally:
            self._tag = prev

    def op_counts(self, by="op"):
        counts = {}
        for n in self.nodes:
            key = n.op if by == "op" else n.tag
            counts[key] = counts.get(key, 0) + 1
        return counts

    def replay(self):
        """Re-execute all recorded operations; True iff values match bit-exactly."""
        values = []
        for n in self.nodes:
            if n.op == "leaf":
                values.append(n.value)
            else:
                values.append(_FORWARD[n.op]([values[i] for i in n.inputs], n.meta))
        for n, v in zip(self.nodes, values):
            if n.value.shape != v.shape or not np.array_equal(n.value, v):
                return False
        return True


class DiffTensor:
    """A value on a tape, identified by node index."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.tape.nodes[self.idx].value.shape

    @property
    def ndim(self):
        return self.tape.nodes[self.idx].value.ndim

    def _wrap(self, other):
        if isinstance(other, DiffTensor):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return _binary("add", self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, self._wrap(other))

    def __rsub__(self, other):
        return _binary("sub", self._wrap(other), self)

    def __mul__(self, other):
        return _binary("mul", self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, self._wrap(other))

    def __rtruediv__(self, other):
        return _binary("div", self._wrap(other), self)

    def __neg__(self):
        return self.tape._record("neg", (self.idx,), -self.value)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, self._wrap(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def __repr__(self):
        return f"DiffTensor(idx={self.idx}, shape={self.shape})"


def _shape_error(op, *shapes):
    return ValueError(f"{op}: incompatible shapes {' '.join(str(s) for s in shapes)}")


def _binary(op, a, b):
    fn = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}[op]
    try:
        value = fn(a.value, b.value)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None
    return a.tape._record(op, (a.idx, b.idx), value)


# ---------------------------------------------------------------------------
# primitives


def power(a, p):
    p = float(p)
    return a.tape._record("power", (a.idx,), a.value ** p, (p,))


def sqrt(a):
    return a.tape._record("sqrt", (a.idx,), np.sqrt(a.value))


def exp(a):
    return a.tape._record("exp", (a.idx,), np.exp(a.value))


def sin(a):
    return a.tape._record("sin", (a.idx,), np.sin(a.value))


def cos(a):
    return a.tape._record("cos", (a.idx,), np.cos(a.value))


def _sigmoid_value(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(a):
    return a.tape._record("sigmoid", (a.idx,), _sigmoid_value(a.value))


def silu(a):
    return a.tape._record("silu", (a.idx,), a.value * _sigmoid_value(a.value))


def absval(a):
    return a.tape._record("abs", (a.idx,), np.abs(a.value))


def where(mask, a, b):
    """Select elementwise by a constant boolean mask (not differentiable in mask)."""
    a, b = _coerce_pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    try:
        value = np.where(mask, a.value, b.value)
    except ValueError:
        raise _shape_error("where", mask.shape, a.shape, b.shape) from None
    return a.tape._record("where", (a.idx, b.idx), value, (mask,))


def _coerce_pair(a, b):
    if isinstance(a, DiffTensor):
        return a, a._wrap(b)
    if isinstance(b, DiffTensor):
        return b._wrap(a), b
    raise TypeError("where needs at least one DiffTensor branch")


def matmul(a, b):
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return a.tape._record("matmul", (a.idx, b.idx), a.value @ b.value)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    return a.tape._record("transpose", (a.idx,), np.ascontiguousarray(
        np.transpose(a.value, axes)), (axes,))


def reshape(a, shape):
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None
    return a.tape._record("reshape", (a.idx,), value, (shape,))


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise _shape_error("broadcast", a.shape, shape) from None
    return a.tape._record("broadcast", (a.idx,), value, (shape,))


def concat(parts, axis=0):
    parts = list(parts)
    tape = parts[0].tape
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = tuple(p.shape[axis] for p in parts)
    return tape._record("concat", tuple(p.idx for p in parts), value, (axis, sizes))


def slice_(a, key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice):
            raise ValueError("slice: only slice objects supported (no integer indexing)")
    return a.tape._record("slice", (a.idx,), a.value[key].copy(), (key, a.shape))


def _unslice(g, shape, key):
    return g.tape._record("unslice", (g.idx,), _unslice_value(g.value, shape, key), (key, shape))


def _unslice_value(gv, shape, key):
    out = np.zeros(shape, dtype=np.float64)
    out[key] = gv
    return out


def sum_all(a):
    return a.tape._record("sum_all", (a.idx,), np.asarray(np.sum(a.value)), (a.shape,))


def sum_axis(a, axis, keepdims=False):
    value = np.sum(a.value, axis=axis, keepdims=keepdims)
    return a.tape._record("sum_axis", (a.idx,), value, (axis, keepdims, a.shape))


def mean_axis(a, axis, keepdims=False):
    value = np.mean(a.value, axis=axis, keepdims=keepdims)
    return a.tape._record("mean_axis", (a.idx,), value, (axis, keepdims, a.shape))


def gather(a, index):
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ValueError(f"gather: index out of bounds for axis of size {a.shape[0]}")
    return a.tape._record("gather", (a.idx,), a.value[index], (index, a.shape[0]))


def scatter_add(values, index, size):
    """Accumulate rows of `values` into `size` bins given by `index`.

    Accumulation runs in sorted-by-index order so the result is a canonical,
    reproducible sum regardless of the order edges were listed in.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.shape != values.shape[:1]:
        raise _shape_error("scatter_add", values.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ValueError(f"scatter_add: index out of bounds for size {size}")
    return values.tape._record(
        "scatter_add", (values.idx,), _scatter_value(values.value, index, size), (index, size)
    )


def _scatter_value(v, index, size):
    out = np.zeros((size,) + v.shape[1:], dtype=np.float64)
    if index.size:
        if v.ndim == 1:
            out += np.bincount(index, weights=v, minlength=size)
            return out
        perm = np.argsort(index, kind="stable")
        sorted_idx = index[perm]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        sums = np.add.reduceat(v[perm], starts, axis=0)
        out[sorted_idx[starts]] = sums
    return out


def tp_fwd(a, b, coeffs):
    """Pairwise coupling contraction: out[e,c,k] = sum_mn a[e,c,m] b[e,n] C[m,n,k]."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 2 or a.shape[0] != b.shape[0] \
            or a.shape[2] != coeffs.shape[0] or b.shape[1] != coeffs.shape[1]:
        raise _shape_error("tp_fwd", a.shape, b.shape, coeffs.shape)
    return a.tape._record("tp_fwd", (a.idx, b.idx), _tp_fwd_value(a.value, b.value, coeffs),
                          (coeffs,))


def _tp_fwd_value(a, b, coeffs):
    m_dim, n_dim, k_dim = coeffs.shape
    mixed = b @ coeffs.transpose(1, 0, 2).reshape(n_dim, m_dim * k_dim)
    return np.matmul(a, mixed.reshape(-1, m_dim, k_dim))


def tp_edge(x, y, coeffs):
    """Adjoint-side coupling contraction: out[e,n] = sum_ckm x[e,c,k] y[e,c,m] C[m,n,k]."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if x.ndim != 3 or y.ndim != 3 or x.shape[:2] != y.shape[:2] \
            or y.shape[2] != coeffs.shape[0] or x.shape[2] != coeffs.shape[2]:
        raise _shape_error("tp_edge", x.shape, y.shape, coeffs.shape)
    return x.tape._record("tp_edge", (x.idx, y.idx), _tp_edge_value(x.value, y.value, coeffs),
                          (coeffs,))


def _tp_edge_value(x, y, coeffs):
    m_dim, n_dim, k_dim = coeffs.shape
    pair = np.matmul(y.transpose(0, 2, 1), x)  # (e, m, k)
    return pair.reshape(pair.shape[0], m_dim * k_dim) @ \
        coeffs.transpose(0, 2, 1).reshape(m_dim * k_dim, n_dim)


def chan_mix(x, w):
    """Per-component channel mixing: out[n,o,k] = sum_m x[n,m,k] w[m,o]."""
    if x.ndim != 3 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("chan_mix", x.shape, w.shape)
    return x.tape._record("chan_mix", (x.idx, w.idx), _chan_mix_value(x.value, w.value))


def _chan_mix_value(x, w):
    return np.matmul(x.transpose(0, 2, 1), w).transpose(0, 2, 1)


def chan_mix_w(x, y):
    """Weight-side adjoint of chan_mix: out[m,o] = sum_nk x[n,m,k] y[n,o,k]."""
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
        raise _shape_error("chan_mix_w", x.shape, y.shape)
    return x.tape._record("chan_mix_w", (x.idx, y.idx), _chan_mix_w_value(x.value, y.value))


def _chan_mix_w_value(x, y):
    n, m, k = x.shape
    o = y.shape[1]
    xt = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(m, n * k)
    yt = np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(o, n * k)
    return xt @ yt.T


# ---------------------------------------------------------------------------
# forward executors (for tape replay)

_FORWARD = {
    "add": lambda v, m: np.add(v[0], v[1]),
    "sub": lambda v, m: np.subtract(v[0], v[1]),
    "mul": lambda v, m: np.multiply(v[0], v[1]),
    "div": lambda v, m: np.divide(v[0], v[1]),
    "neg": lambda v, m: -v[0],
    "power": lambda v, m: v[0] ** m[0],
    "sqrt": lambda v, m: np.sqrt(v[0]),
    "exp": lambda v, m: np.exp(v[0]),
    "sin": lambda v, m: np.sin(v[0]),
    "cos": lambda v, m: np.cos(v[0]),
    "sigmoid": lambda v, m: _sigmoid_value(v[0]),
    "silu": lambda v, m: v[0] * _sigmoid_value(v[0]),
    "abs": lambda v, m: np.abs(v[0]),
    "where": lambda v, m: np.where(m[0], v[0], v[1]),
    "matmul": lambda v, m: v[0] @ v[1],
    "transpose": lambda v, m: np.ascontiguousarray(np.transpose(v[0], m[0])),
    "reshape": lambda v, m: v[0].reshape(m[0]),
    "broadcast": lambda v, m: np.broadcast_to(v[0], m[0]).copy(),
    "concat": lambda v, m: np.concatenate(v, axis=m[0]),
    "slice": lambda v, m: v[0][m[0]].copy(),
    "unslice": lambda v, m: _unslice_value(v[0], m[1], m[0]),
    "sum_all": lambda v, m: np.asarray(np.sum(v[0])),
    "sum_axis": lambda v, m: np.sum(v[0], axis=m[0], keepdims=m[1]),
    "mean_axis": lambda v, m: np.mean(v[0], axis=m[0], keepdims=m[1]),
    "gather": lambda v, m: v[0][m[0]],
    "scatter_add": lambda v, m: _scatter_value(v[0], m[0], m[1]),
    "tp_fwd": lambda v, m: _tp_fwd_value(v[0], v[1], m[0]),
    "tp_edge": lambda v, m: _tp_edge_value(v[0], v[1], m[0]),
    "chan_mix": lambda v, m: _chan_mix_value(v[0], v[1]),
    "chan_mix_w": lambda v, m: _chan_mix_w_value(v[0], v[1]),
}


# ---------------------------------------------------------------------------
# adjoint rules — each rule builds new tape primitives, so gradients are
# themselves differentiable. `need[i]` says whether input i actually requires
# a partial (False when nothing upstream of it is being differentiated).


def _reduce_like(g, shape):
    """Sum g down to `shape` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    for _ in range(extra):
        g = sum_axis(g, 0, keepdims=False)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = sum_axis(g, i, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def _vjp_add(ins, out, g, meta, need):
    return (
        _reduce_like(g, ins[0].shape) if need[0] else None,
        _reduce_like(g, ins[1].shape) if need[1] else None,
    )


def _vjp_sub(ins, out, g, meta, need):
    return (
        _reduce_like(g, ins[0].shape) if need[0] else None,
        _reduce_like(-g, ins[1].shape) if need[1] else None,
    )


def _vjp_mul(ins, out, g, meta, need):
    a, b = ins
    return (
        _reduce_like(g * b, a.shape) if need[0] else None,
        _reduce_like(g * a, b.shape) if need[1] else None,
    )


def _vjp_div(ins, out, g, meta, need):
    a, b = ins
    return (
        _reduce_like(g / b, a.shape) if need[0] else None,
        _reduce_like(-(g * out) / b, b.shape) if need[1] else None,
    )


def _vjp_matmul(ins, out, g, meta, need):
    a, b = ins
    da = db = None
    if need[0]:
        da = matmul(g, transpose(b))
    if need[1]:
        k, m = b.shape
        db = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, m)))
    return (da, db)


def _inv_axes(axes):
    inv = [0] * len(axes)
    for i, ax in enumerate(axes):
        inv[ax] = i
    return tuple(inv)


def _vjp_silu(ins, out, g, meta, need):
    x = ins[0]
    s = sigmoid(x)
    return (g * (s * (1.0 + x * (1.0 - s))),)


def _vjp_where(ins, out, g, meta, need):
    mask = meta[0]
    return (
        _reduce_like(g * mask.astype(np.float64), ins[0].shape) if need[0] else None,
        _reduce_like(g * (~mask).astype(np.float64), ins[1].shape) if need[1] else None,
    )


def _vjp_concat(ins, out, g, meta, need):
    axis, sizes = meta
    grads = []
    start = 0
    full = [slice(None)] * g.ndim
    for size, needed in zip(sizes, need):
        if needed:
            key = list(full)
            key[axis] = slice(start, start + size)
            grads.append(slice_(g, tuple(key)))
        else:
            grads.append(None)
        start += size
    return tuple(grads)


def _vjp_sum_axis(g, meta):
    axis, keepdims, in_shape = meta
    if not keepdims:
        kept = list(in_shape)
        for ax in (axis if isinstance(axis, tuple) else (axis,)):
            kept[ax] = 1
        g = reshape(g, tuple(kept))
    return (broadcast_to(g, in_shape),)


def _vjp_mean_axis(g, meta):
    axis, keepdims, in_shape = meta
    n = 1
    for ax in (axis if isinstance(axis, tuple) else (axis,)):
        n *= in_shape[ax]
    (gb,) = _vjp_sum_axis(g, meta)
    return (gb * (1.0 / n),)


def _vjp_tp_fwd(ins, out, g, meta, need):
    coeffs = meta[0]
    return (
        tp_fwd(g, ins[1], coeffs.transpose(2, 1, 0)) if need[0] else None,
        tp_edge(g, ins[0], coeffs) if need[1] else None,
    )


def _vjp_tp_edge(ins, out, g, meta, need):
    coeffs = meta[0]
    return (
        tp_fwd(ins[1], g, coeffs) if need[0] else None,
        tp_fwd(ins[0], g, coeffs.transpose(2, 1, 0)) if need[1] else None,
    )


def _vjp_chan_mix(ins, out, g, meta, need):
    return (
        chan_mix(g, transpose(ins[1])) if need[0] else None,
        chan_mix_w(ins[0], g) if need[1] else None,
    )


def _vjp_chan_mix_w(ins, out, g, meta, need):
    return (
        chan_mix(ins[1], transpose(g)) if need[0] else None,
        chan_mix(ins[0], g) if need[1] else None,
    )


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda ins, out, g, meta, need: (-g,),
    "power": lambda ins, out, g, meta, need: (g * (meta[0] * power(ins[0], meta[0] - 1.0)),),
    "sqrt": lambda ins, out, g, meta, need: (g * 0.5 / out,),
    "exp": lambda ins, out, g, meta, need: (g * out,),
    "sin": lambda ins, out, g, meta, need: (g * cos(ins[0]),),
    "cos": lambda ins, out, g, meta, need: (-(g * sin(ins[0])),),
    "sigmoid": lambda ins, out, g, meta, need: (g * (out * (1.0 - out)),),
    "silu": _vjp_silu,
    "abs": lambda ins, out, g, meta, need: (g * np.sign(ins[0].value),),
    "where": _vjp_where,
    "matmul": _vjp_matmul,
    "transpose": lambda ins, out, g, meta, need: (transpose(g, _inv_axes(meta[0])),),
    "reshape": lambda ins, out, g, meta, need: (reshape(g, ins[0].shape),),
    "broadcast": lambda ins, out, g, meta, need: (_reduce_like(g, ins[0].shape),),
    "concat": _vjp_concat,
    "slice": lambda ins, out, g, meta, need: (_unslice(g, meta[1], meta[0]),),
    "unslice": lambda ins, out, g, meta, need: (slice_(g, meta[0]),),
    "sum_all": lambda ins, out, g, meta, need: (broadcast_to(g, meta[0]),),
    "sum_axis": lambda ins, out, g, meta, need: _vjp_sum_axis(g, meta),
    "mean_axis": lambda ins, out, g, meta, need: _vjp_mean_axis(g, meta),
    "gather": lambda ins, out, g, meta, need: (scatter_add(g, meta[0], meta[1]),),
    "scatter_add": lambda ins, out, g, meta, need: (gather(g, meta[0]),),
    "tp_fwd": _vjp_tp_fwd,
    "tp_edge": _vjp_tp_edge,
    "chan_mix": _vjp_chan_mix,
    "chan_mix_w": _vjp_chan_mix_w,
}


def backward(output, wrt):
    """Gradients of a scalar `output` w.r.t. each tensor in `wrt`.

    The returned gradients are DiffTensors recorded on the same tape, so they
    can enter further computations and be differentiated again.
    """
    if output.shape != ():
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    tape = output.tape
    nodes = tape.nodes

    # nodes that transitively depend on some wrt leaf
    wrt_ids = {w.idx for w in wrt}
    first = min(wrt_ids) if wrt_ids else 0
    depends = set(wrt_ids)
    for i in range(first, output.idx + 1):
        for j in nodes[i].inputs:
            if j in depends:
                depends.add(i)
                break

    reachable = {output.idx}
    order = []
    for i in range(output.idx, -1, -1):
        if i in reachable:
            order.append(i)
            reachable.update(nodes[i].inputs)

    grads = {output.idx: tape.constant(1.0)}
    for i in order:
        node = nodes[i]
        if node.op == "leaf" or i not in depends:
            continue
        g = grads.get(i)
        if g is None:
            continue
        need = [j in depends for j in node.inputs]
        if not any(need):
            continue
        ins = [DiffTensor(tape, j) for j in node.inputs]
        partials = _VJP[node.op](ins, DiffTensor(tape, i), g, node.meta, need)
        for j, p in zip(node.inputs, partials):
            if p is None:
                continue
            if j in grads:
                grads[j] = grads[j] + p
            else:
                grads[j] = p

    out = []
    for w in wrt:
        g = grads.get(w.idx)
        out.append(g if g is not None else tape.constant(np.zeros(w.shape)))
    return out
