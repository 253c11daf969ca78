"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation eagerly: values are computed the
moment an op is built, and the ordered record list supports exact replay
with fresh leaf values (`Tape.forward`) as well as reverse-mode gradients
of a scalar output (`Tape.backward`).  The op vocabulary is intentionally
small; recurrent sequences run through a fused kernel (compiled extension
when available, numpy fallback otherwise).
"""
from __future__ import annotations

import numpy as np

from . import _kernels

EPS = 1e-7  # clamp inside logs of the soft binary cross entropy


class AutodiffError(Exception):
    """Base class for tape construction and execution failures."""


class ShapeMismatch(AutodiffError):
    def __init__(self, op_id, message):
        super().__init__(f"op {op_id}: {message}")
        self.op_id = op_id


class NonFiniteValue(AutodiffError):
    def __init__(self, op_id, message="non-finite value produced"):
        super().__init__(f"op {op_id}: {message}")
        self.op_id = op_id


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    # exp overflow saturates to the correct limit (sigmoid -> 0)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


class Rec:
    __slots__ = ("kind", "inputs", "out", "aux")

    def __init__(self, kind, inputs, out, aux):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.aux = aux


class Var:
    """Handle to one node (leaf or op output) on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape, vid):
        self.tape = tape
        self.id = vid

    @property
    def value(self):
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.tape.values[self.id].shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    # -- arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape._op("add", (self, other))
        return self.tape._op("adds", (self,), scalar=float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape._op("mul", (self, other))
        return self.tape._op("muls", (self,), scalar=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Var) else -float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __matmul__(self, other):
        return self.tape._op("matmul", (self, other))

    def sigmoid(self):
        return self.tape._op("sigmoid", (self,))

    def tanh(self):
        return self.tape._op("tanh", (self,))

    def relu(self):
        return self.tape._op("relu", (self,))

    def softmax(self, axis=-1):
        return self.tape._op("softmax", (self,), axis=axis)

    def amax(self, axis):
        return self.tape._op("amax", (self,), axis=axis)

    def mean(self, axis=None):
        return self.tape._op("mean", (self,), axis=axis)

    def sum(self, axis=None):
        return self.tape._op("sum", (self,), axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape._op("reshape", (self,), shape=tuple(shape))

    def broadcast_to(self, shape):
        zeros = self.tape.const(np.zeros(shape))
        return self + zeros


class Tape:
    """Ordered op records plus the values they produced.

    Single-writer: ops may only be appended from one thread.  Replaying
    `forward` against fresh leaf values reproduces every stored value.
    """

    def __init__(self, check_finite=True):
        self.records: list[Rec] = []
        self.values: dict[int, np.ndarray] = {}
        self.leaf_ids: dict[str, int] = {}
        self._const_ids: set[int] = set()
        self._outputs: dict[str, int] = {}
        self._gru_cache: dict[int, tuple] = {}
        self._next = 0
        self.check_finite = check_finite

    # -- node creation ----------------------------------------------------
    def _new_id(self):
        vid = self._next
        self._next += 1
        return vid

    def leaf(self, name, value):
        if name in self.leaf_ids:
            raise AutodiffError(f"duplicate leaf name {name!r}")
        vid = self._new_id()
        self.leaf_ids[name] = vid
        self.values[vid] = _as_f64(value)
        return Var(self, vid)

    def leaves_from(self, store):
        """Bind every entry of a ParamStore as a leaf; returns name->Var."""
        return {name: self.leaf(name, arr) for name, arr in store.items()}

    def const(self, value):
        vid = self._new_id()
        self.values[vid] = _as_f64(value)
        self._const_ids.add(vid)
        return Var(self, vid)

    def mark_output(self, name, var):
        self._outputs[name] = var.id

    # -- op construction (eager) -------------------------------------------
    def _op(self, kind, inputs, **aux):
        for v in inputs:
            if v.tape is not self:
                raise AutodiffError("inputs must live on the same tape")
        vid = self._new_id()
        rec = Rec(kind, tuple(v.id for v in inputs), vid, aux)
        self.records.append(rec)
        self._execute(rec)
        return Var(self, vid)

    def concat(self, vars_, axis=-1):
        return self._op("concat", tuple(vars_), axis=axis)

    def lookup(self, table, ids):
        ids = np.asarray(ids)
        if not np.issubdtype(ids.dtype, np.integer):
            raise AutodiffError("lookup ids must be integers")
        return self._op("lookup", (table,), ids=ids)

    def pick(self, var, ids):
        """out[...] = var[..., ids[...]] along the last axis."""
        return self._op("pick", (var,), ids=np.asarray(ids))

    def step_select(self, var, steps):
        """out[b] = var[b, steps[b], :] for a (B, T, H) input."""
        return self._op("step_select", (var,), steps=np.asarray(steps))

    def bce_soft(self, p, target):
        """Soft-target binary cross entropy, elementwise.

        Predictions are clamped into [EPS, 1-EPS] before the logs; targets
        must lie in [0, 1].
        """
        if isinstance(target, Var):
            return self._op("bce", (p, target))
        t = _as_f64(target)
        return self._op("bce", (p, self.const(t)))

    def gru(self, x, w, u, b):
        """Fused GRU over a (B, T, E) sequence; returns all hiddens (B, T, H)."""
        return self._op("gru", (x, w, u, b))

    # -- execution ----------------------------------------------------------
    def _execute(self, rec):
        vals = [self.values[i] for i in rec.inputs]
        out = _FORWARD[rec.kind](self, rec, vals)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteValue(rec.out)
        self.values[rec.out] = out

    def forward(self, leaves):
        """Replay all records against fresh leaf values.

        Every non-const leaf must be bound, with its original shape.
        Returns the marked outputs by name.
        """
        for name, vid in self.leaf_ids.items():
            if name not in leaves:
                raise AutodiffError(f"leaf {name!r} not bound")
            arr = _as_f64(leaves[name])
            if arr.shape != self.values[vid].shape:
                raise ShapeMismatch(vid, f"leaf {name!r} expects shape "
                                         f"{self.values[vid].shape}, got {arr.shape}")
            self.values[vid] = arr
        for rec in self.records:
            self._execute(rec)
        return {name: self.values[vid] for name, vid in self._outputs.items()}

    def backward(self, out):
        """Gradients of a scalar output with respect to every leaf."""
        out_id = out.id if isinstance(out, Var) else int(out)
        if self.values[out_id].size != 1:
            raise AutodiffError("backward target must be scalar")
        grads = {out_id: np.ones_like(self.values[out_id])}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            contribs = _BACKWARD[rec.kind](self, rec, g)
            for vid, gi in zip(rec.inputs, contribs):
                if gi is None or vid in self._const_ids:
                    continue
                if vid in grads:
                    grads[vid] = grads[vid] + gi
                else:
                    grads[vid] = gi
        result = {}
        for name, vid in self.leaf_ids.items():
            result[name] = grads.get(vid, np.zeros_like(self.values[vid]))
        return result


# ---------------------------------------------------------------------------
# op table


def _f_matmul(tape, rec, vals):
    a, b = vals
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(rec.out, "matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(rec.out, f"matmul {a.shape} x {b.shape}")
    return np.matmul(a, b)


def _b_matmul(tape, rec, g):
    a, b = (tape.values[i] for i in rec.inputs)
    # features @ weights with ND features is the hot path; flatten to one
    # gemm instead of batched gemms plus a reduction over broadcast dims
    if b.ndim == 2 and a.ndim >= 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def _f_add(tape, rec, vals):
    return vals[0] + vals[1]


def _b_add(tape, rec, g):
    a, b = (tape.values[i] for i in rec.inputs)
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _f_adds(tape, rec, vals):
    return vals[0] + rec.aux["scalar"]


def _b_adds(tape, rec, g):
    return (g,)


def _f_mul(tape, rec, vals):
    return vals[0] * vals[1]


def _b_mul(tape, rec, g):
    a, b = (tape.values[i] for i in rec.inputs)
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _f_muls(tape, rec, vals):
    return vals[0] * rec.aux["scalar"]


def _b_muls(tape, rec, g):
    return (g * rec.aux["scalar"],)


def _f_concat(tape, rec, vals):
    axis = rec.aux["axis"]
    rec.aux["sizes"] = [v.shape[axis] for v in vals]
    return np.concatenate(vals, axis=axis)


def _b_concat(tape, rec, g):
    axis = rec.aux["axis"]
    splits = np.cumsum(rec.aux["sizes"][:-1])
    return tuple(np.split(g, splits, axis=axis))


def _f_sigmoid(tape, rec, vals):
    return _sigmoid(vals[0])


def _b_sigmoid(tape, rec, g):
    y = tape.values[rec.out]
    return (g * y * (1.0 - y),)


def _f_tanh(tape, rec, vals):
    return np.tanh(vals[0])


def _b_tanh(tape, rec, g):
    y = tape.values[rec.out]
    return (g * (1.0 - y * y),)


def _f_relu(tape, rec, vals):
    return np.maximum(vals[0], 0.0)


def _b_relu(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    return (g * (x > 0.0),)


def _f_softmax(tape, rec, vals):
    x = vals[0]
    axis = rec.aux["axis"]
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _b_softmax(tape, rec, g):
    y = tape.values[rec.out]
    axis = rec.aux["axis"]
    dot = (g * y).sum(axis=axis, keepdims=True)
    return ((g - dot) * y,)


def _f_amax(tape, rec, vals):
    return np.max(vals[0], axis=rec.aux["axis"])


def _b_amax(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    axis = rec.aux["axis"]
    idx = np.argmax(x, axis=axis)  # first max wins ties
    gx = np.zeros_like(x)
    gexp = np.expand_dims(g, axis)
    np.put_along_axis(gx, np.expand_dims(idx, axis), gexp, axis)
    return (gx,)


def _f_mean(tape, rec, vals):
    return np.mean(vals[0], axis=rec.aux["axis"])


def _b_mean(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    axis = rec.aux["axis"]
    if axis is None:
        return (np.full_like(x, g / x.size),)
    n = x.shape[axis]
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)


def _f_sum(tape, rec, vals):
    return np.sum(vals[0], axis=rec.aux["axis"])


def _b_sum(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    axis = rec.aux["axis"]
    if axis is None:
        return (np.full_like(x, g),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _f_lookup(tape, rec, vals):
    table = vals[0]
    return table[rec.aux["ids"]]


def _b_lookup(tape, rec, g):
    table = tape.values[rec.inputs[0]]
    gt = np.zeros_like(table)
    ids = rec.aux["ids"]
    np.add.at(gt, ids.ravel(), g.reshape((ids.size,) + table.shape[1:]))
    return (gt,)


def _f_pick(tape, rec, vals):
    x = vals[0]
    ids = rec.aux["ids"]
    if ids.shape != x.shape[:-1]:
        raise ShapeMismatch(rec.out, f"pick ids shape {ids.shape} vs {x.shape}")
    return np.take_along_axis(x, ids[..., None], axis=-1)[..., 0]


def _b_pick(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    ids = rec.aux["ids"]
    gx = np.zeros_like(x)
    flat = gx.reshape(-1, x.shape[-1])
    rows = np.arange(flat.shape[0])
    np.add.at(flat, (rows, ids.ravel()), g.ravel())
    return (gx,)


def _f_step_select(tape, rec, vals):
    x = vals[0]
    steps = rec.aux["steps"]
    if x.ndim != 3 or steps.shape != (x.shape[0],):
        raise ShapeMismatch(rec.out, "step_select expects (B,T,H) and (B,) steps")
    return x[np.arange(x.shape[0]), steps]


def _b_step_select(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    steps = rec.aux["steps"]
    gx = np.zeros_like(x)
    np.add.at(gx, (np.arange(x.shape[0]), steps), g)
    return (gx,)


def _f_reshape(tape, rec, vals):
    return vals[0].reshape(rec.aux["shape"])


def _b_reshape(tape, rec, g):
    x = tape.values[rec.inputs[0]]
    return (g.reshape(x.shape),)


def _f_bce(tape, rec, vals):
    p, t = vals
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise AutodiffError(f"op {rec.out}: bce target outside [0, 1]")
    pc = np.clip(p, EPS, 1.0 - EPS)
    return -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))


def _b_bce(tape, rec, g):
    p, t = (tape.values[i] for i in rec.inputs)
    pc = np.clip(p, EPS, 1.0 - EPS)
    inside = (p > EPS) & (p < 1.0 - EPS)
    gp = g * inside * (-t / pc + (1.0 - t) / (1.0 - pc))
    gt = g * (np.log(1.0 - pc) - np.log(pc))
    gp = _unbroadcast(gp, p.shape)
    gt = _unbroadcast(gt, t.shape)
    return gp, gt


def _f_gru(tape, rec, vals):
    x, w, u, b = vals
    if x.ndim != 3:
        raise ShapeMismatch(rec.out, "gru input must be (B, T, E)")
    h = w.shape[1] // 3
    if w.shape != (x.shape[2], 3 * h) or u.shape != (h, 3 * h) or b.shape != (3 * h,):
        raise ShapeMismatch(rec.out, "gru weight shapes inconsistent")
    hs, cache = _kernels.gru_forward(x, w, u, b)
    tape._gru_cache[rec.out] = cache
    return hs


def _b_gru(tape, rec, g):
    x, w, u, b = (tape.values[i] for i in rec.inputs)
    cache = tape._gru_cache[rec.out]
    gx, gw, gu, gb = _kernels.gru_backward(x, w, u, b, cache, np.ascontiguousarray(g))
    return gx, gw, gu, gb


_FORWARD = {
    "matmul": _f_matmul, "add": _f_add, "adds": _f_adds, "mul": _f_mul,
    "muls": _f_muls, "concat": _f_concat, "sigmoid": _f_sigmoid,
    "tanh": _f_tanh, "relu": _f_relu, "softmax": _f_softmax, "amax": _f_amax,
    "mean": _f_mean, "sum": _f_sum, "lookup": _f_lookup, "pick": _f_pick,
    "step_select": _f_step_select, "reshape": _f_reshape, "bce": _f_bce,
    "gru": _f_gru,
}

_BACKWARD = {
    "matmul": _b_matmul, "add": _b_add, "adds": _b_adds, "mul": _b_mul,
    "muls": _b_muls, "concat": _b_concat, "sigmoid": _b_sigmoid,
    "tanh": _b_tanh, "relu": _b_relu, "softmax": _b_softmax, "amax": _b_amax,
    "mean": _b_mean, "sum": _b_sum, "lookup": _b_lookup, "pick": _b_pick,
    "step_select": _b_step_select, "reshape": _b_reshape, "bce": _b_bce,
    "gru": _b_gru,
}

OP_KINDS = tuple(_FORWARD)


def grad_check(build, point, step=1e-5):
    """Max relative error between tape gradients and central differences.

    `build(tape, leaves)` must construct a scalar output from the leaves
    bound from the ParamStore `point`.  Returns
    max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|),
    or 0.0 when the point holds no parameters.
    """
    tape = Tape()
    leaves = tape.leaves_from(point)
    out = build(tape, leaves)
    tape.mark_output("__scalar__", out)
    if tape.values[out.id].size != 1:
        raise AutodiffError("grad_check target must be scalar")
    analytic = tape.backward(out)

    base = {name: np.array(arr, dtype=np.float64) for name, arr in point.items()}
    if not base:
        return 0.0

    def eval_at(vals):
        res = tape.forward(vals)["__scalar__"]
        if not np.all(np.isfinite(res)):
            raise NonFiniteValue(out.id, "function not finite at perturbation")
        return float(res.reshape(()))

    worst = 0.0
    for name, arr in base.items():
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = eval_at(base)
            flat[i] = orig - step
            fm = eval_at(base)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            ana = float(analytic[name].ravel()[i])
            err = abs(ana - numeric) / max(1e-8, abs(ana) + abs(numeric))
            if err > worst:
                worst = err
    tape.forward(base)  # restore unperturbed values
    return worst
