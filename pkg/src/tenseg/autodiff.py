"""Reverse-mode automatic differentiation on a flat, append-only tape.

Node values are python floats or 1-D numpy arrays.  An array value is a
batch of independent scalars: every recorded operation is elementwise
over the batch, so the exact same graph serves a single transition and a
mini-batch of transitions.  Gradients of a scalar parameter leaf that was
broadcast against a batch are summed over the batch on read-out (or left
per-element with ``reduce=False``).

Plain floats / arrays that are not wrapped in :class:`DualScalar` act as
constants; all arithmetic helpers in this module dispatch on type, so the
same simulation code runs taped (training), as raw numpy (batched
rollouts) or on bare floats.
"""

import math

import numpy as np

from .errors import NumericalFault, UsageError

__all__ = [
    "Tape", "DualScalar", "Gradients", "value_of", "sqrt", "exp", "log",
    "tanh", "sigmoid", "where", "maximum", "minimum", "absolute", "clip",
    "dot3", "cross3", "norm", "squash",
]


def _finite(v):
    if isinstance(v, np.ndarray):
        return bool(np.isfinite(v).all())
    return math.isfinite(v)


def value_of(x):
    """Raw float/array behind ``x`` (identity for non-dual values)."""
    return x.value if isinstance(x, DualScalar) else x


class DualScalar:
    """A scalar tracked on a tape; supports ordinary arithmetic."""

    __slots__ = ("value", "tape", "idx")

    # make numpy defer to the reflected operators instead of trying to
    # broadcast elementwise over this object
    __array_ufunc__ = None

    def __init__(self, value, tape, idx):
        self.value = value
        self.tape = tape
        self.idx = idx

    def __repr__(self):
        return f"DualScalar({self.value!r}, node={self.idx})"

    # arithmetic -------------------------------------------------------
    def __add__(self, o):
        if isinstance(o, DualScalar):
            t = self._join(o)
            return t._rec("add", self.value + o.value,
                          (self.idx, o.idx), (1.0, 1.0))
        return self.tape._rec("add", self.value + o, (self.idx,), (1.0,))

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, DualScalar):
            t = self._join(o)
            return t._rec("sub", self.value - o.value,
                          (self.idx, o.idx), (1.0, -1.0))
        return self.tape._rec("sub", self.value - o, (self.idx,), (1.0,))

    def __rsub__(self, o):
        return self.tape._rec("rsub", o - self.value, (self.idx,), (-1.0,))

    def __mul__(self, o):
        if isinstance(o, DualScalar):
            t = self._join(o)
            return t._rec("mul", self.value * o.value,
                          (self.idx, o.idx), (o.value, self.value))
        return self.tape._rec("mul", self.value * o, (self.idx,), (o,))

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, DualScalar):
            t = self._join(o)
            inv = 1.0 / o.value
            v = self.value * inv
            return t._rec("div", v, (self.idx, o.idx), (inv, -v * inv))
        inv = 1.0 / o
        return self.tape._rec("div", self.value * inv, (self.idx,), (inv,))

    def __rtruediv__(self, o):
        inv = 1.0 / self.value
        v = o * inv
        return self.tape._rec("rdiv", v, (self.idx,), (-v * inv,))

    def __neg__(self):
        return self.tape._rec("neg", -self.value, (self.idx,), (-1.0,))

    def __pow__(self, p):
        v = self.value ** p
        return self.tape._rec("pow", v, (self.idx,),
                              (p * self.value ** (p - 1),))

    # comparisons read raw values and are never recorded ---------------
    def __lt__(self, o):
        return self.value < value_of(o)

    def __le__(self, o):
        return self.value <= value_of(o)

    def __gt__(self, o):
        return self.value > value_of(o)

    def __ge__(self, o):
        return self.value >= value_of(o)

    def _join(self, o):
        if o.tape is not self.tape:
            raise UsageError("operands live on different tapes")
        return self.tape


class Gradients:
    """Result of a backward pass; maps tape nodes to adjoints."""

    def __init__(self, adjoints):
        self._adj = adjoints

    def wrt(self, x, reduce=True):
        """Gradient of the backward root w.r.t. ``x``.

        A scalar leaf broadcast against a batch accumulates an array
        adjoint; with ``reduce`` the batch contributions are summed.
        Unreachable nodes get 0.
        """
        if not isinstance(x, DualScalar):
            raise UsageError("gradients only exist for tape scalars")
        if x.idx >= len(self._adj):
            return 0.0          # recorded after the root: unreachable
        g = self._adj[x.idx]
        if reduce and isinstance(g, np.ndarray) \
                and not isinstance(x.value, np.ndarray):
            return float(g.sum())
        return g


class Tape:
    """Append-only record of operations, topologically ordered."""

    def __init__(self, validate=True):
        self.validate = validate
        self._kinds = []
        self._parents = []
        self._partials = []
        self._custom = {}

    def __len__(self):
        return len(self._parents)

    def input(self, value):
        """Create a leaf (typically a learnable parameter)."""
        if self.validate and not _finite(value):
            raise NumericalFault("non-finite leaf value")
        return self._rec("leaf", value, (), ())

    def _rec(self, kind, value, parents, partials):
        if self.validate:
            if not _finite(value):
                raise NumericalFault(f"non-finite value in op '{kind}'")
            for d in partials:
                if not _finite(d):
                    raise NumericalFault(f"non-finite partial in op '{kind}'")
        idx = len(self._parents)
        self._kinds.append(kind)
        self._parents.append(parents)
        self._partials.append(partials)
        return DualScalar(value, self, idx)

    def record(self, kind, inputs, value, partials):
        """Record one node explicitly (the low-level extension point)."""
        if len(inputs) != len(partials):
            raise UsageError("inputs and partials must pair up")
        for x in inputs:
            if not isinstance(x, DualScalar) or x.tape is not self:
                raise UsageError("record inputs must live on this tape")
        return self._rec(kind, value,
                         tuple(x.idx for x in inputs), tuple(partials))

    def custom(self, kind, value, backward_fn):
        """Record a node with a bespoke backward rule.

        ``backward_fn(g, adj)`` receives the node's adjoint and the
        adjoint list and is responsible for all accumulation (including
        into off-tape array parameters).
        """
        node = self._rec(kind, value, (), ())
        self._custom[node.idx] = backward_fn
        return node

    def backward(self, root, seed=1.0):
        """Adjoints of ``root`` w.r.t. every node; one visit per node."""
        if not isinstance(root, DualScalar) or root.tape is not self:
            raise UsageError("backward root is not on this tape")
        adj = [0.0] * (root.idx + 1)
        adj[root.idx] = seed
        parents = self._parents
        partials = self._partials
        custom = self._custom
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if type(g) is float and g == 0.0:
                continue
            fn = custom.get(i)
            if fn is not None:
                fn(g, adj)
                continue
            ps = parents[i]
            if not ps:
                continue
            for p, d in zip(ps, partials[i]):
                a = adj[p]
                if type(a) is float and a == 0.0:
                    adj[p] = g * d
                else:
                    adj[p] = a + g * d
        return Gradients(adj)


# ---------------------------------------------------------------------
# type-dispatching scalar functions
# ---------------------------------------------------------------------

def _unary(x, fn_np, fn_math, dfn, kind):
    if isinstance(x, DualScalar):
        try:
            v = fn_np(x.value) if isinstance(x.value, np.ndarray) \
                else fn_math(x.value)
        except ValueError as exc:
            raise NumericalFault(f"{kind} outside its domain "
                                 f"(value {x.value!r})") from exc
        return x.tape._rec(kind, v, (x.idx,), (dfn(x.value, v),))
    if isinstance(x, np.ndarray):
        return fn_np(x)
    return fn_math(x)


def sqrt(x):
    return _unary(x, np.sqrt, math.sqrt, lambda v, y: 0.5 / y, "sqrt")


def exp(x):
    return _unary(x, np.exp, math.exp, lambda v, y: y, "exp")


def log(x):
    return _unary(x, np.log, math.log, lambda v, y: 1.0 / v, "log")


def tanh(x):
    return _unary(x, np.tanh, math.tanh, lambda v, y: 1.0 - y * y, "tanh")


def _sig_np(v):
    return 1.0 / (1.0 + np.exp(-v))


def _sig_math(v):
    return 1.0 / (1.0 + math.exp(-v))


def sigmoid(x):
    return _unary(x, _sig_np, _sig_math, lambda v, y: y * (1.0 - y), "sigmoid")


def where(cond, a, b):
    """Branch select; ``cond`` is raw (bool or bool array), not a node.

    Differentiates through the locally active branch only; the condition
    itself carries no gradient.
    """
    ad = isinstance(a, DualScalar)
    bd = isinstance(b, DualScalar)
    if not ad and not bd:
        if isinstance(cond, np.ndarray) or isinstance(a, np.ndarray) \
                or isinstance(b, np.ndarray):
            return np.where(cond, a, b)
        return a if cond else b
    tape = a.tape if ad else b.tape
    if ad and bd and a.tape is not b.tape:
        raise UsageError("operands live on different tapes")
    av, bv = value_of(a), value_of(b)
    if isinstance(cond, np.ndarray):
        m = cond.astype(float)
        v = np.where(cond, av, bv)
    else:
        m = 1.0 if cond else 0.0
        v = av if cond else bv
    parents, partials = [], []
    if ad:
        parents.append(a.idx)
        partials.append(m)
    if bd:
        parents.append(b.idx)
        partials.append(1.0 - m)
    return tape._rec("where", v, tuple(parents), tuple(partials))


def maximum(a, b):
    return where(value_of(a) >= value_of(b), a, b)


def minimum(a, b):
    return where(value_of(a) <= value_of(b), a, b)


def absolute(x):
    return where(value_of(x) >= 0.0, x, -x)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


# ---------------------------------------------------------------------
# fused small-vector helpers (single tape nodes)
# ---------------------------------------------------------------------

def _fused(components, value, partials, kind):
    """Record one node from (component, partial) pairs, skipping
    constants.  Falls through to the raw value when nothing is taped."""
    tape = None
    parents, parts = [], []
    for c, d in zip(components, partials):
        if isinstance(c, DualScalar):
            tape = c.tape
            parents.append(c.idx)
            parts.append(d)
    if tape is None:
        return value
    return tape._rec(kind, value, tuple(parents), tuple(parts))


def dot3(a, b):
    """Dot product of two 3-component sequences as a single node."""
    ax, ay, az = (value_of(c) for c in a)
    bx, by, bz = (value_of(c) for c in b)
    v = ax * bx + ay * by + az * bz
    return _fused((a[0], a[1], a[2], b[0], b[1], b[2]),
                  v, (bx, by, bz, ax, ay, az), "dot3")


def cross3(a, b):
    """Cross product; each output component is a single fused node."""
    ax, ay, az = (value_of(c) for c in a)
    bx, by, bz = (value_of(c) for c in b)
    cx = _fused((a[1], b[2], a[2], b[1]),
                ay * bz - az * by, (bz, ay, -by, -az), "crossx")
    cy = _fused((a[2], b[0], a[0], b[2]),
                az * bx - ax * bz, (bx, az, -bz, -ax), "crossy")
    cz = _fused((a[0], b[1], a[1], b[0]),
                ax * by - ay * bx, (by, ax, -bx, -ay), "crossz")
    return cx, cy, cz


def norm(components, eps=0.0):
    """Euclidean norm of n components as a single node.

    ``eps`` is added under the square root to keep the derivative finite
    at the origin (used before normalizing near-zero vectors).
    """
    vals = [value_of(c) for c in components]
    s = eps
    for v in vals:
        s = s + v * v
    n = np.sqrt(s) if isinstance(s, np.ndarray) else math.sqrt(s)
    if not any(isinstance(c, DualScalar) for c in components):
        return n
    inv = 1.0 / n
    return _fused(tuple(components), n, tuple(v * inv for v in vals), "norm")


def affine(inputs, weights, bias, weight_grad=None, bias_grad=None,
           tape=None):
    """Dense layer y = W x + b over a sequence of scalar inputs.

    Each output is one fused tape node; the backward rule scatters into
    the scalar inputs and accumulates into ``weight_grad``/``bias_grad``
    (plain numpy arrays living off-tape).  With no taped inputs this is
    a raw numpy matmul, unless ``tape`` is given explicitly so the
    weight gradients still get recorded.
    """
    vals = [np.asarray(value_of(x), dtype=float) for x in inputs]
    shape = np.broadcast_shapes(*[v.shape for v in vals])
    if shape:
        vals = [np.broadcast_to(v, shape) for v in vals]
    x_mat = np.stack(vals, axis=-1)
    out = x_mat @ weights.T + bias

    duals = [(i, x.idx) for i, x in enumerate(inputs)
             if isinstance(x, DualScalar)]
    if not duals and (tape is None or weight_grad is None):
        if out.ndim == 1:
            return [float(out[j]) for j in range(out.shape[-1])]
        return [out[..., j] for j in range(out.shape[-1])]

    if tape is None:
        tape = next(x.tape for x in inputs if isinstance(x, DualScalar))

    def make_bw(j):
        def bw(g, adj):
            for col, idx in duals:
                contrib = g * weights[j, col]
                a = adj[idx]
                adj[idx] = contrib if (type(a) is float and a == 0.0) \
                    else a + contrib
            if weight_grad is None:
                return
            if x_mat.ndim == 2:
                gv = np.broadcast_to(np.asarray(g, dtype=float),
                                     x_mat.shape[:1])
                weight_grad[j] += gv @ x_mat
                bias_grad[j] += gv.sum()
            else:
                gs = float(np.sum(g)) if isinstance(g, np.ndarray) else g
                weight_grad[j] += gs * x_mat
                bias_grad[j] += gs
        return bw

    outs = []
    for j in range(weights.shape[0]):
        v = out[..., j]
        outs.append(tape.custom("affine", float(v) if v.ndim == 0 else v,
                                make_bw(j)))
    return outs


def squash(raw, bounds, kind="sigmoid"):
    """Map an unconstrained value strictly into an open interval.

    ``kind`` picks the activation: "sigmoid" or "tanh" (both affinely
    rescaled to ``bounds``).
    """
    lo, hi = bounds
    if not lo < hi:
        raise UsageError(f"bad squash range ({lo}, {hi})")
    if kind == "sigmoid":
        return lo + (hi - lo) * sigmoid(raw)
    if kind == "tanh":
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        return mid + half * tanh(raw)
    raise UsageError(f"unknown squash kind '{kind}'")
