"""Tape correctness: finite-difference oracles, batched semantics and
the fused dense layer."""

import math

import numpy as np
import pytest

from tenseg import autodiff as ad
from tenseg.errors import NumericalFault, UsageError


def fd_gradient(fn, xs, h=1e-7):
    """Central finite differences of fn: R^n -> R at xs."""
    xs = list(xs)
    out = []
    for i in range(len(xs)):
        hi = xs.copy()
        lo = xs.copy()
        hi[i] += h
        lo[i] -= h
        out.append((fn(hi) - fn(lo)) / (2.0 * h))
    return out


def taped_gradient(fn, xs):
    tape = ad.Tape()
    leaves = [tape.input(float(x)) for x in xs]
    y = fn(leaves)
    g = tape.backward(y)
    return [g.wrt(x) for x in leaves]


def check(fn, xs, tol=1e-6):
    got = taped_gradient(fn, xs)
    want = fd_gradient(fn, [float(x) for x in xs])
    for g, w in zip(got, want):
        assert abs(g - w) <= tol * max(1.0, abs(w))


def test_arithmetic_gradients():
    check(lambda x: x[0] * x[1] + x[2], [1.3, -0.7, 2.1])
    check(lambda x: (x[0] - x[1]) / x[2], [1.3, -0.7, 2.1])
    check(lambda x: 3.0 - x[0] + 2.0 / x[1], [1.3, -0.7])
    check(lambda x: (-x[0]) ** 3, [1.7])
    check(lambda x: 5.0 * x[0] * x[0], [0.4])


def test_unary_gradients():
    check(lambda x: ad.sqrt(x[0]) * ad.exp(x[1]), [2.0, 0.3])
    check(lambda x: ad.log(x[0]) + ad.tanh(x[1]), [1.5, -0.4])
    check(lambda x: ad.sigmoid(x[0] * x[1]), [0.8, -1.2])


def test_branch_gradients():
    # away from the kink the selected branch carries the gradient
    check(lambda x: ad.maximum(x[0], 2.0) + ad.minimum(x[1], -1.0),
          [3.0, -2.0])
    check(lambda x: ad.absolute(x[0]) * x[1], [-1.5, 0.7])
    check(lambda x: ad.clip(x[0], -1.0, 1.0), [0.3])
    check(lambda x: ad.clip(x[0], -1.0, 1.0), [2.0], tol=1e-9)  # flat


def test_fused_vector_gradients():
    check(lambda x: ad.dot3(x[0:3], x[3:6]),
          [0.3, -1.2, 0.8, 1.1, 0.4, -0.6])
    check(lambda x: ad.cross3(x[0:3], x[3:6])[1],
          [0.3, -1.2, 0.8, 1.1, 0.4, -0.6])
    check(lambda x: ad.norm(x[0:3]), [0.3, -1.2, 0.8])
    check(lambda x: ad.norm(x[0:3], eps=1e-12), [0.3, -1.2, 0.8])


def test_squash_ranges_and_gradient():
    for kind in ("sigmoid", "tanh"):
        for raw in (-15.0, -1.0, 0.0, 2.5, 15.0):
            v = ad.squash(raw, (-2.0, 5.0), kind)
            assert -2.0 < v < 5.0
        check(lambda x: ad.squash(x[0], (-2.0, 5.0), kind), [0.7])
    # raw 0 lands mid-range
    assert ad.squash(0.0, (10.0, 20.0), "sigmoid") == pytest.approx(15.0)
    assert ad.squash(0.0, (10.0, 20.0), "tanh") == pytest.approx(15.0)
    with pytest.raises(UsageError):
        ad.squash(0.0, (1.0, 1.0))
    with pytest.raises(UsageError):
        ad.squash(0.0, (0.0, 1.0), "softmax")


def test_batched_matches_scalar_runs():
    """One taped graph over a batch equals per-element scalar graphs."""
    rng = np.random.default_rng(0)
    xs = rng.normal(size=5)
    ys = rng.normal(size=5)

    def f(x, y):
        return ad.tanh(x * y) + ad.sqrt(ad.absolute(x)) - y / (x * x + 1.0)

    tape = ad.Tape()
    xb = tape.input(xs.copy())
    yb = tape.input(ys.copy())
    out = f(xb, yb)
    g = tape.backward(out, seed=np.ones(5))
    gx, gy = g.wrt(xb), g.wrt(yb)
    for i in range(5):
        t = ad.Tape()
        x = t.input(float(xs[i]))
        y = t.input(float(ys[i]))
        o = f(x, y)
        gi = t.backward(o)
        assert out.value[i] == pytest.approx(o.value, abs=1e-14)
        assert gx[i] == pytest.approx(gi.wrt(x), abs=1e-12)
        assert gy[i] == pytest.approx(gi.wrt(y), abs=1e-12)


def test_scalar_leaf_broadcast_reduces():
    """A scalar parameter used against a batch sums its adjoint."""
    tape = ad.Tape()
    k = tape.input(2.0)
    data = np.array([1.0, 2.0, 3.0])
    loss = k * data           # (3,) node
    g = tape.backward(loss, seed=np.full(3, 1.0))
    assert g.wrt(k) == pytest.approx(6.0)
    assert np.allclose(g.wrt(k, reduce=False), data)


def test_numpy_defers_to_dual():
    """ndarray (op) DualScalar must produce one node, not an object
    array of nodes."""
    tape = ad.Tape()
    k = tape.input(3.0)
    arr = np.array([1.0, 2.0])
    for out in (arr + k, k + arr, arr * k, k * arr):
        assert isinstance(out, ad.DualScalar)
        assert np.allclose(ad.value_of(out), [arr[0] * 0 + v for v in
                                              np.atleast_1d(ad.value_of(out))])


def test_where_condition_not_differentiated():
    tape = ad.Tape()
    x = tape.input(1.0)
    y = tape.input(2.0)
    out = ad.where(False, x, y)
    g = tape.backward(out)
    assert g.wrt(x) == 0.0 and g.wrt(y) == 1.0
    # array condition mixes branches elementwise
    tape = ad.Tape()
    xb = tape.input(np.array([1.0, 1.0]))
    yb = tape.input(np.array([2.0, 2.0]))
    out = ad.where(np.array([True, False]), xb, yb)
    g = tape.backward(out, seed=np.ones(2))
    assert np.allclose(g.wrt(xb), [1.0, 0.0])
    assert np.allclose(g.wrt(yb), [0.0, 1.0])


def test_tape_guards():
    t1, t2 = ad.Tape(), ad.Tape()
    a, b = t1.input(1.0), t2.input(2.0)
    with pytest.raises(UsageError):
        _ = a + b
    with pytest.raises(UsageError):
        t1.backward(b)
    with pytest.raises(NumericalFault):
        t1.input(float("nan"))
    with pytest.raises(NumericalFault):
        _ = ad.log(t1.input(0.0) * 0.0)    # -inf value
    with pytest.raises(UsageError):
        ad.Gradients([0.0]).wrt(1.0)


def test_affine_matches_fd():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 4))
    b = rng.normal(size=3)
    xs = rng.normal(size=4)

    def f(leaves):
        outs = ad.affine(leaves, W, b)
        return outs[0] * outs[1] + ad.tanh(outs[2])

    check(f, list(xs))


def test_affine_weight_gradients():
    """Weight/bias accumulation equals finite differences, batched."""
    rng = np.random.default_rng(2)
    W = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    X = rng.normal(size=(5, 3))     # batch of 5

    def loss_value(Wv, bv):
        out = X @ Wv.T + bv
        return float(np.sum(out[:, 0] * out[:, 1]))

    Wg = np.zeros_like(W)
    bg = np.zeros_like(b)
    tape = ad.Tape()
    cols = [tape.input(X[:, j].copy()) for j in range(3)]
    outs = ad.affine(cols, W, b, weight_grad=Wg, bias_grad=bg)
    loss = outs[0] * outs[1]
    tape.backward(loss, seed=np.ones(5))
    h = 1e-6
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += h
            Wm[i, j] -= h
            fd = (loss_value(Wp, b) - loss_value(Wm, b)) / (2 * h)
            assert Wg[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)
    for i in range(b.shape[0]):
        bp, bm = b.copy(), b.copy()
        bp[i] += h
        bm[i] -= h
        fd = (loss_value(W, bp) - loss_value(W, bm)) / (2 * h)
        assert bg[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_affine_explicit_tape_records_weight_grads():
    """With constant inputs the layer still accumulates weight grads
    when handed a tape (the all-scalars-frozen training case)."""
    rng = np.random.default_rng(3)
    W = rng.normal(size=(2, 3))
    b = rng.normal(size=2)
    X = rng.normal(size=(4, 3))
    Wg = np.zeros_like(W)
    bg = np.zeros_like(b)
    tape = ad.Tape()
    outs = ad.affine([X[:, j] for j in range(3)], W, b,
                     weight_grad=Wg, bias_grad=bg, tape=tape)
    assert all(isinstance(o, ad.DualScalar) for o in outs)
    loss = outs[0] + outs[1]
    tape.backward(loss, seed=np.ones(4))
    want_W = np.ones(4) @ X
    assert np.allclose(Wg[0], want_W) and np.allclose(Wg[1], want_W)
    assert bg[0] == pytest.approx(4.0) and bg[1] == pytest.approx(4.0)
    # without a tape, constant inputs short-circuit to raw arrays
    raw = ad.affine([X[:, j] for j in range(3)], W, b)
    assert all(isinstance(o, np.ndarray) for o in raw)


def test_value_of_and_comparisons():
    tape = ad.Tape()
    x = tape.input(1.5)
    assert ad.value_of(x) == 1.5
    assert ad.value_of(2.5) == 2.5
    assert (x > 1.0) and (x <= 1.5) and (x >= 1.5) and (x < 2.0)
