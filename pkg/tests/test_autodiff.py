import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from commbias import autodiff as ad
from commbias.autodiff import Tape, Tensor, backward, check_gradient


def conv2d_loops(x, w):
    """Nested-loop valid convolution used as an independent oracle."""
    n, h, wd, c = x.shape
    kh, kw, _, o = w.shape
    out = np.zeros((n, h - kh + 1, wd - kw + 1, o))
    for b in range(n):
        for i in range(h - kh + 1):
            for j in range(wd - kw + 1):
                for k in range(o):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for ch in range(c):
                                acc += x[b, i + di, j + dj, ch] * w[di, dj, ch, k]
                    out[b, i, j, k] = acc
    return out


def test_matmul_identity():
    out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.eye(2))
    np.testing.assert_array_equal(out.values, [[1, 2], [3, 4]])


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(np.zeros(5)).values, [0.2] * 5)


def test_conv2d_1x1_matches_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5, 5, 3))
    w = rng.normal(size=(1, 1, 3, 6))
    out = ad.conv2d(x, w).values
    np.testing.assert_allclose(out, conv2d_loops(x, w), atol=1e-12)
    # per-pixel linear map
    np.testing.assert_allclose(out[0, 2, 3], x[0, 2, 3] @ w[0, 0], atol=1e-12)


def test_conv2d_5x5_matches_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 7, 6, 2))
    w = rng.normal(size=(5, 3, 2, 4))
    np.testing.assert_allclose(ad.conv2d(x, w).values, conv2d_loops(x, w), atol=1e-10)


def test_shape_error_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(np.ones((1, 4, 4, 2)), np.ones((3, 3, 1, 1)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones(3), np.ones(4))


def test_sum_backward_all_ones():
    tape = Tape()
    x = tape.leaf(np.random.default_rng(0).normal(size=(3, 4, 2)))
    backward(tape, ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4, 2)))


def test_stop_gradient_contract():
    rng = np.random.default_rng(2)
    tape = Tape()
    x = tape.leaf(rng.normal(size=4))
    y = tape.leaf(rng.normal(size=4))
    sx = ad.stop_gradient(x)
    assert sx.values.tobytes() == x.values.tobytes()
    backward(tape, ad.sum(sx * y))
    np.testing.assert_array_equal(x.grad, np.zeros(4))
    np.testing.assert_array_equal(y.grad, x.values)


def test_non_scalar_loss_rejected():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.ShapeError):
        backward(tape, ad.square(x))


def test_accumulates_over_multiple_consumers():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    loss = ad.sum(x * x + x)
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.values + 1)


def test_diamond_matches_finite_differences():
    def f(x):
        s = ad.tanh(x)  # shared subexpression
        return ad.sum(ad.multiply(ad.exp(s), s) + ad.square(s))

    x = np.random.default_rng(3).normal(size=(3, 2))
    assert check_gradient(f, x).max_rel_error < 1e-6


def test_check_gradient_quadratic():
    rep = check_gradient(lambda x: ad.sum(ad.square(x)), np.array([1.0, 2.0, 3.0]), tol=1e-6)
    np.testing.assert_allclose(rep.analytic, [2, 4, 6])
    assert rep.passed and rep.max_rel_error < 1e-6


def test_check_gradient_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        check_gradient(lambda x: ad.sum(ad.log(x) * np.inf), np.array([1.0]))


def test_check_gradient_rejects_bad_h():
    with pytest.raises(ValueError):
        check_gradient(lambda x: ad.sum(x), np.ones(2), h=0.0)


def test_lstm_cell_gradient():
    rng = np.random.default_rng(4)
    n, d, hs = 3, 4, 5
    xv = rng.normal(size=(n, d))
    h0 = rng.normal(size=(n, hs))
    c0 = rng.normal(size=(n, hs))
    w = rng.normal(size=(d + hs, 4 * hs)) * 0.5
    b = rng.normal(size=4 * hs) * 0.5
    probe_h = rng.normal(size=(n, hs))
    probe_c = rng.normal(size=(n, hs))

    def via(slot):
        def f(t):
            args = [xv, h0, c0, w, b]
            args[slot] = t
            h, c = ad.lstm_cell(*args)
            return ad.sum(h * probe_h) + ad.sum(c * probe_c)
        return f

    for slot, val in enumerate([xv, h0, c0, w, b]):
        assert check_gradient(via(slot), val).max_rel_error < 1e-3


def test_relu_away_from_kink():
    rng = np.random.default_rng(5)
    x = rng.normal(size=20)
    x = np.where(np.abs(x) < 0.01, 0.5, x)
    probe = rng.normal(size=20)
    rep = check_gradient(lambda t: ad.sum(ad.relu(t) * probe), x)
    assert rep.max_rel_error < 1e-5


def test_maxpool_ties_route_to_first():
    tape = Tape()
    x = tape.leaf(np.ones((1, 2, 2, 1)))
    backward(tape, ad.sum(ad.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1, 0], [0, 0]])


def test_maxpool_values():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    np.testing.assert_array_equal(ad.maxpool2d(x).values[0, :, :, 0], [[5, 7], [13, 15]])


def test_gather_and_apply_primitive():
    x = np.array([[0.1, 0.9], [0.7, 0.3]])
    out = ad.apply_primitive("gather", [x, np.array([1, 0])])
    np.testing.assert_allclose(out.values, [0.9, 0.7])
    with pytest.raises(ValueError):
        ad.apply_primitive("frobnicate", [x])


def test_float32_preserved_with_scalars():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert (x * 2.0 + 1.0 - 0.5).dtype == np.float32
    assert ad.mean(x).dtype == np.float32


def test_log_clamp():
    assert np.isfinite(ad.log(np.array([0.0])).values).all()
    np.testing.assert_allclose(ad.log(np.array([0.0])).values, np.log(1e-10))


def test_mixed_tapes_rejected():
    a, b = Tape().leaf(np.ones(2)), Tape().leaf(np.ones(2))
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


# -------------------------------------------------- per-primitive FD sweep

def _rand_shape(rng, ndim):
    return tuple(int(v) for v in rng.integers(1, 5, size=ndim))


def _away_from_zero(rng, shape, margin=0.01):
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * (margin + 0.1), v)


def _cases(kind, rng):
    """Yield (function of one tensor, input[, frozen reference]) for a primitive."""
    if kind in ("add", "subtract", "multiply"):
        shape = _rand_shape(rng, 2)
        other = rng.normal(size=shape[-1:])  # broadcast along rows
        fn = getattr(ad, kind)
        probe = rng.normal(size=shape)
        base = rng.normal(size=shape)
        yield (lambda t: ad.sum(fn(t, other) * probe)), base.copy()
        yield (lambda t: ad.sum(fn(base, t) * probe)), other.copy()
    elif kind == "matmul":
        n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        probe = rng.normal(size=(n, m))
        yield (lambda t: ad.sum(ad.matmul(t, b) * probe)), a
        yield (lambda t: ad.sum(ad.matmul(a, t) * probe)), b
    elif kind == "conv2d":
        kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
        x = rng.normal(size=(2, kh + 2, kw + 1, 2))
        w = rng.normal(size=(kh, kw, 2, 3))
        probe = rng.normal(size=(2, 3, 2, 3))
        yield (lambda t: ad.sum(ad.conv2d(t, w) * probe)), x
        yield (lambda t: ad.sum(ad.conv2d(x, t) * probe)), w
    elif kind == "maxpool2d":
        # distinct values spaced well beyond 2h so the argmax is stable
        n = 2 * int(rng.integers(1, 3))
        vals = rng.permutation(4 * n * n).astype(float) * 0.05
        x = vals.reshape(1, 2 * n, n, 2)
        probe = rng.normal(size=(1, n, n // 2, 2))
        yield (lambda t: ad.sum(ad.maxpool2d(t) * probe)), x
    elif kind == "relu":
        shape = _rand_shape(rng, 2)
        probe = rng.normal(size=shape)
        yield (lambda t: ad.sum(ad.relu(t) * probe)), _away_from_zero(rng, shape)
    elif kind == "abs":
        shape = _rand_shape(rng, 2)
        probe = rng.normal(size=shape)
        yield (lambda t: ad.sum(ad.abs(t) * probe)), _away_from_zero(rng, shape)
    elif kind in ("tanh", "sigmoid", "square", "exp", "softmax", "log-softmax"):
        shape = _rand_shape(rng, 2)
        probe = rng.normal(size=shape)
        fn = ad.PRIMITIVES[kind]
        yield (lambda t: ad.sum(fn(t) * probe)), rng.normal(size=shape)
    elif kind == "log":
        shape = _rand_shape(rng, 2)
        probe = rng.normal(size=shape)
        yield (lambda t: ad.sum(ad.log(t) * probe)), rng.uniform(0.5, 2.0, size=shape)
    elif kind == "concat":
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        probe = rng.normal(size=(2, 5))
        yield (lambda t: ad.sum(ad.concat([t, b], axis=1) * probe)), a
        yield (lambda t: ad.sum(ad.concat([a, t], axis=1) * probe)), b
    elif kind == "reshape":
        x = rng.normal(size=(2, 6))
        probe = rng.normal(size=(3, 4))
        yield (lambda t: ad.sum(ad.reshape(t, (3, 4)) * probe)), x
    elif kind in ("sum", "mean"):
        shape = _rand_shape(rng, 3)
        fn = ad.PRIMITIVES[kind]
        probe = rng.normal(size=shape[0:1] + shape[2:])
        yield (lambda t: ad.sum(fn(t, axis=1) * probe)), rng.normal(size=shape)
        yield (lambda t: fn(ad.square(t))), rng.normal(size=shape)
    elif kind == "gather":
        shape = _rand_shape(rng, 2)
        idx = rng.integers(0, shape[1], size=shape[0])
        probe = rng.normal(size=shape[0])
        yield (lambda t: ad.sum(ad.gather(t, idx) * probe)), rng.normal(size=shape)
    elif kind == "stop-gradient":
        # finite differences see through the stop, so compare against the
        # function with the stopped branch frozen at the evaluation point
        shape = _rand_shape(rng, 2)
        x = rng.normal(size=shape)
        yield (lambda t: ad.sum(ad.stop_gradient(t) * t)), x, (lambda t: ad.sum(t * x))
    elif kind == "lstm-cell":
        n, d, hs = 2, 3, 2
        x = rng.normal(size=(n, d))
        h = rng.normal(size=(n, hs))
        c = rng.normal(size=(n, hs))
        w = rng.normal(size=(d + hs, 4 * hs))
        b = rng.normal(size=4 * hs)
        ph, pc = rng.normal(size=(n, hs)), rng.normal(size=(n, hs))
        yield (lambda t: ad.sum(ad.lstm_cell(x, h, c, t, b)[0] * ph)
               + ad.sum(ad.lstm_cell(x, h, c, t, b)[1] * pc)), w
    else:
        raise AssertionError(kind)


@pytest.mark.parametrize("kind", sorted(ad.PRIMITIVES))
def test_primitive_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    checked = 0
    for _ in range(10):
        for fn, x, *frozen in _cases(kind, rng):
            rep = check_gradient(fn, x, h=1e-3)
            if frozen:
                ref = check_gradient(frozen[0], x, h=1e-3)
                err = np.abs(rep.analytic - ref.numeric).max() / np.abs(ref.numeric).max()
            else:
                err = rep.max_rel_error
            assert err < 1e-3, (kind, err)
            checked += 1
    assert checked >= 10


def test_stop_gradient_fd_is_half():
    # d/dx [sg(x) * x] = sg(x): the tape reports only the non-stopped path
    x = np.array([1.0, -2.0])
    tape = Tape()
    t = tape.leaf(x)
    backward(tape, ad.sum(ad.stop_gradient(t) * t))
    np.testing.assert_array_equal(t.grad, x)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    s = ad.softmax(x).values
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
