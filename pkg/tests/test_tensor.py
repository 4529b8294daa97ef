import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthscope import tensor as T
from depthscope.errors import ShapeError, TapeLookupError

finite = st.floats(-10, 10, allow_nan=False, width=64)


def loop_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    np.testing.assert_allclose(T.matmul(a, b), loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_rmsnorm_against_float64_formula(rng):
    x = rng.standard_normal((3, 8)).astype(np.float32)
    g = rng.standard_normal(8).astype(np.float32)
    x64 = x.astype(np.float64)
    want = x64 / np.sqrt((x64**2).mean(-1, keepdims=True) + 1e-6) * g
    np.testing.assert_allclose(T.rmsnorm(x, g), want, rtol=1e-5, atol=1e-6)


def test_rmsnorm_of_zero_row_is_zero():
    out = T.rmsnorm(np.zeros((1, 4)), np.ones(4))
    assert np.all(out == 0) and np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = T.softmax(x)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(np.exp(T.log_softmax(x)), p, rtol=1e-10, atol=1e-300)


def test_softmax_is_shift_invariant_and_handles_large_logits(rng):
    x = rng.standard_normal(10)
    np.testing.assert_allclose(T.softmax(x + 1000.0), T.softmax(x), rtol=1e-12)
    assert np.isfinite(T.softmax(np.array([1e4, 0.0]))).all()


def test_softmax_with_masked_entries():
    p = T.softmax(np.array([0.0, -np.inf, 0.0]))
    np.testing.assert_array_equal(p, [0.5, 0.0, 0.5])


def test_silu_against_definition(rng):
    x = rng.standard_normal(50) * 5
    np.testing.assert_allclose(T.silu(x), x / (1 + np.exp(-x)), rtol=1e-10, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=finite), st.floats(0.1, 10))
def test_cosim_properties(u, v, c):
    s = T.cosim(u, v)
    assert -1.0 <= s <= 1.0
    assert T.cosim(v, u) == pytest.approx(s, abs=1e-12)
    if np.linalg.norm(u) >= 1e-3:
        assert T.cosim(c * u, v) == pytest.approx(s, abs=1e-9)
        assert T.cosim(u, u) == pytest.approx(1.0, abs=1e-12)
        assert T.cosim(u, -u) == pytest.approx(-1.0, abs=1e-12)


def test_cosim_zero_vector_and_length_mismatch():
    assert T.cosim(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(ShapeError):
        T.cosim(np.ones(3), np.ones(4))


def test_cosim_rows_matches_scalar(rng):
    u, v = rng.standard_normal((2, 6, 4))
    u[2] = 0
    np.testing.assert_allclose(T.cosim_rows(u, v), [T.cosim(a, b) for a, b in zip(u, v)], atol=1e-12)


def test_rotary_preserves_norm_and_position_zero(rng):
    x = rng.standard_normal((2, 5, 8))
    cos, sin = T.rotary_tables(5, 8, 10000.0, np.float64)
    y = T.rotary(x, cos, sin)
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)
    np.testing.assert_allclose(y[:, 0], x[:, 0])


def test_rotary_scores_depend_on_offset_only(rng):
    q, k = rng.standard_normal((2, 8))
    cos, sin = T.rotary_tables(12, 8, 100.0, np.float64)
    rot = lambda v, t: T.rotary(v[None], cos[t : t + 1], sin[t : t + 1])[0]
    assert rot(q, 7) @ rot(k, 4) == pytest.approx(rot(q, 3) @ rot(k, 0), rel=1e-10)


def _fd_check(op, args, wrt_index, rng, step=1e-6):
    """Central-difference check of one primitive's pullback in float64."""
    fwd, vjp = T.PRIMITIVES[op]
    out = fwd(*args)
    g = rng.standard_normal(np.shape(out))
    grads = vjp(g, out, *args)
    x = args[wrt_index]
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus = [a.copy() if i == wrt_index else a for i, a in enumerate(args)]
        minus = [a.copy() if i == wrt_index else a for i, a in enumerate(args)]
        plus[wrt_index][idx] += step
        minus[wrt_index][idx] -= step
        num[idx] = (np.sum(g * fwd(*plus)) - np.sum(g * fwd(*minus))) / (2 * step)
    np.testing.assert_allclose(grads[wrt_index], num, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize(
    "op,make,wrt",
    [
        ("matmul", lambda r: (r.standard_normal((3, 4)), r.standard_normal((4, 2))), 0),
        ("matmul", lambda r: (r.standard_normal((2, 3, 4)), r.standard_normal((4, 2))), 1),
        ("add", lambda r: (r.standard_normal((3, 4)), r.standard_normal(4)), 1),
        ("mul", lambda r: (r.standard_normal((3, 4)), r.standard_normal((1, 4))), 1),
        ("rmsnorm", lambda r: (r.standard_normal((3, 6)), r.standard_normal(6)), 0),
        ("rmsnorm", lambda r: (r.standard_normal((3, 6)), r.standard_normal(6)), 1),
        ("silu", lambda r: (r.standard_normal((3, 5)),), 0),
        ("softmax", lambda r: (r.standard_normal((3, 5)),), 0),
        ("log_softmax", lambda r: (r.standard_normal((3, 5)),), 0),
    ],
)
def test_primitive_pullbacks_match_finite_differences(op, make, wrt, rng):
    _fd_check(op, make(rng), wrt, rng)


def test_rotary_pullback(rng):
    cos, sin = T.rotary_tables(4, 6, 10.0, np.float64)
    x = rng.standard_normal((2, 4, 6))
    _fd_check("rotary", (x, cos, sin), 0, rng)


def test_tape_gradient_of_composite(rng):
    a = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 5))
    tape = T.Tape()
    A, W = tape.leaf(a), tape.leaf(w)
    loss = tape.sum(tape.pick(tape.log_softmax(tape.matmul(tape.silu(A), W)), np.array([0, 2]), np.array([1, 3])))
    (gw,) = tape.backward(loss, [W])

    def f(wv):
        z = T.log_softmax(T.matmul(T.silu(a), wv))
        return z[0, 1] + z[2, 3]

    num = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        e = np.zeros_like(w)
        e[idx] = 1e-6
        num[idx] = (f(w + e) - f(w - e)) / 2e-6
    np.testing.assert_allclose(gw, num, rtol=1e-6, atol=1e-8)


def test_tape_replay_reproduces_forward(rng):
    tape = T.Tape()
    x = tape.leaf(rng.standard_normal((2, 3)))
    y = tape.softmax(tape.scale(tape.add(x, x), 0.5))
    outs = tape.replay()
    np.testing.assert_array_equal(outs[-1], y.value)


def test_tape_rejects_foreign_and_nonscalar_nodes(rng):
    t1, t2 = T.Tape(), T.Tape()
    a = t1.leaf(rng.standard_normal(3))
    b = t2.leaf(rng.standard_normal(3))
    with pytest.raises(TapeLookupError):
        t1.add(a, b)
    s = t1.sum(a)
    with pytest.raises(TapeLookupError):
        t1.backward(s, [b])
    with pytest.raises(ShapeError):
        t1.backward(t1.add(a, a), [a])


def test_unused_leaf_gets_zero_gradient(rng):
    tape = T.Tape()
    a, b = tape.leaf(rng.standard_normal(3)), tape.leaf(rng.standard_normal(3))
    (ga, gb) = tape.backward(tape.sum(a), [a, b])
    np.testing.assert_array_equal(ga, np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(3))
